#pragma once

#include "declutter/camera.hpp"
#include "declutter/dataset.hpp"
#include "declutter/field.hpp"
#include "declutter/losses.hpp"
#include "declutter/render.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace declutter {

/// Ablation ladder: (i) masked NeRF, (ii) + joint camera optimization,
/// (iii) + occlusion annealing regularization, (iv) + S3IM.
enum class AblationMode { kMaskedNerf, kCamera, kOar, kS3im };

AblationMode ablation_from_string(const std::string& s);
std::string to_string(AblationMode mode);

struct ModeTerms {
  bool camera = false;
  bool occlusion = false;
  bool s3im = false;
};
ModeTerms terms_for(AblationMode mode);

struct TrainConfig {
  std::string dataset;
  int scale = 1;
  long iterations = 200000;
  std::size_t batch_size = 4096;
  int samples_per_ray = 64;
  double lr_field = 5e-4;
  double lr_field_final = 5e-5;
  double lr_camera = 1e-3;  // decays by the same factor as the field rate
  std::uint64_t seed = 0;
  AblationMode mode = AblationMode::kS3im;
  bool use_masks = true;  // false trains on every pixel, occluders included
  bool tie_focal = false;
  bool learn_focal = true;
  bool white_background = false;
  bool auto_bounds = true;  // fit the field normalization to the training frusta
  int log_every = 100;
  long checkpoint_every = 0;  // 0: every 10% of the iterations
  FieldConfig field;
  ScheduleState schedule = ScheduleState::for_total(200000);
  S3IMConfig s3im;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Starts from defaults scaled to `iterations` and applies every key present;
/// unknown keys are rejected with their dotted path.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Stable 64-bit FNV-1a hash of the serialized config.
std::uint64_t config_hash(const TrainConfig& config);

/// splitmix64-style mixing of (seed, stream, counter).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter);

struct LogRow {
  long iteration = 0;
  double mse = 0.0;
  double occ = 0.0;
  double s3im = 0.0;
  double w_occ = 0.0;
  double f_max = 0.0;
  double psnr = 0.0;  // on the training batch
  double total = 0.0;
};

std::string metrics_csv_header();
std::string to_csv(const LogRow& row);

/// Axis-aligned box around every training frustum between near and far,
/// expressed as center + half of its largest side.
void fit_bounds(const PosedImageSet& set, FieldConfig& field);

/// Forward + backward over one ray batch. Depths are rays x N, ascending.
/// Fills field gradients (accumulated into d_field) and, when requested,
/// flat camera gradients. `relu_pattern` receives the on/off state of every
/// ReLU unit, which finite-difference checks use to detect kinks.
template <typename T>
LossBreakdown evaluate_batch(const RadianceField<T>& field, std::span<const T> field_params, const CameraState& camera,
                             const RayBatch& rays, std::span<const double> depths, int samples, double far,
                             const Rgb& background, long t, const ScheduleState& schedule, const S3IMConfig& s3im_cfg,
                             const LossTerms& terms, double f_max_pos, double f_max_dir, std::uint64_t s3im_seed,
                             std::span<T> d_field, std::vector<double>* d_camera,
                             std::vector<std::uint8_t>* relu_pattern = nullptr);

struct Checkpoint {
  long iteration = 0;
  TrainConfig config;
  std::vector<float> field;
  std::vector<float> camera;
  std::vector<float> adam_m_field, adam_v_field;
  std::vector<float> adam_m_camera, adam_v_camera;
  std::vector<Pose> base_poses;
  Intrinsics initial_intrinsics;
  double near = 0.0;
  double far = 0.0;

  CameraState camera_state() const;
};

/// Layout: 8-byte magic "DCLTCKPT", uint32 format version, uint64 header
/// length, JSON header, then raw little-endian float32 blocks in header order.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

class Trainer {
 public:
  Trainer(TrainConfig config, const PosedImageSet& dataset);
  /// Continues from a checkpoint; the dataset must be the one it was trained on.
  Trainer(const Checkpoint& checkpoint, const PosedImageSet& dataset);

  /// Runs iteration t = iteration() + 1.
  LogRow step();
  /// Runs until `until` (default: all iterations). Calls `on_log` every
  /// log_every iterations and writes checkpoints under `checkpoint_dir` if set.
  std::vector<LogRow> run(std::optional<long> until = std::nullopt,
                          const std::function<void(const LogRow&)>& on_log = {},
                          const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);

  long iteration() const { return iteration_; }
  const TrainConfig& config() const { return config_; }
  const RadianceField<float>& field() const { return field_; }
  std::span<const float> field_parameters() const { return field_params_; }
  CameraState camera_state() const;
  Checkpoint checkpoint() const;
  /// Views whose pixels were read by the training loop so far.
  const std::set<int>& touched_views() const { return touched_views_; }

 private:
  void init_data(const PosedImageSet& dataset);
  void adam_update(std::span<float> params, std::span<const float> grad, std::span<float> m, std::span<float> v,
                   double lr, long t) const;

  TrainConfig config_;
  RadianceField<float> field_;
  std::vector<float> field_params_;
  std::vector<float> camera_params_;
  std::vector<float> m_field_, v_field_, m_camera_, v_camera_;
  CameraState camera_template_;
  Intrinsics initial_intrinsics_;
  std::vector<Image> images_;  // holdout slots left empty
  std::vector<Mask> masks_;
  std::vector<int> train_views_;
  double near_ = 0.0, far_ = 0.0;
  long iteration_ = 0;
  std::set<int> touched_views_;
};

struct RenderedView {
  Image image;
  std::vector<float> sigma;  // (H * W) x N when requested
  int samples = 0;
};

struct RenderSettings {
  double near = 0.0;
  double far = 1.0;
  int samples = 64;
  bool white_background = false;
  bool keep_sigma = false;
  int chunk = 4096;  // rays per forward pass
};

/// Full-frequency render of one camera, depths at stratification-bin midpoints.
RenderedView render_view(const RadianceField<float>& field, std::span<const float> params, const Intrinsics& k,
                         const Pose& pose, int width, int height, const RenderSettings& settings);
RenderedView render_view(const Checkpoint& checkpoint, const Pose& pose, const Intrinsics& k, int width, int height,
                         bool keep_sigma = false);

}  // namespace declutter
