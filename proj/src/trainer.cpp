#include "declutter/trainer.hpp"

#include "declutter/sampler.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

namespace declutter {

AblationMode ablation_from_string(const std::string& s) {
  if (s == "masked_nerf" || s == "i") return AblationMode::kMaskedNerf;
  if (s == "+camera" || s == "camera" || s == "ii") return AblationMode::kCamera;
  if (s == "+oar" || s == "oar" || s == "iii") return AblationMode::kOar;
  if (s == "+s3im" || s == "s3im" || s == "iv") return AblationMode::kS3im;
  throw ValidationError("ablation_mode: unknown value '" + s + "' (expected masked_nerf, +camera, +oar, +s3im)");
}

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::kMaskedNerf: return "masked_nerf";
    case AblationMode::kCamera: return "+camera";
    case AblationMode::kOar: return "+oar";
    case AblationMode::kS3im: return "+s3im";
  }
  return "?";
}

ModeTerms terms_for(AblationMode mode) {
  ModeTerms t;
  t.camera = mode != AblationMode::kMaskedNerf;
  t.occlusion = mode == AblationMode::kOar || mode == AblationMode::kS3im;
  t.s3im = mode == AblationMode::kS3im;
  return t;
}

void TrainConfig::validate() const {
  if (iterations < 1) throw ValidationError("iterations must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (samples_per_ray < 2) throw ValidationError("samples_per_ray must be >= 2");
  if (scale < 1) throw ValidationError("scale must be >= 1");
  if (!(lr_field > 0.0) || !(lr_field_final > 0.0) || !(lr_camera > 0.0)) {
    throw ValidationError("learning rates must be > 0");
  }
  if (log_every < 1) throw ValidationError("log_every must be >= 1");
  if (checkpoint_every < 0) throw ValidationError("checkpoint_every must be >= 0");
  if (schedule.total_iterations != iterations) {
    throw ValidationError("schedule.total_iterations must equal iterations");
  }
  field.validate();
  schedule.validate();
  s3im.validate();
  if (terms_for(mode).s3im && schedule.w_s3im != 0.0) {
    const std::size_t need = std::size_t(std::max(1, s3im.patch_count)) * s3im.patch_side * s3im.patch_side;
    if (batch_size < need) {
      throw ValidationError(fmt::format("s3im.patch_side: batch_size {} is smaller than M*K^2 = {}", batch_size, need));
    }
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["dataset"] = c.dataset;
  j["scale"] = c.scale;
  j["iterations"] = c.iterations;
  j["batch_size"] = c.batch_size;
  j["samples_per_ray"] = c.samples_per_ray;
  j["lr_field"] = c.lr_field;
  j["lr_field_final"] = c.lr_field_final;
  j["lr_camera"] = c.lr_camera;
  j["seed"] = c.seed;
  j["ablation_mode"] = to_string(c.mode);
  j["use_masks"] = c.use_masks;
  j["tie_focal"] = c.tie_focal;
  j["learn_focal"] = c.learn_focal;
  j["white_background"] = c.white_background;
  j["auto_bounds"] = c.auto_bounds;
  j["log_every"] = c.log_every;
  j["checkpoint_every"] = c.checkpoint_every;
  const auto& f = c.field;
  j["field"] = {{"l_pos", f.encoding.l_pos},
                {"l_dir", f.encoding.l_dir},
                {"include_identity", f.encoding.include_identity},
                {"smooth_mask", f.encoding.smooth_mask},
                {"depth", f.depth},
                {"width", f.width},
                {"skip_layer", f.skip_layer},
                {"bound_center", {f.bound_center.x(), f.bound_center.y(), f.bound_center.z()}},
                {"bound_radius", f.bound_radius}};
  const auto& s = c.schedule;
  j["schedule"] = {{"t_freq_end", s.t_freq_end},
                   {"t_c", s.t_c},
                   {"lambda_anneal", s.lambda_anneal},
                   {"t_end", s.t_end_override ? nlohmann::json(*s.t_end_override) : nlohmann::json(nullptr)},
                   {"t_start", s.t_start},
                   {"w_full", s.w_full},
                   {"w_s3im", s.w_s3im},
                   {"w_occ_coeff", s.w_occ_coeff},
                   {"occ_near_fraction", s.occ_near_fraction}};
  j["s3im"] = {{"patch_side", c.s3im.patch_side}, {"patch_count", c.s3im.patch_count}, {"window", c.s3im.window},
               {"stride", c.s3im.stride},         {"c1", c.s3im.c1},                   {"c2", c.s3im.c2}};
  return j;
}

namespace {

template <typename V>
V get_value(const nlohmann::json& j, const std::string& path) {
  try {
    return j.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("config key '" + path + "': wrong type (" + j.dump() + ")");
  }
}

// Reads each key of `obj` through `handlers`, rejecting anything unhandled.
void apply_object(const nlohmann::json& obj, const std::string& prefix,
                  const std::function<bool(const std::string&, const nlohmann::json&, const std::string&)>& handler) {
  if (!obj.is_object()) throw ValidationError("config key '" + prefix + "': expected an object");
  for (const auto& [key, value] : obj.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!handler(key, value, path)) throw ValidationError("unknown config key '" + path + "'");
  }
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("train config must be a JSON object");
  TrainConfig c;
  if (j.contains("iterations")) c.iterations = get_value<long>(j["iterations"], "iterations");
  if (c.iterations < 1) throw ValidationError("config key 'iterations': must be >= 1");
  c.schedule = ScheduleState::for_total(c.iterations);

  apply_object(j, "", [&](const std::string& k, const nlohmann::json& v, const std::string& p) {
    if (k == "dataset") c.dataset = get_value<std::string>(v, p);
    else if (k == "scale") c.scale = get_value<int>(v, p);
    else if (k == "iterations") {}
    else if (k == "batch_size") c.batch_size = get_value<std::size_t>(v, p);
    else if (k == "samples_per_ray") c.samples_per_ray = get_value<int>(v, p);
    else if (k == "lr_field") c.lr_field = get_value<double>(v, p);
    else if (k == "lr_field_final") c.lr_field_final = get_value<double>(v, p);
    else if (k == "lr_camera") c.lr_camera = get_value<double>(v, p);
    else if (k == "seed") c.seed = get_value<std::uint64_t>(v, p);
    else if (k == "ablation_mode") c.mode = ablation_from_string(get_value<std::string>(v, p));
    else if (k == "use_masks") c.use_masks = get_value<bool>(v, p);
    else if (k == "tie_focal") c.tie_focal = get_value<bool>(v, p);
    else if (k == "learn_focal") c.learn_focal = get_value<bool>(v, p);
    else if (k == "white_background") c.white_background = get_value<bool>(v, p);
    else if (k == "auto_bounds") c.auto_bounds = get_value<bool>(v, p);
    else if (k == "log_every") c.log_every = get_value<int>(v, p);
    else if (k == "checkpoint_every") c.checkpoint_every = get_value<long>(v, p);
    else if (k == "field") {
      apply_object(v, p, [&](const std::string& k2, const nlohmann::json& v2, const std::string& p2) {
        auto& f = c.field;
        if (k2 == "l_pos") f.encoding.l_pos = get_value<int>(v2, p2);
        else if (k2 == "l_dir") f.encoding.l_dir = get_value<int>(v2, p2);
        else if (k2 == "include_identity") f.encoding.include_identity = get_value<bool>(v2, p2);
        else if (k2 == "smooth_mask") f.encoding.smooth_mask = get_value<bool>(v2, p2);
        else if (k2 == "depth") f.depth = get_value<int>(v2, p2);
        else if (k2 == "width") f.width = get_value<int>(v2, p2);
        else if (k2 == "skip_layer") f.skip_layer = get_value<int>(v2, p2);
        else if (k2 == "bound_radius") f.bound_radius = get_value<double>(v2, p2);
        else if (k2 == "bound_center") {
          const auto a = get_value<std::vector<double>>(v2, p2);
          if (a.size() != 3) throw ValidationError("config key '" + p2 + "': expected 3 numbers");
          f.bound_center = Vec3(a[0], a[1], a[2]);
        } else return false;
        return true;
      });
    } else if (k == "schedule") {
      apply_object(v, p, [&](const std::string& k2, const nlohmann::json& v2, const std::string& p2) {
        auto& s = c.schedule;
        if (k2 == "t_freq_end") s.t_freq_end = get_value<long>(v2, p2);
        else if (k2 == "t_c") s.t_c = get_value<long>(v2, p2);
        else if (k2 == "lambda_anneal") s.lambda_anneal = get_value<double>(v2, p2);
        else if (k2 == "t_end") s.t_end_override = v2.is_null() ? std::nullopt : std::optional<long>(get_value<long>(v2, p2));
        else if (k2 == "t_start") s.t_start = get_value<long>(v2, p2);
        else if (k2 == "w_full") s.w_full = get_value<double>(v2, p2);
        else if (k2 == "w_s3im") s.w_s3im = get_value<double>(v2, p2);
        else if (k2 == "w_occ_coeff") s.w_occ_coeff = get_value<double>(v2, p2);
        else if (k2 == "occ_near_fraction") s.occ_near_fraction = get_value<double>(v2, p2);
        else return false;
        return true;
      });
    } else if (k == "s3im") {
      apply_object(v, p, [&](const std::string& k2, const nlohmann::json& v2, const std::string& p2) {
        auto& s = c.s3im;
        if (k2 == "patch_side") s.patch_side = get_value<int>(v2, p2);
        else if (k2 == "patch_count") s.patch_count = get_value<int>(v2, p2);
        else if (k2 == "window") s.window = get_value<int>(v2, p2);
        else if (k2 == "stride") s.stride = get_value<int>(v2, p2);
        else if (k2 == "c1") s.c1 = get_value<double>(v2, p2);
        else if (k2 == "c2") s.c2 = get_value<double>(v2, p2);
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  c.validate();
  return c;
}

std::uint64_t config_hash(const TrainConfig& config) {
  const std::string text = to_json(config).dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ counter);
}

std::string metrics_csv_header() { return "iter,mse,occ,s3im,w_occ,f_max,psnr_val"; }

std::string to_csv(const LogRow& r) {
  return fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}", r.iteration, r.mse, r.occ, r.s3im, r.w_occ,
                     r.f_max, r.psnr);
}

void fit_bounds(const PosedImageSet& set, FieldConfig& field) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  const double w = set.width(), h = set.height();
  const auto& k = set.intrinsics;
  for (int v : set.training_views()) {
    const Pose& pose = set.poses[v];
    for (double px : {0.0, w})
      for (double py : {0.0, h}) {
        const Vec3 d = pose.rotation * Vec3((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0).normalized();
        for (double t : {set.near, set.far}) {
          const Vec3 p = pose.center + t * d;
          lo = lo.cwiseMin(p);
          hi = hi.cwiseMax(p);
        }
      }
  }
  field.bound_center = 0.5 * (lo + hi);
  field.bound_radius = std::max(0.5 * (hi - lo).maxCoeff(), 1e-6);
}

template <typename T>
LossBreakdown evaluate_batch(const RadianceField<T>& field, std::span<const T> params, const CameraState& camera,
                             const RayBatch& rays, std::span<const double> depths, int samples, double far,
                             const Rgb& background, long t, const ScheduleState& schedule, const S3IMConfig& s3im_cfg,
                             const LossTerms& terms, double f_max_pos, double f_max_dir, std::uint64_t s3im_seed,
                             std::span<T> d_field, std::vector<double>* d_camera,
                             std::vector<std::uint8_t>* relu_pattern) {
  const int r_count = static_cast<int>(rays.size());
  const std::size_t p_count = std::size_t(r_count) * samples;
  if (depths.size() != p_count) throw ValidationError("evaluate_batch: depth array does not match rays x samples");

  std::vector<T> points(p_count * 3), dirs(std::size_t(r_count) * 3), depth_t(p_count);
  for (int r = 0; r < r_count; ++r) {
    const Vec3& o = rays.origins[r];
    const Vec3& d = rays.directions[r];
    for (int c = 0; c < 3; ++c) dirs[r * 3 + c] = static_cast<T>(d[c]);
    for (int k = 0; k < samples; ++k) {
      const std::size_t i = std::size_t(r) * samples + k;
      depth_t[i] = static_cast<T>(depths[i]);
      for (int c = 0; c < 3; ++c) points[i * 3 + c] = static_cast<T>(o[c] + depths[i] * d[c]);
    }
  }

  std::vector<T> sigma(p_count), color(p_count * 3);
  FieldCache<T> cache;
  field.forward(params, points, dirs, samples, f_max_pos, f_max_dir, sigma, color, &cache);
  if (relu_pattern) {
    relu_pattern->clear();
    auto append = [&](const MatX<T>& m) {
      for (Eigen::Index i = 0; i < m.size(); ++i) relu_pattern->push_back(m.data()[i] > T(0) ? 1 : 0);
    };
    for (const auto& h : cache.hidden) append(h);
    append(cache.color_hidden);
  }
  const auto render = volume_render<T>(sigma, color, depth_t, r_count, samples, static_cast<T>(far), background);

  std::vector<double> pred(std::size_t(r_count) * 3), gt(pred.size()), sigma_d(p_count);
  for (int r = 0; r < r_count; ++r)
    for (int c = 0; c < 3; ++c) {
      pred[r * 3 + c] = render.rgb[r * 3 + c];
      gt[r * 3 + c] = rays.gt_rgb[r][c];
    }
  std::copy(sigma.begin(), sigma.end(), sigma_d.begin());

  std::vector<double> d_pred(pred.size(), 0.0), d_sigma_loss(p_count, 0.0);
  const LossBreakdown loss =
      total_loss(pred, gt, sigma_d, r_count, samples, t, schedule, s3im_cfg, s3im_seed, terms, d_pred, d_sigma_loss);

  std::vector<T> d_rgb(pred.size()), d_sigma(p_count), d_color(p_count * 3, T(0));
  std::transform(d_pred.begin(), d_pred.end(), d_rgb.begin(), [](double v) { return static_cast<T>(v); });
  std::transform(d_sigma_loss.begin(), d_sigma_loss.end(), d_sigma.begin(), [](double v) { return static_cast<T>(v); });
  volume_render_backward<T>(render, color, d_rgb, background, d_sigma, d_color);

  if (d_camera == nullptr) {
    field.backward(params, cache, d_sigma, d_color, d_field, {}, {});
    return loss;
  }
  std::vector<T> d_points(p_count * 3, T(0)), d_dirs(std::size_t(r_count) * 3, T(0));
  field.backward(params, cache, d_sigma, d_color, d_field, d_points, d_dirs);
  std::vector<Vec3> d_o(r_count, Vec3::Zero()), d_d(r_count, Vec3::Zero());
  for (int r = 0; r < r_count; ++r) {
    for (int c = 0; c < 3; ++c) d_d[r][c] = static_cast<double>(d_dirs[r * 3 + c]);
    for (int k = 0; k < samples; ++k) {
      const std::size_t i = std::size_t(r) * samples + k;
      for (int c = 0; c < 3; ++c) {
        const double g = static_cast<double>(d_points[i * 3 + c]);
        d_o[r][c] += g;
        d_d[r][c] += depths[i] * g;
      }
    }
  }
  *d_camera = camera_backward(camera, rays, d_o, d_d);
  return loss;
}

template LossBreakdown evaluate_batch<float>(const RadianceField<float>&, std::span<const float>, const CameraState&,
                                             const RayBatch&, std::span<const double>, int, double, const Rgb&, long,
                                             const ScheduleState&, const S3IMConfig&, const LossTerms&, double, double,
                                             std::uint64_t, std::span<float>, std::vector<double>*,
                                             std::vector<std::uint8_t>*);
template LossBreakdown evaluate_batch<double>(const RadianceField<double>&, std::span<const double>,
                                              const CameraState&, const RayBatch&, std::span<const double>, int, double,
                                              const Rgb&, long, const ScheduleState&, const S3IMConfig&,
                                              const LossTerms&, double, double, std::uint64_t, std::span<double>,
                                              std::vector<double>*, std::vector<std::uint8_t>*);

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'D', 'C', 'L', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename U>
void write_le(std::ostream& out, U value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  out.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  U value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(U));
  if (!in) throw ValidationError("checkpoint: truncated file");
  return value;
}

nlohmann::json pose_json(const Pose& p) {
  const Mat34 m = p.matrix();
  std::vector<double> v;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) v.push_back(m(r, c));
  return v;
}

Pose pose_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 12) throw ValidationError("checkpoint: pose needs 12 values");
  Mat34 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = v[r * 4 + c];
  return Pose::from_matrix(m);
}

}  // namespace

CameraState Checkpoint::camera_state() const {
  CameraState s = CameraState::from_initial(initial_intrinsics, base_poses, config.schedule.t_c, config.tie_focal);
  s.read_parameters<float>(camera);
  return s;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::vector<std::pair<std::string, const std::vector<float>*>> blocks = {
      {"field", &ckpt.field},
      {"camera", &ckpt.camera},
      {"adam_m_field", &ckpt.adam_m_field},
      {"adam_v_field", &ckpt.adam_v_field},
      {"adam_m_camera", &ckpt.adam_m_camera},
      {"adam_v_camera", &ckpt.adam_v_camera}};
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["iteration"] = ckpt.iteration;
  header["seed"] = ckpt.config.seed;
  header["config_hash"] = fmt::format("{:016x}", config_hash(ckpt.config));
  header["config"] = to_json(ckpt.config);
  header["dtype"] = "float32-le";
  header["near"] = ckpt.near;
  header["far"] = ckpt.far;
  const auto& k = ckpt.initial_intrinsics;
  header["initial_intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
  header["base_poses"] = nlohmann::json::array();
  for (const auto& p : ckpt.base_poses) header["base_poses"].push_back(pose_json(p));
  std::uint64_t offset = 0;
  header["blocks"] = nlohmann::json::array();
  for (const auto& [name, data] : blocks) {
    header["blocks"].push_back({{"name", name}, {"count", data->size()}, {"offset", offset}});
    offset += data->size() * sizeof(float);
  }
  const std::string text = header.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    write_le<std::uint32_t>(out, kFormatVersion);
    write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, data] : blocks)
      out.write(reinterpret_cast<const char*>(data->data()), static_cast<std::streamsize>(data->size() * sizeof(float)));
    if (!out) throw RuntimeFailure("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw ValidationError(path.string() + ": not a checkpoint file");
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kFormatVersion) throw ValidationError(fmt::format("{}: unsupported version {}", path.string(), version));
  const auto length = read_le<std::uint64_t>(in);
  if (length > (1ull << 30)) throw ValidationError(path.string() + ": corrupt header length");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw ValidationError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed header: " + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.iteration = header.at("iteration").get<long>();
    ckpt.near = header.at("near").get<double>();
    ckpt.far = header.at("far").get<double>();
    ckpt.config = train_config_from_json(header.at("config"));
    if (header.at("config_hash").get<std::string>() != fmt::format("{:016x}", config_hash(ckpt.config))) {
      throw ValidationError(path.string() + ": config hash mismatch");
    }
    const auto& k = header.at("initial_intrinsics");
    ckpt.initial_intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                               k.at("cy").get<double>()};
    for (const auto& p : header.at("base_poses")) ckpt.base_poses.push_back(pose_from(p));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": bad header: " + e.what());
  }

  const std::streamoff data_start = in.tellg();
  auto target = [&](const std::string& name) -> std::vector<float>& {
    if (name == "field") return ckpt.field;
    if (name == "camera") return ckpt.camera;
    if (name == "adam_m_field") return ckpt.adam_m_field;
    if (name == "adam_v_field") return ckpt.adam_v_field;
    if (name == "adam_m_camera") return ckpt.adam_m_camera;
    if (name == "adam_v_camera") return ckpt.adam_v_camera;
    throw ValidationError(path.string() + ": unknown block " + name);
  };
  for (const auto& b : header.at("blocks")) {
    auto& dst = target(b.at("name").get<std::string>());
    dst.resize(b.at("count").get<std::size_t>());
    in.seekg(data_start + static_cast<std::streamoff>(b.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(float)));
    if (!in) throw ValidationError(path.string() + ": truncated block " + b.at("name").get<std::string>());
  }
  const RadianceField<float> field(ckpt.config.field);
  if (ckpt.field.size() != field.parameter_count() || ckpt.adam_m_field.size() != ckpt.field.size() ||
      ckpt.adam_v_field.size() != ckpt.field.size()) {
    throw ValidationError(path.string() + ": field block sizes do not match the config");
  }
  if (ckpt.camera.size() != 2 + 6 * ckpt.base_poses.size() || ckpt.adam_m_camera.size() != ckpt.camera.size() ||
      ckpt.adam_v_camera.size() != ckpt.camera.size()) {
    throw ValidationError(path.string() + ": camera block sizes do not match the pose count");
  }
  return ckpt;
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(TrainConfig config, const PosedImageSet& dataset)
    : config_(std::move(config)), field_([&] {
        if (config_.auto_bounds) fit_bounds(dataset, config_.field);
        config_.auto_bounds = false;  // bounds are now part of the config
        config_.validate();
        return config_.field;
      }()) {
  dataset.validate();
  field_params_ = field_.init_parameters(derive_seed(config_.seed, 0, 0));
  m_field_.assign(field_params_.size(), 0.0f);
  v_field_.assign(field_params_.size(), 0.0f);
  initial_intrinsics_ = dataset.intrinsics;
  camera_template_ =
      CameraState::from_initial(dataset.intrinsics, dataset.poses, config_.schedule.t_c, config_.tie_focal);
  camera_params_.assign(camera_template_.parameter_count(), 0.0f);
  camera_template_.write_parameters<float>(camera_params_);
  m_camera_.assign(camera_params_.size(), 0.0f);
  v_camera_.assign(camera_params_.size(), 0.0f);
  init_data(dataset);
}

Trainer::Trainer(const Checkpoint& ckpt, const PosedImageSet& dataset)
    : config_(ckpt.config), field_(ckpt.config.field) {
  dataset.validate();
  if (dataset.view_count() != ckpt.base_poses.size()) {
    throw ValidationError("checkpoint and dataset disagree on the number of views");
  }
  field_params_ = ckpt.field;
  m_field_ = ckpt.adam_m_field;
  v_field_ = ckpt.adam_v_field;
  camera_params_ = ckpt.camera;
  m_camera_ = ckpt.adam_m_camera;
  v_camera_ = ckpt.adam_v_camera;
  initial_intrinsics_ = ckpt.initial_intrinsics;
  camera_template_ =
      CameraState::from_initial(ckpt.initial_intrinsics, ckpt.base_poses, config_.schedule.t_c, config_.tie_focal);
  iteration_ = ckpt.iteration;
  init_data(dataset);
}

void Trainer::init_data(const PosedImageSet& dataset) {
  near_ = dataset.near;
  far_ = dataset.far;
  train_views_ = dataset.training_views();
  if (train_views_.empty()) throw ValidationError("dataset has no training views");
  // Holdout images never enter the trainer; their slots stay empty.
  images_.assign(dataset.view_count(), Image());
  masks_.assign(dataset.view_count(), Mask());
  for (int v : train_views_) {
    images_[v] = dataset.images[v];
    masks_[v] = config_.use_masks ? dataset.masks[v] : Mask(dataset.masks[v].width, dataset.masks[v].height, 0);
  }
}

CameraState Trainer::camera_state() const {
  CameraState s = camera_template_;
  s.read_parameters<float>(camera_params_);
  return s;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.iteration = iteration_;
  c.config = config_;
  c.field = field_params_;
  c.camera = camera_params_;
  c.adam_m_field = m_field_;
  c.adam_v_field = v_field_;
  c.adam_m_camera = m_camera_;
  c.adam_v_camera = v_camera_;
  c.base_poses = camera_template_.base_poses;
  c.initial_intrinsics = initial_intrinsics_;
  c.near = near_;
  c.far = far_;
  return c;
}

void Trainer::adam_update(std::span<float> params, std::span<const float> grad, std::span<float> m,
                          std::span<float> v, double lr, long t) const {
  constexpr float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
  const float c1 = 1.0f - static_cast<float>(std::pow(0.9, double(t)));
  const float c2 = 1.0f - static_cast<float>(std::pow(0.999, double(t)));
  const float step = static_cast<float>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = b1 * m[i] + (1.0f - b1) * grad[i];
    v[i] = b2 * v[i] + (1.0f - b2) * grad[i] * grad[i];
    const float mh = m[i] / c1;
    const float vh = v[i] / c2;
    params[i] -= step * mh / (std::sqrt(vh) + eps);
  }
}

LogRow Trainer::step() {
  const long t = iteration_ + 1;
  const auto& s = config_.schedule;
  const ModeTerms mode = terms_for(config_.mode);
  const int n = config_.samples_per_ray;

  const auto pixels = sample_batch(masks_, train_views_, config_.batch_size, derive_seed(config_.seed, 1, t));
  for (const auto& p : pixels) touched_views_.insert(p.view);
  const CameraState camera = camera_state();
  const RayBatch rays = generate_rays(camera, pixels, images_, masks_);

  std::vector<double> depths(rays.size() * n);
  std::mt19937_64 rng(derive_seed(config_.seed, 2, t));
  for (std::size_t r = 0; r < rays.size(); ++r)
    sample_depths(near_, far_, n, true, &rng, std::span<double>(depths).subspan(r * n, n));

  const auto& enc = config_.field.encoding;
  const double f_pos = frequency_max(t, enc.l_pos, s.t_freq_end);
  const double f_dir = frequency_max(t, enc.l_dir, s.t_freq_end);
  const bool camera_live = mode.camera && camera_gate(t, camera);
  const LossTerms terms{mode.occlusion, mode.s3im};
  const double bg = config_.white_background ? 1.0 : 0.0;

  std::vector<float> d_field(field_params_.size(), 0.0f);
  std::vector<double> d_camera;
  const LossBreakdown loss =
      evaluate_batch<float>(field_, field_params_, camera, rays, depths, n, far_, Rgb{bg, bg, bg}, t, s, config_.s3im,
                            terms, f_pos, f_dir, derive_seed(config_.seed, 3, t), d_field,
                            camera_live ? &d_camera : nullptr);
  if (!std::isfinite(loss.total)) {
    throw RuntimeFailure(fmt::format("non-finite loss at iteration {}: total={} mse={} occ={} s3im={} w_occ={}", t,
                                     loss.total, loss.mse, loss.occ, loss.s3im, loss.w_occ));
  }

  const double decay = std::pow(config_.lr_field_final / config_.lr_field, double(t - 1) / double(config_.iterations));
  adam_update(field_params_, d_field, m_field_, v_field_, config_.lr_field * decay, t);
  if (camera_live) {
    std::vector<float> g(d_camera.size());
    std::transform(d_camera.begin(), d_camera.end(), g.begin(), [](double v) { return static_cast<float>(v); });
    if (!config_.learn_focal) g[0] = g[1] = 0.0f;
    const long camera_step = t - std::max<long>(camera.trainable_from, 1) + 1;
    adam_update(camera_params_, g, m_camera_, v_camera_, config_.lr_camera * decay, camera_step);
  }
  iteration_ = t;

  LogRow row;
  row.iteration = t;
  row.mse = loss.mse;
  row.occ = loss.occ;
  row.s3im = loss.s3im;
  row.w_occ = loss.w_occ;
  row.f_max = f_pos;
  row.psnr = loss.mse > 0.0 ? std::min(99.0, -10.0 * std::log10(loss.mse)) : 99.0;
  row.total = loss.total;
  return row;
}

std::vector<LogRow> Trainer::run(std::optional<long> until, const std::function<void(const LogRow&)>& on_log,
                                 const std::optional<std::filesystem::path>& checkpoint_dir) {
  const long end = std::min(until.value_or(config_.iterations), config_.iterations);
  const long every = config_.checkpoint_every > 0 ? config_.checkpoint_every
                                                  : std::max<long>(1, config_.iterations / 10);
  if (checkpoint_dir) std::filesystem::create_directories(*checkpoint_dir);
  std::vector<LogRow> rows;
  while (iteration_ < end) {
    const LogRow row = step();
    if (row.iteration % config_.log_every == 0) {
      rows.push_back(row);
      if (on_log) on_log(row);
    }
    if (checkpoint_dir && (row.iteration % every == 0 || row.iteration == config_.iterations)) {
      const Checkpoint c = checkpoint();
      save_checkpoint(c, *checkpoint_dir / fmt::format("checkpoint_{:07}.ckpt", row.iteration));
      save_checkpoint(c, *checkpoint_dir / "latest.ckpt");
    }
  }
  return rows;
}

// ---------------------------------------------------------------- rendering

RenderedView render_view(const RadianceField<float>& field, std::span<const float> params, const Intrinsics& k,
                         const Pose& pose, int width, int height, const RenderSettings& settings) {
  if (width < 1 || height < 1) throw ValidationError("render_view: empty resolution");
  if (!pose.rotation.allFinite() || !pose.center.allFinite()) throw ValidationError("render_view: non-finite pose");
  if (settings.samples < 1 || settings.chunk < 1 || !(settings.far > settings.near)) {
    throw ValidationError("render_view: bad sampling settings");
  }
  const int n = settings.samples;
  const auto& enc = field.config().encoding;
  const double bg = settings.white_background ? 1.0 : 0.0;
  const Rgb background{bg, bg, bg};
  std::vector<float> depth_row(n);
  const double step = (settings.far - settings.near) / n;
  for (int i = 0; i < n; ++i) depth_row[i] = static_cast<float>(settings.near + (i + 0.5) * step);

  RenderedView out;
  out.image = Image(width, height);
  out.samples = n;
  if (settings.keep_sigma) out.sigma.resize(std::size_t(width) * height * n);
  const std::size_t total = std::size_t(width) * height;
  for (std::size_t start = 0; start < total; start += settings.chunk) {
    const int rays = static_cast<int>(std::min<std::size_t>(settings.chunk, total - start));
    std::vector<float> points(std::size_t(rays) * n * 3), dirs(std::size_t(rays) * 3), depths(std::size_t(rays) * n);
    for (int r = 0; r < rays; ++r) {
      const std::size_t pix = start + r;
      const double px = double(pix % width) + 0.5, py = double(pix / width) + 0.5;
      const Vec3 d = (pose.rotation * Vec3((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0)).normalized();
      for (int c = 0; c < 3; ++c) dirs[r * 3 + c] = static_cast<float>(d[c]);
      for (int i = 0; i < n; ++i) {
        const std::size_t idx = std::size_t(r) * n + i;
        depths[idx] = depth_row[i];
        for (int c = 0; c < 3; ++c) points[idx * 3 + c] = static_cast<float>(pose.center[c] + double(depth_row[i]) * d[c]);
      }
    }
    std::vector<float> sigma(std::size_t(rays) * n), color(std::size_t(rays) * n * 3);
    field.forward(params, points, dirs, n, enc.l_pos, enc.l_dir, sigma, color, nullptr);
    const auto res = volume_render<float>(sigma, color, depths, rays, n, static_cast<float>(settings.far), background);
    std::copy(res.rgb.begin(), res.rgb.end(), out.image.data.begin() + start * 3);
    if (settings.keep_sigma) std::copy(sigma.begin(), sigma.end(), out.sigma.begin() + start * n);
  }
  return out;
}

RenderedView render_view(const Checkpoint& ckpt, const Pose& pose, const Intrinsics& k, int width, int height,
                         bool keep_sigma) {
  const RadianceField<float> field(ckpt.config.field);
  RenderSettings settings;
  settings.near = ckpt.near;
  settings.far = ckpt.far;
  settings.samples = ckpt.config.samples_per_ray;
  settings.white_background = ckpt.config.white_background;
  settings.keep_sigma = keep_sigma;
  return render_view(field, ckpt.field, k, pose, width, height, settings);
}

}  // namespace declutter
