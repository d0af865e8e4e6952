#pragma once

#include "declutter/common.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace declutter {

enum class Shape { kSphere, kBox, kPlaneSlab };

/// Constant-density primitive. Sphere radius is extent.x(); a box uses
/// extent as half sizes; a plane slab is unbounded except along slab_axis,
/// where extent[slab_axis] is its half thickness.
struct Primitive {
  Shape shape = Shape::kBox;
  Vec3 center = Vec3::Zero();
  Vec3 extent = Vec3::Ones();
  int slab_axis = 2;
  double density = 1.0;
  Rgb albedo{1.0, 1.0, 1.0};
  bool is_occluder = false;

  bool contains(const Vec3& p) const;
  /// Entry/exit distances of the ray o + t d with the primitive's volume.
  std::optional<std::pair<double, double>> intersect(const Vec3& origin, const Vec3& dir) const;
};

struct SyntheticScene {
  std::vector<Primitive> primitives;
  Rgb background_color{0.0, 0.0, 0.0};
  double near = 0.5;
  double far = 6.0;

  void validate() const;
  bool has_occluders() const;
};

struct CameraRig {
  Intrinsics intrinsics;
  int width = 0;
  int height = 0;
  std::vector<Pose> poses;

  void validate() const;
  std::size_t view_count() const { return poses.size(); }
  /// Unit world-space ray direction through a continuous pixel position.
  Vec3 ray_direction(std::size_t view, double px, double py) const;
};

struct DensityColor {
  double density = 0.0;
  Rgb color;
};

/// First-listed primitive containing the point wins; empty space gives the background.
DensityColor scene_density_color(const SyntheticScene& scene, const Vec3& point, bool include_occluders);

struct OracleRenderOptions {
  int samples_per_ray = 128;
  bool include_occluders = true;
  /// Jittered bins instead of evenly spaced depths spanning [near, far].
  bool stratified = false;
  std::uint64_t seed = 0;
};

Image render_oracle(const SyntheticScene& scene, const CameraRig& rig, std::size_t view_index,
                    const OracleRenderOptions& options);

struct SurfaceHit {
  double distance = 0.0;
  std::size_t primitive = 0;
};

/// Closest primitive surface along the ray within [min_t, max_t].
std::optional<SurfaceHit> first_hit(const SyntheticScene& scene, const Vec3& origin, const Vec3& dir,
                                    double min_t, double max_t, bool include_occluders = true);

Mask occluder_mask(const SyntheticScene& scene, const CameraRig& rig, std::size_t view_index);

/// Depth tolerance for counting a reprojected surface point as visible.
inline constexpr double kVisibilityTolerance = 1e-3;

/// Per reference pixel: number of views in which its first non-occluder
/// surface point is the first hit. Background pixels get the view count.
std::vector<int> pixel_visibility(const SyntheticScene& scene, const CameraRig& rig,
                                  std::size_t reference_view);

/// True when the world point is the first surface hit from the given view.
bool point_visible_in_view(const SyntheticScene& scene, const CameraRig& rig, std::size_t view,
                           const Vec3& point);

CameraRig perturb_poses(const CameraRig& rig, double rotation_noise_deg, double translation_noise,
                        std::uint64_t seed);

struct SparsePointCloud;
/// Surface points sampled on a pixel grid of every view, with observations in
/// all views where each point is visible. Stands in for an SfM reconstruction.
SparsePointCloud sample_point_cloud(const SyntheticScene& scene, const CameraRig& rig, int pixel_stride);

/// Forward-facing test scene: tiled background wall, mid-depth boxes and an
/// occluder sphere near the cameras.
struct DeclutterSceneOptions {
  int views = 9;
  int width = 64;
  int height = 64;
  double occluder_radius = 0.45;
  double baseline = 1.2;      // horizontal extent of the camera path
  double target_depth = 5.0;  // cameras look at (0, 0, target_depth)
};
std::pair<SyntheticScene, CameraRig> make_declutter_scene(const DeclutterSceneOptions& options);

// JSON scene description: primitives, background_color, near, far, cameras,
// intrinsics, resolution, seed.
struct SceneDescription {
  SyntheticScene scene;
  CameraRig rig;
  std::uint64_t seed = 0;
};
SceneDescription scene_from_json(const nlohmann::json& j);
nlohmann::json scene_to_json(const SceneDescription& description);

struct PosedImageSet;

struct SynthOptions {
  int samples_per_ray = 128;
  std::optional<std::vector<int>> holdout_indices;  // default: every 8th view
  int point_stride = 4;                              // 0 skips the point cloud
  double rotation_noise_deg = 0.0;                   // applied to the stored poses only
  double translation_noise = 0.0;
  std::uint64_t seed = 0;
};

/// Oracle-rendered images with occluders baked in, oracle occluder masks and
/// (optionally perturbed) poses.
PosedImageSet synthesize_dataset(const SyntheticScene& scene, const CameraRig& rig, const SynthOptions& options);

}  // namespace declutter
