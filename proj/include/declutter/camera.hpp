#pragma once

#include "declutter/common.hpp"

#include <span>
#include <vector>

namespace declutter {

Mat3 skew(const Vec3& v);

/// Rodrigues' formula; second-order series below a tiny angle.
Mat3 exp_so3(const Vec3& axis_angle);

/// Left Jacobian of SO(3): d/dv (exp(v) w) = -[exp(v) w]_x * left_jacobian_so3(v).
Mat3 left_jacobian_so3(const Vec3& axis_angle);

/// Learnable camera parameters. Focal lengths are stored as logs so they stay
/// positive; per-view rotations (axis-angle) and translations are corrections
/// applied on top of fixed base poses.
struct CameraState {
  double log_fx = 0.0;
  double log_fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  std::vector<Vec3> rotations;
  std::vector<Vec3> translations;
  std::vector<Pose> base_poses;
  long trainable_from = 0;  // t_c
  bool tie_focal = false;   // fy follows fx

  static CameraState from_initial(const Intrinsics& k, const std::vector<Pose>& poses, long trainable_from,
                                  bool tie_focal = false);

  double fx() const;
  double fy() const;
  Intrinsics intrinsics() const { return {fx(), fy(), cx, cy}; }
  std::size_t view_count() const { return base_poses.size(); }

  /// Flat layout: [log_fx, log_fy, r_0, t_0, r_1, t_1, ...].
  std::size_t parameter_count() const { return 2 + 6 * view_count(); }
  template <typename T>
  void read_parameters(std::span<const T> flat);
  template <typename T>
  void write_parameters(std::span<T> flat) const;
};

/// exp(r_v) * R_base with the camera center shifted by t_v.
Pose effective_pose(const CameraState& state, std::size_t view_index);

/// Delayed optimization gate: camera parameters learn only once t >= t_c.
bool camera_gate(long t, const CameraState& state);

struct RayBatch {
  std::vector<Vec3> origins;
  std::vector<Vec3> directions;
  std::vector<int> view_index;
  std::vector<Vec2> pixel_xy;  // pixel centers
  std::vector<Rgb> gt_rgb;

  std::size_t size() const { return origins.size(); }
};

/// Pinhole rays through pixel centers. Masked pixels are rejected.
RayBatch generate_rays(const CameraState& state, std::span<const PixelRef> pixels, const std::vector<Image>& images,
                       const std::vector<Mask>& masks);

/// Gradient of the loss w.r.t. the flat camera parameters given gradients
/// w.r.t. each ray's origin and unit direction.
std::vector<double> camera_backward(const CameraState& state, const RayBatch& batch, std::span<const Vec3> d_origins,
                                    std::span<const Vec3> d_directions);

}  // namespace declutter
