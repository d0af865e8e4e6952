#include "declutter/camera.hpp"

#include <cmath>
#include <string>

namespace declutter {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

Mat3 exp_so3(const Vec3& v) {
  const double theta2 = v.squaredNorm();
  const Mat3 k = skew(v);
  if (theta2 < 1e-16) return Mat3::Identity() + k + 0.5 * k * k;
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() + (std::sin(theta) / theta) * k + ((1.0 - std::cos(theta)) / theta2) * k * k;
}

Mat3 left_jacobian_so3(const Vec3& v) {
  const double theta2 = v.squaredNorm();
  const Mat3 k = skew(v);
  double a, b;
  if (theta2 < 1e-8) {
    a = 0.5 - theta2 / 24.0;
    b = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = (1.0 - std::cos(theta)) / theta2;
    b = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() + a * k + b * k * k;
}

CameraState CameraState::from_initial(const Intrinsics& k, const std::vector<Pose>& poses, long trainable_from,
                                      bool tie_focal) {
  if (!(k.fx > 0.0 && k.fy > 0.0)) throw ValidationError("initial focal lengths must be > 0");
  CameraState s;
  s.log_fx = std::log(k.fx);
  s.log_fy = std::log(k.fy);
  s.cx = k.cx;
  s.cy = k.cy;
  s.base_poses = poses;
  s.rotations.assign(poses.size(), Vec3::Zero());
  s.translations.assign(poses.size(), Vec3::Zero());
  s.trainable_from = trainable_from;
  s.tie_focal = tie_focal;
  return s;
}

double CameraState::fx() const { return std::exp(log_fx); }
double CameraState::fy() const { return std::exp(tie_focal ? log_fx : log_fy); }

template <typename T>
void CameraState::read_parameters(std::span<const T> flat) {
  if (flat.size() != parameter_count()) throw ValidationError("camera parameter block has the wrong size");
  log_fx = double(flat[0]);
  log_fy = double(flat[1]);
  for (std::size_t v = 0; v < view_count(); ++v) {
    for (int i = 0; i < 3; ++i) {
      rotations[v][i] = double(flat[2 + 6 * v + i]);
      translations[v][i] = double(flat[2 + 6 * v + 3 + i]);
    }
  }
}

template <typename T>
void CameraState::write_parameters(std::span<T> flat) const {
  if (flat.size() != parameter_count()) throw ValidationError("camera parameter block has the wrong size");
  flat[0] = T(log_fx);
  flat[1] = T(log_fy);
  for (std::size_t v = 0; v < view_count(); ++v) {
    for (int i = 0; i < 3; ++i) {
      flat[2 + 6 * v + i] = T(rotations[v][i]);
      flat[2 + 6 * v + 3 + i] = T(translations[v][i]);
    }
  }
}

template void CameraState::read_parameters<float>(std::span<const float>);
template void CameraState::read_parameters<double>(std::span<const double>);
template void CameraState::write_parameters<float>(std::span<float>) const;
template void CameraState::write_parameters<double>(std::span<double>) const;

Pose effective_pose(const CameraState& state, std::size_t view_index) {
  if (view_index >= state.view_count()) throw ValidationError("effective_pose: view index out of range");
  const Pose& base = state.base_poses[view_index];
  const Vec3& r = state.rotations[view_index];
  const Vec3& t = state.translations[view_index];
  if (r.isZero(0.0) && t.isZero(0.0)) return base;
  return Pose{exp_so3(r) * base.rotation, base.center + t};
}

bool camera_gate(long t, const CameraState& state) { return t >= state.trainable_from; }

namespace {

Vec3 camera_direction(const CameraState& s, const Vec2& px) {
  return Vec3((px.x() - s.cx) / s.fx(), (px.y() - s.cy) / s.fy(), 1.0);
}

}  // namespace

RayBatch generate_rays(const CameraState& state, std::span<const PixelRef> pixels, const std::vector<Image>& images,
                       const std::vector<Mask>& masks) {
  RayBatch batch;
  batch.origins.reserve(pixels.size());
  batch.directions.reserve(pixels.size());
  std::vector<Pose> poses;
  poses.reserve(state.view_count());
  for (std::size_t v = 0; v < state.view_count(); ++v) poses.push_back(effective_pose(state, v));
  for (const auto& p : pixels) {
    if (p.view < 0 || std::size_t(p.view) >= state.view_count()) throw ValidationError("generate_rays: view out of range");
    const Image& img = images.at(p.view);
    if (p.x < 0 || p.y < 0 || p.x >= img.width || p.y >= img.height) throw ValidationError("generate_rays: pixel out of bounds");
    if (!masks.empty() && masks.at(p.view).at(p.x, p.y) != 0) {
      throw ValidationError("generate_rays: pixel (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") of view " +
                            std::to_string(p.view) + " is masked");
    }
    const Vec2 center(p.x + 0.5, p.y + 0.5);
    const Pose& pose = poses[p.view];
    batch.origins.push_back(pose.center);
    batch.directions.push_back((pose.rotation * camera_direction(state, center)).normalized());
    batch.view_index.push_back(p.view);
    batch.pixel_xy.push_back(center);
    batch.gt_rgb.push_back(Rgb{img.at(p.x, p.y, 0), img.at(p.x, p.y, 1), img.at(p.x, p.y, 2)});
  }
  return batch;
}

std::vector<double> camera_backward(const CameraState& state, const RayBatch& batch, std::span<const Vec3> d_origins,
                                    std::span<const Vec3> d_directions) {
  std::vector<double> grad(state.parameter_count(), 0.0);
  std::vector<Mat3> rot(state.view_count()), jac(state.view_count());
  for (std::size_t v = 0; v < state.view_count(); ++v) {
    rot[v] = exp_so3(state.rotations[v]);
    jac[v] = left_jacobian_so3(state.rotations[v]);
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int v = batch.view_index[i];
    const Vec3 d_cam = camera_direction(state, batch.pixel_xy[i]);
    const Vec3 w = state.base_poses[v].rotation * d_cam;
    const Vec3 u = rot[v] * w;
    const double norm = u.norm();
    const Vec3 dir = u / norm;
    const Vec3& g = d_directions[i];
    const Vec3 g_u = (g - dir * dir.dot(g)) / norm;

    const Vec3 g_r = jac[v].transpose() * u.cross(g_u);
    const Vec3 g_dcam = (rot[v] * state.base_poses[v].rotation).transpose() * g_u;
    const double g_log_fx = -g_dcam.x() * d_cam.x();
    const double g_log_fy = -g_dcam.y() * d_cam.y();
    grad[0] += g_log_fx;
    if (state.tie_focal) {
      grad[0] += g_log_fy;
    } else {
      grad[1] += g_log_fy;
    }
    for (int k = 0; k < 3; ++k) {
      grad[2 + 6 * v + k] += g_r[k];
      grad[2 + 6 * v + 3 + k] += d_origins[i][k];
    }
  }
  return grad;
}

}  // namespace declutter
