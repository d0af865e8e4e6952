#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace declutter {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

// Bad input: inconsistent configuration, malformed files, violated preconditions.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure while running an otherwise valid pipeline (I/O, non-finite loss, ...).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;

  double& operator[](int c) { return c == 0 ? r : (c == 1 ? g : b); }
  double operator[](int c) const { return c == 0 ? r : (c == 1 ? g : b); }
  bool operator==(const Rgb&) const = default;
};

/// Row-major H x W RGB image with float channels in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // (y * width + x) * 3 + c

  Image() = default;
  Image(int w, int h, float fill = 0.0f) : width(w), height(h), data(std::size_t(w) * h * 3, fill) {}

  float& at(int x, int y, int c) { return data[(std::size_t(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const { return data[(std::size_t(y) * width + x) * 3 + c]; }
  std::size_t pixel_count() const { return std::size_t(width) * height; }
  bool operator==(const Image&) const = default;
};

/// Binary H x W mask; 1 marks occluded / invalid pixels.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int w, int h, std::uint8_t fill = 0) : width(w), height(h), data(std::size_t(w) * h, fill) {}

  std::uint8_t& at(int x, int y) { return data[std::size_t(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return data[std::size_t(y) * width + x]; }
  std::size_t pixel_count() const { return std::size_t(width) * height; }
  std::size_t count_set() const;
  bool operator==(const Mask&) const = default;
};

struct Intrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  bool operator==(const Intrinsics&) const = default;
};

/// World-from-camera rigid transform. Camera axes: x right, y down, z forward.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();

  Vec3 to_world(const Vec3& p_cam) const { return rotation * p_cam + center; }
  Vec3 to_camera(const Vec3& p_world) const { return rotation.transpose() * (p_world - center); }

  Mat34 matrix() const;
  static Pose from_matrix(const Mat34& m);
};

/// Integer pixel reference into a view; rays pass through the pixel center.
struct PixelRef {
  int view = 0;
  int x = 0;
  int y = 0;
  bool operator==(const PixelRef&) const = default;
};

/// Geodesic angle (radians) between two rotations.
double rotation_angle_between(const Mat3& a, const Mat3& b);

}  // namespace declutter
