#pragma once

#include "declutter/common.hpp"
#include "declutter/dataset.hpp"
#include "declutter/scene.hpp"

#include <cmath>
#include <filesystem>
#include <string>

namespace declutter::test {

// Camera at the origin looking down +z.
inline CameraRig single_camera_rig(int width = 9, int height = 9, double focal = 9.0) {
  CameraRig rig;
  rig.width = width;
  rig.height = height;
  rig.intrinsics = {focal, focal, width / 2.0, height / 2.0};
  rig.poses.push_back(Pose{});
  return rig;
}

// Infinite slab of the given thickness whose near face sits at z = front.
inline Primitive slab(double front, double thickness, double density, Rgb albedo = {1, 1, 1}) {
  Primitive p;
  p.shape = Shape::kPlaneSlab;
  p.slab_axis = 2;
  p.center = Vec3(0, 0, front + thickness / 2);
  p.extent = Vec3(0, 0, thickness / 2);
  p.density = density;
  p.albedo = albedo;
  return p;
}

inline Primitive sphere(const Vec3& center, double radius, bool occluder, Rgb albedo = {0.2, 0.8, 0.2},
                        double density = 50.0) {
  Primitive p;
  p.shape = Shape::kSphere;
  p.center = center;
  p.extent = Vec3::Constant(radius);
  p.density = density;
  p.albedo = albedo;
  p.is_occluder = occluder;
  return p;
}

inline Primitive box(const Vec3& center, const Vec3& half, Rgb albedo, double density = 50.0) {
  Primitive p;
  p.shape = Shape::kBox;
  p.center = center;
  p.extent = half;
  p.density = density;
  p.albedo = albedo;
  return p;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("declutter_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace declutter::test
