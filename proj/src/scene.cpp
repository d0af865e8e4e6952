#include "declutter/scene.hpp"

#include "declutter/dataset.hpp"
#include "declutter/render.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace declutter {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Slab test along one axis; shrinks [t0, t1].
bool clip_axis(double origin, double dir, double lo, double hi, double& t0, double& t1) {
  if (std::abs(dir) < 1e-300) return origin >= lo && origin <= hi;
  double a = (lo - origin) / dir;
  double b = (hi - origin) / dir;
  if (a > b) std::swap(a, b);
  t0 = std::max(t0, a);
  t1 = std::min(t1, b);
  return t0 <= t1;
}

Shape shape_from_string(const std::string& s) {
  if (s == "sphere") return Shape::kSphere;
  if (s == "box") return Shape::kBox;
  if (s == "plane_slab" || s == "slab") return Shape::kPlaneSlab;
  throw ValidationError("unknown primitive shape '" + s + "'");
}

std::string shape_to_string(Shape s) {
  switch (s) {
    case Shape::kSphere: return "sphere";
    case Shape::kBox: return "box";
    case Shape::kPlaneSlab: return "plane_slab";
  }
  return "box";
}

Rgb rgb_from_json(const nlohmann::json& j) { return Rgb{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }
nlohmann::json rgb_to_json(const Rgb& c) { return nlohmann::json::array({c.r, c.g, c.b}); }
Vec3 vec_from_json(const nlohmann::json& j) { return Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()); }

Mat3 look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = Vec3(0, 1, 0).cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return r;
}

}  // namespace

bool Primitive::contains(const Vec3& p) const {
  const Vec3 d = p - center;
  switch (shape) {
    case Shape::kSphere: return d.squaredNorm() <= extent.x() * extent.x();
    case Shape::kBox: return (d.cwiseAbs().array() <= extent.array()).all();
    case Shape::kPlaneSlab: return std::abs(d[slab_axis]) <= extent[slab_axis];
  }
  return false;
}

std::optional<std::pair<double, double>> Primitive::intersect(const Vec3& o, const Vec3& dir) const {
  switch (shape) {
    case Shape::kSphere: {
      const Vec3 oc = o - center;
      const double b = oc.dot(dir);
      const double c = oc.squaredNorm() - extent.x() * extent.x();
      const double a = dir.squaredNorm();
      const double disc = b * b - a * c;
      if (disc < 0.0) return std::nullopt;
      const double s = std::sqrt(disc);
      return std::make_pair((-b - s) / a, (-b + s) / a);
    }
    case Shape::kBox: {
      double t0 = -kInf, t1 = kInf;
      for (int i = 0; i < 3; ++i) {
        if (!clip_axis(o[i], dir[i], center[i] - extent[i], center[i] + extent[i], t0, t1)) return std::nullopt;
      }
      return std::make_pair(t0, t1);
    }
    case Shape::kPlaneSlab: {
      double t0 = -kInf, t1 = kInf;
      const int a = slab_axis;
      if (!clip_axis(o[a], dir[a], center[a] - extent[a], center[a] + extent[a], t0, t1)) return std::nullopt;
      return std::make_pair(t0, t1);
    }
  }
  return std::nullopt;
}

void SyntheticScene::validate() const {
  if (!(near > 0.0 && near < far)) throw ValidationError("scene requires 0 < near < far");
  bool any_solid = false;
  for (std::size_t i = 0; i < primitives.size(); ++i) {
    const auto& p = primitives[i];
    const std::string where = "primitive " + std::to_string(i);
    if (!(p.density >= 0.0)) throw ValidationError(where + ": density must be >= 0");
    for (int c = 0; c < 3; ++c) {
      if (!(p.albedo[c] >= 0.0 && p.albedo[c] <= 1.0)) throw ValidationError(where + ": albedo outside [0,1]");
      if (!(p.extent[c] > 0.0)) throw ValidationError(where + ": extent components must be > 0");
    }
    if (p.slab_axis < 0 || p.slab_axis > 2) throw ValidationError(where + ": slab_axis must be 0, 1 or 2");
    any_solid = any_solid || !p.is_occluder;
  }
  if (!primitives.empty() && !any_solid) throw ValidationError("scene needs at least one non-occluder primitive");
}

bool SyntheticScene::has_occluders() const {
  return std::any_of(primitives.begin(), primitives.end(), [](const Primitive& p) { return p.is_occluder; });
}

void CameraRig::validate() const {
  if (!(intrinsics.fx > 0.0 && intrinsics.fy > 0.0)) throw ValidationError("focal lengths must be > 0");
  if (width <= 0 || height <= 0) throw ValidationError("resolution must be positive");
  for (std::size_t v = 0; v < poses.size(); ++v) {
    const Mat3& r = poses[v].rotation;
    if (!(r * r.transpose()).isApprox(Mat3::Identity(), 1e-6) || std::abs(r.determinant() - 1.0) > 1e-6) {
      throw ValidationError("pose " + std::to_string(v) + " rotation is not orthonormal with det +1");
    }
  }
}

Vec3 CameraRig::ray_direction(std::size_t view, double px, double py) const {
  const Vec3 d_cam((px - intrinsics.cx) / intrinsics.fx, (py - intrinsics.cy) / intrinsics.fy, 1.0);
  return (poses.at(view).rotation * d_cam).normalized();
}

DensityColor scene_density_color(const SyntheticScene& scene, const Vec3& point, bool include_occluders) {
  for (const auto& p : scene.primitives) {
    if (p.is_occluder && !include_occluders) continue;
    if (p.contains(point)) return {p.density, p.albedo};
  }
  return {0.0, scene.background_color};
}

Image render_oracle(const SyntheticScene& scene, const CameraRig& rig, std::size_t view_index,
                    const OracleRenderOptions& options) {
  if (view_index >= rig.view_count()) {
    throw ValidationError("render_oracle: view_index " + std::to_string(view_index) + " out of range");
  }
  if (options.samples_per_ray < 2) throw ValidationError("render_oracle: samples_per_ray must be >= 2");
  const int n = options.samples_per_ray;
  std::mt19937_64 rng(options.seed * 0x9E3779B97F4A7C15ull + view_index);
  Image img(rig.width, rig.height);
  const Vec3 origin = rig.poses[view_index].center;
  std::vector<double> depths(n), sigma(n), color(std::size_t(n) * 3);
  for (int y = 0; y < rig.height; ++y) {
    for (int x = 0; x < rig.width; ++x) {
      const Vec3 dir = rig.ray_direction(view_index, x + 0.5, y + 0.5);
      sample_depths(scene.near, scene.far, n, options.stratified, &rng, depths);
      for (int k = 0; k < n; ++k) {
        const auto dc = scene_density_color(scene, origin + depths[k] * dir, options.include_occluders);
        sigma[k] = dc.density;
        for (int c = 0; c < 3; ++c) color[std::size_t(k) * 3 + c] = dc.color[c];
      }
      const auto out = volume_render<double>(sigma, color, depths, 1, n, scene.far, scene.background_color);
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<float>(out.rgb[c]);
    }
  }
  return img;
}

std::optional<SurfaceHit> first_hit(const SyntheticScene& scene, const Vec3& origin, const Vec3& dir,
                                    double min_t, double max_t, bool include_occluders) {
  std::optional<SurfaceHit> best;
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
    const auto& p = scene.primitives[i];
    if (p.is_occluder && !include_occluders) continue;
    if (p.density <= 0.0) continue;
    const auto span = p.intersect(origin, dir);
    if (!span) continue;
    // Entering at min_t when the segment starts inside the volume.
    const double t = std::max(span->first, min_t);
    if (t > span->second || t > max_t) continue;
    if (!best || t < best->distance) best = SurfaceHit{t, i};
  }
  return best;
}

Mask occluder_mask(const SyntheticScene& scene, const CameraRig& rig, std::size_t view_index) {
  if (view_index >= rig.view_count()) throw ValidationError("occluder_mask: view_index out of range");
  Mask mask(rig.width, rig.height);
  const Vec3 origin = rig.poses[view_index].center;
  for (int y = 0; y < rig.height; ++y) {
    for (int x = 0; x < rig.width; ++x) {
      const Vec3 dir = rig.ray_direction(view_index, x + 0.5, y + 0.5);
      const auto hit = first_hit(scene, origin, dir, scene.near, scene.far);
      mask.at(x, y) = (hit && scene.primitives[hit->primitive].is_occluder) ? 1 : 0;
    }
  }
  return mask;
}

bool point_visible_in_view(const SyntheticScene& scene, const CameraRig& rig, std::size_t view, const Vec3& point) {
  const Pose& pose = rig.poses[view];
  const Vec3 p_cam = pose.to_camera(point);
  if (p_cam.z() <= 0.0) return false;
  const double u = rig.intrinsics.fx * p_cam.x() / p_cam.z() + rig.intrinsics.cx;
  const double v = rig.intrinsics.fy * p_cam.y() / p_cam.z() + rig.intrinsics.cy;
  if (u < 0.0 || v < 0.0 || u >= rig.width || v >= rig.height) return false;
  const Vec3 to_point = point - pose.center;
  const double dist = to_point.norm();
  if (dist < scene.near || dist > scene.far) return false;
  const Vec3 dir = to_point / dist;
  const auto hit = first_hit(scene, pose.center, dir, scene.near, scene.far);
  return hit && std::abs(hit->distance - dist) <= kVisibilityTolerance;
}

std::vector<int> pixel_visibility(const SyntheticScene& scene, const CameraRig& rig, std::size_t reference_view) {
  if (rig.view_count() < 2) throw ValidationError("pixel_visibility requires at least 2 views");
  if (reference_view >= rig.view_count()) throw ValidationError("pixel_visibility: reference view out of range");
  const int views = static_cast<int>(rig.view_count());
  std::vector<int> out(std::size_t(rig.width) * rig.height, views);
  const Vec3 origin = rig.poses[reference_view].center;
  for (int y = 0; y < rig.height; ++y) {
    for (int x = 0; x < rig.width; ++x) {
      const Vec3 dir = rig.ray_direction(reference_view, x + 0.5, y + 0.5);
      const auto surface = first_hit(scene, origin, dir, scene.near, scene.far, /*include_occluders=*/false);
      if (!surface) continue;  // background
      const Vec3 point = origin + surface->distance * dir;
      int count = 0;
      for (int v = 0; v < views; ++v) count += point_visible_in_view(scene, rig, v, point) ? 1 : 0;
      out[std::size_t(y) * rig.width + x] = count;
    }
  }
  return out;
}

CameraRig perturb_poses(const CameraRig& rig, double rotation_noise_deg, double translation_noise, std::uint64_t seed) {
  if (rotation_noise_deg < 0.0 || translation_noise < 0.0) throw ValidationError("perturbation magnitudes must be >= 0");
  CameraRig out = rig;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_unit = [&] {
    Vec3 v;
    do {
      v = Vec3(normal(rng), normal(rng), normal(rng));
    } while (v.norm() < 1e-12);
    return Vec3(v.normalized());
  };
  const double angle = rotation_noise_deg * std::numbers::pi / 180.0;
  for (auto& pose : out.poses) {
    const Vec3 axis = random_unit();
    const Vec3 shift = random_unit();
    if (angle > 0.0) pose.rotation = Eigen::AngleAxisd(angle, axis).toRotationMatrix() * pose.rotation;
    if (translation_noise > 0.0) pose.center += translation_noise * shift;
  }
  return out;
}

SparsePointCloud sample_point_cloud(const SyntheticScene& scene, const CameraRig& rig, int pixel_stride) {
  if (pixel_stride < 1) throw ValidationError("pixel_stride must be >= 1");
  SparsePointCloud cloud;
  for (std::size_t v = 0; v < rig.view_count(); ++v) {
    const Vec3 origin = rig.poses[v].center;
    for (int y = pixel_stride / 2; y < rig.height; y += pixel_stride) {
      for (int x = pixel_stride / 2; x < rig.width; x += pixel_stride) {
        const Vec3 dir = rig.ray_direction(v, x + 0.5, y + 0.5);
        const auto hit = first_hit(scene, origin, dir, scene.near, scene.far);
        if (!hit) continue;
        const Vec3 point = origin + hit->distance * dir;
        std::vector<PointObservation> obs;
        for (std::size_t w = 0; w < rig.view_count(); ++w) {
          if (!point_visible_in_view(scene, rig, w, point)) continue;
          const auto proj = project_point(rig.intrinsics, rig.poses[w], point);
          obs.push_back({static_cast<int>(w), proj->pixel});
        }
        if (obs.empty()) continue;
        cloud.points.push_back(point);
        cloud.observations.push_back(std::move(obs));
      }
    }
  }
  return cloud;
}

std::pair<SyntheticScene, CameraRig> make_declutter_scene(const DeclutterSceneOptions& options) {
  SyntheticScene scene;
  scene.near = 0.5;
  scene.far = 9.0;
  scene.background_color = Rgb{0.0, 0.0, 0.0};

  // Occluder first so it wins any overlap.
  Primitive occ;
  occ.shape = Shape::kSphere;
  occ.center = Vec3(0.05, 0.1, 1.8);
  occ.extent = Vec3::Constant(options.occluder_radius);
  occ.density = 40.0;
  occ.albedo = Rgb{0.95, 0.85, 0.1};
  occ.is_occluder = true;
  scene.primitives.push_back(occ);

  const Rgb mid_colors[3] = {{0.85, 0.15, 0.1}, {0.1, 0.6, 0.2}, {0.15, 0.25, 0.85}};
  const Vec3 mid_centers[3] = {{-0.9, 0.2, 3.6}, {0.7, -0.3, 4.0}, {0.1, 0.9, 3.2}};
  const Vec3 mid_extents[3] = {{0.45, 0.55, 0.3}, {0.5, 0.4, 0.3}, {0.35, 0.3, 0.25}};
  for (int i = 0; i < 3; ++i) {
    Primitive box;
    box.shape = Shape::kBox;
    box.center = mid_centers[i];
    box.extent = mid_extents[i];
    box.density = 30.0;
    box.albedo = mid_colors[i];
    scene.primitives.push_back(box);
  }

  // Tiled wall: 6 x 6 tiles of 1.5 units at z = 6.
  const int tiles = 6;
  const double tile = 1.5;
  for (int ty = 0; ty < tiles; ++ty) {
    for (int tx = 0; tx < tiles; ++tx) {
      Primitive wall;
      wall.shape = Shape::kBox;
      wall.center = Vec3((tx - (tiles - 1) / 2.0) * tile, (ty - (tiles - 1) / 2.0) * tile, 6.3);
      wall.extent = Vec3(tile / 2.0, tile / 2.0, 0.3);
      wall.density = 30.0;
      const int h = (tx * 7 + ty * 13) % 9;
      wall.albedo = Rgb{0.25 + 0.08 * (h % 3) + 0.3 * ((tx + ty) % 2), 0.3 + 0.07 * (h / 3), 0.35 + 0.05 * h};
      for (int c = 0; c < 3; ++c) wall.albedo[c] = std::min(1.0, wall.albedo[c]);
      scene.primitives.push_back(wall);
    }
  }
  // Backstop behind the tiles for rays leaving the tiled area.
  Primitive back;
  back.shape = Shape::kPlaneSlab;
  back.center = Vec3(0, 0, 7.0);
  back.extent = Vec3(1, 1, 0.4);
  back.slab_axis = 2;
  back.density = 30.0;
  back.albedo = Rgb{0.4, 0.4, 0.45};
  scene.primitives.push_back(back);

  CameraRig rig;
  rig.width = options.width;
  rig.height = options.height;
  rig.intrinsics = Intrinsics{0.9 * options.width, 0.9 * options.width, options.width / 2.0, options.height / 2.0};
  const Vec3 target(0.0, 0.0, options.target_depth);
  for (int v = 0; v < options.views; ++v) {
    const double s = options.views > 1 ? double(v) / (options.views - 1) : 0.5;
    const Vec3 eye(-0.5 * options.baseline + options.baseline * s, 0.25 * std::sin(2.0 * std::numbers::pi * s),
                   0.1 * std::cos(std::numbers::pi * s));
    rig.poses.push_back(Pose{look_at(eye, target), eye});
  }
  return {scene, rig};
}

SceneDescription scene_from_json(const nlohmann::json& j) {
  SceneDescription d;
  try {
    for (const auto& pj : j.at("primitives")) {
      Primitive p;
      p.shape = shape_from_string(pj.at("shape").get<std::string>());
      p.center = vec_from_json(pj.at("center"));
      if (pj.contains("radius")) {
        p.extent = Vec3::Constant(pj.at("radius").get<double>());
      } else {
        p.extent = vec_from_json(pj.at("extent"));
      }
      p.slab_axis = pj.value("slab_axis", 2);
      p.density = pj.at("density").get<double>();
      p.albedo = rgb_from_json(pj.at("albedo"));
      p.is_occluder = pj.value("is_occluder", false);
      d.scene.primitives.push_back(p);
    }
    d.scene.background_color = rgb_from_json(j.at("background_color"));
    d.scene.near = j.at("near").get<double>();
    d.scene.far = j.at("far").get<double>();
    const auto& k = j.at("intrinsics");
    d.rig.intrinsics = Intrinsics{k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                                  k.at("cy").get<double>()};
    d.rig.width = j.at("resolution").at(0).get<int>();
    d.rig.height = j.at("resolution").at(1).get<int>();
    for (const auto& cj : j.at("cameras")) {
      const auto flat = cj.get<std::vector<double>>();
      if (flat.size() != 12) throw ValidationError("camera matrices must have 12 entries (3x4 row-major)");
      Mat34 m;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) m(r, c) = flat[r * 4 + c];
      d.rig.poses.push_back(Pose::from_matrix(m));
    }
    d.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("scene description: ") + e.what());
  }
  d.scene.validate();
  d.rig.validate();
  return d;
}

nlohmann::json scene_to_json(const SceneDescription& d) {
  nlohmann::json j;
  j["primitives"] = nlohmann::json::array();
  for (const auto& p : d.scene.primitives) {
    nlohmann::json pj{{"shape", shape_to_string(p.shape)},
                      {"center", {p.center.x(), p.center.y(), p.center.z()}},
                      {"extent", {p.extent.x(), p.extent.y(), p.extent.z()}},
                      {"density", p.density},
                      {"albedo", rgb_to_json(p.albedo)},
                      {"is_occluder", p.is_occluder}};
    if (p.shape == Shape::kPlaneSlab) pj["slab_axis"] = p.slab_axis;
    j["primitives"].push_back(pj);
  }
  j["background_color"] = rgb_to_json(d.scene.background_color);
  j["near"] = d.scene.near;
  j["far"] = d.scene.far;
  const auto& k = d.rig.intrinsics;
  j["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
  j["resolution"] = {d.rig.width, d.rig.height};
  j["cameras"] = nlohmann::json::array();
  for (const auto& pose : d.rig.poses) {
    const Mat34 m = pose.matrix();
    std::vector<double> flat;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) flat.push_back(m(r, c));
    j["cameras"].push_back(flat);
  }
  j["seed"] = d.seed;
  return j;
}

}  // namespace declutter
