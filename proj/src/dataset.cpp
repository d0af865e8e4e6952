#include "declutter/dataset.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fmt/format.h>
#include <fstream>
#include <limits>

namespace declutter {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_png(const fs::path& path, png_uint_32 format, int channels, int& width, int& height) {
  if (!fs::exists(path)) throw ValidationError("missing file: " + path.string());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw ValidationError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  image.format = format;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    throw ValidationError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  width = static_cast<int>(image.width);
  height = static_cast<int>(image.height);
  if (buffer.size() != std::size_t(width) * height * channels) throw ValidationError("unexpected PNG layout: " + path.string());
  return buffer;
}

void write_png(const fs::path& path, const std::uint8_t* data, int width, int height, png_uint_32 format) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr)) {
    throw RuntimeFailure("cannot write PNG " + path.string() + ": " + image.message);
  }
}

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::string indexed_name(std::size_t i) { return fmt::format("{:03}.png", i); }

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing file: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace

void SparsePointCloud::validate(std::size_t views, int width, int height) const {
  if (points.size() != observations.size()) throw ValidationError("point cloud: points/observations size mismatch");
  for (const auto& obs : observations) {
    for (const auto& o : obs) {
      if (o.view < 0 || std::size_t(o.view) >= views) throw ValidationError("point cloud: observation view out of range");
      if (o.pixel.x() < 0 || o.pixel.y() < 0 || o.pixel.x() >= width || o.pixel.y() >= height) {
        throw ValidationError("point cloud: observation pixel out of bounds");
      }
    }
  }
}

bool PosedImageSet::is_holdout(int view) const {
  return std::find(holdout_indices.begin(), holdout_indices.end(), view) != holdout_indices.end();
}

std::vector<int> PosedImageSet::training_views() const {
  std::vector<int> out;
  for (int v = 0; v < static_cast<int>(view_count()); ++v)
    if (!is_holdout(v)) out.push_back(v);
  return out;
}

void PosedImageSet::validate() const {
  const std::size_t v = images.size();
  if (v < 2) throw ValidationError("dataset needs at least 2 views, got " + std::to_string(v));
  if (masks.size() != v || poses.size() != v) throw ValidationError("images, masks and poses must have equal length");
  for (std::size_t i = 0; i < v; ++i) {
    if (images[i].width != width() || images[i].height != height()) {
      throw ValidationError("image " + std::to_string(i) + " resolution differs from image 0");
    }
    if (masks[i].width != width() || masks[i].height != height()) {
      throw ValidationError("mask " + std::to_string(i) + " resolution differs from its image");
    }
  }
  for (int h : holdout_indices) {
    if (h < 0 || std::size_t(h) >= v) throw ValidationError("holdout index " + std::to_string(h) + " out of range");
  }
  for (int t : training_views()) {
    if (masks[t].count_set() == masks[t].pixel_count()) {
      throw ValidationError("training view " + std::to_string(t) + " has no valid pixel");
    }
  }
  if (!(near < far)) throw ValidationError("dataset near must be < far");
  if (points) points->validate(v, width(), height());
}

std::vector<int> default_holdout_indices(std::size_t views) {
  std::vector<int> out;
  for (std::size_t i = 0; i < views; i += 8) out.push_back(static_cast<int>(i));
  return out;
}

Image read_png_rgb(const fs::path& path) {
  int w = 0, h = 0;
  const auto bytes = read_png(path, PNG_FORMAT_RGB, 3, w, h);
  Image img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0f;
  return img;
}

Mask read_png_mask(const fs::path& path) {
  int w = 0, h = 0;
  const auto bytes = read_png(path, PNG_FORMAT_GRAY, 1, w, h);
  Mask m(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] != 0 && bytes[i] != 255) {
      throw ValidationError("non-binary mask value " + std::to_string(bytes[i]) + " in " + path.string());
    }
    m.data[i] = bytes[i] ? 1 : 0;
  }
  return m;
}

void write_png_rgb(const Image& image, const fs::path& path) {
  std::vector<std::uint8_t> bytes(image.data.size());
  std::transform(image.data.begin(), image.data.end(), bytes.begin(), quantize);
  write_png(path, bytes.data(), image.width, image.height, PNG_FORMAT_RGB);
}

void write_png_mask(const Mask& mask, const fs::path& path) {
  std::vector<std::uint8_t> bytes(mask.data.size());
  std::transform(mask.data.begin(), mask.data.end(), bytes.begin(), [](std::uint8_t v) -> std::uint8_t { return v ? 255 : 0; });
  write_png(path, bytes.data(), mask.width, mask.height, PNG_FORMAT_GRAY);
}

void write_png_gray(const std::vector<std::uint8_t>& pixels, int width, int height, const fs::path& path) {
  write_png(path, pixels.data(), width, height, PNG_FORMAT_GRAY);
}

Image downsample_image(const Image& image, int factor) {
  if (factor == 1) return image;
  Image out(image.width / factor, image.height / factor);
  const float norm = 1.0f / float(factor * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float sum = 0.0f;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) sum += image.at(x * factor + dx, y * factor + dy, c);
        out.at(x, y, c) = sum * norm;
      }
  return out;
}

Mask downsample_mask(const Mask& mask, int factor) {
  if (factor == 1) return mask;
  Mask out(mask.width / factor, mask.height / factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      std::uint8_t any = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) any |= mask.at(x * factor + dx, y * factor + dy);
      out.at(x, y) = any ? 1 : 0;
    }
  return out;
}

PosedImageSet load_dataset(const fs::path& dir, int scale) {
  if (scale < 1) throw ValidationError("scale must be >= 1");
  const auto cam = read_json(dir / "cameras.json");
  PosedImageSet set;
  try {
    const auto& k = cam.at("intrinsics");
    set.intrinsics = Intrinsics{k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                                k.at("cy").get<double>()};
    for (const auto& pj : cam.at("poses")) {
      const auto flat = pj.get<std::vector<double>>();
      if (flat.size() != 12) throw ValidationError("cameras.json: pose matrices must have 12 entries");
      Mat34 m;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) m(r, c) = flat[r * 4 + c];
      set.poses.push_back(Pose::from_matrix(m));
    }
    set.near = cam.at("near").get<double>();
    set.far = cam.at("far").get<double>();
    set.holdout_indices = cam.value("holdout_indices", default_holdout_indices(set.poses.size()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("cameras.json in " + dir.string() + ": " + e.what());
  }

  for (std::size_t i = 0; i < set.poses.size(); ++i) {
    const fs::path img_path = dir / "images" / indexed_name(i);
    const fs::path mask_path = dir / "masks" / indexed_name(i);
    Image img = read_png_rgb(img_path);
    Mask mask = read_png_mask(mask_path);
    if (mask.width != img.width || mask.height != img.height) {
      throw ValidationError("dimension mismatch between " + img_path.string() + " and " + mask_path.string());
    }
    if (!set.images.empty() &&
        (img.width != set.images[0].width * scale || img.height != set.images[0].height * scale)) {
      throw ValidationError("dimension mismatch: " + img_path.string() + " differs from view 0");
    }
    if (img.width % scale != 0 || img.height % scale != 0) {
      throw ValidationError("resolution of " + img_path.string() + " not divisible by scale " + std::to_string(scale));
    }
    set.images.push_back(downsample_image(img, scale));
    set.masks.push_back(downsample_mask(mask, scale));
  }
  if (fs::exists(dir / "images" / indexed_name(set.poses.size()))) {
    throw ValidationError("images/" + indexed_name(set.poses.size()) + " has no pose in cameras.json");
  }

  set.intrinsics.fx /= scale;
  set.intrinsics.fy /= scale;
  set.intrinsics.cx /= scale;
  set.intrinsics.cy /= scale;

  if (fs::exists(dir / "points.json")) {
    const auto pj = read_json(dir / "points.json");
    SparsePointCloud cloud;
    try {
      for (const auto& p : pj.at("points")) cloud.points.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
      for (const auto& list : pj.at("observations")) {
        std::vector<PointObservation> obs;
        for (const auto& o : list) {
          obs.push_back({o.at("view").get<int>(), Vec2(o.at("pixel").at(0).get<double>() / scale,
                                                        o.at("pixel").at(1).get<double>() / scale)});
        }
        cloud.observations.push_back(std::move(obs));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("points.json in " + dir.string() + ": " + e.what());
    }
    set.points = std::move(cloud);
  }
  set.validate();
  return set;
}

void save_dataset(const PosedImageSet& set, const fs::path& dir) {
  if (set.view_count() == 0) throw ValidationError("refusing to save an empty dataset");
  set.validate();
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (std::size_t i = 0; i < set.view_count(); ++i) {
    write_png_rgb(set.images[i], dir / "images" / indexed_name(i));
    write_png_mask(set.masks[i], dir / "masks" / indexed_name(i));
  }
  nlohmann::json cam;
  const auto& k = set.intrinsics;
  cam["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
  cam["resolution"] = {set.width(), set.height()};
  cam["poses"] = nlohmann::json::array();
  for (const auto& pose : set.poses) {
    const Mat34 m = pose.matrix();
    std::vector<double> flat;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) flat.push_back(m(r, c));
    cam["poses"].push_back(flat);
  }
  cam["near"] = set.near;
  cam["far"] = set.far;
  cam["holdout_indices"] = set.holdout_indices;
  std::ofstream(dir / "cameras.json") << cam.dump(2) << "\n";

  if (set.points) {
    nlohmann::json pj;
    pj["points"] = nlohmann::json::array();
    pj["observations"] = nlohmann::json::array();
    for (std::size_t i = 0; i < set.points->points.size(); ++i) {
      const Vec3& p = set.points->points[i];
      pj["points"].push_back({p.x(), p.y(), p.z()});
      nlohmann::json obs = nlohmann::json::array();
      for (const auto& o : set.points->observations[i]) obs.push_back({{"view", o.view}, {"pixel", {o.pixel.x(), o.pixel.y()}}});
      pj["observations"].push_back(obs);
    }
    std::ofstream(dir / "points.json") << pj.dump() << "\n";
  }
}

std::optional<Projection> project_point(const Intrinsics& k, const Pose& pose, const Vec3& world) {
  const Vec3 p = pose.to_camera(world);
  if (p.z() <= 0.0) return std::nullopt;
  return Projection{Vec2(k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy), p.z()};
}

Vec3 unproject_pixel(const Intrinsics& k, const Pose& pose, const Vec2& pixel, double depth) {
  const Vec3 p_cam((pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth);
  return pose.to_world(p_cam);
}

PromptPropagation propagate_prompts(const std::vector<Vec2>& prompts, int source_view, const SparsePointCloud& cloud,
                                    const PosedImageSet& set, double pixel_radius) {
  if (cloud.points.empty()) throw ValidationError("propagate_prompts: point cloud is empty");
  if (source_view < 0 || std::size_t(source_view) >= set.view_count()) {
    throw ValidationError("propagate_prompts: source view out of range");
  }
  PromptPropagation out;
  out.per_view.resize(set.view_count());
  for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
    int best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cloud.points.size(); ++i) {
      for (const auto& o : cloud.observations[i]) {
        if (o.view != source_view) continue;
        const double d = (o.pixel - prompts[pi]).norm();
        if (d <= pixel_radius && d < best_dist) {
          best_dist = d;
          best = static_cast<int>(i);
        }
      }
    }
    out.matched_point.push_back(best);
    if (best < 0) {
      out.unmatched_prompts.push_back(static_cast<int>(pi));
      continue;
    }
    for (std::size_t v = 0; v < set.view_count(); ++v) {
      const auto proj = project_point(set.intrinsics, set.poses[v], cloud.points[best]);
      if (!proj) continue;
      const Vec2& px = proj->pixel;
      if (px.x() < 0 || px.y() < 0 || px.x() >= set.width() || px.y() >= set.height()) continue;
      out.per_view[v].push_back(px);
    }
  }
  return out;
}

}  // namespace declutter
