#pragma once

#include "declutter/common.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace declutter {

struct PointObservation {
  int view = 0;
  Vec2 pixel = Vec2::Zero();
};

struct SparsePointCloud {
  std::vector<Vec3> points;
  std::vector<std::vector<PointObservation>> observations;  // per point

  void validate(std::size_t views, int width, int height) const;
};

struct PosedImageSet {
  std::vector<Image> images;
  std::vector<Mask> masks;
  Intrinsics intrinsics;
  std::vector<Pose> poses;
  double near = 0.5;
  double far = 6.0;
  std::vector<int> holdout_indices;
  std::optional<SparsePointCloud> points;

  std::size_t view_count() const { return images.size(); }
  int width() const { return images.empty() ? 0 : images.front().width; }
  int height() const { return images.empty() ? 0 : images.front().height; }
  bool is_holdout(int view) const;
  std::vector<int> training_views() const;
  void validate() const;
};

/// Every 8th view, starting at index 0.
std::vector<int> default_holdout_indices(std::size_t views);

/// Reads images/{i:03}.png, masks/{i:03}.png, cameras.json and optional points.json.
/// `scale` > 1 box-averages images and max-pools masks by that integer factor.
PosedImageSet load_dataset(const std::filesystem::path& directory, int scale = 1);
void save_dataset(const PosedImageSet& set, const std::filesystem::path& directory);

// 8-bit PNG helpers.
Image read_png_rgb(const std::filesystem::path& path);
Mask read_png_mask(const std::filesystem::path& path);
void write_png_rgb(const Image& image, const std::filesystem::path& path);
void write_png_mask(const Mask& mask, const std::filesystem::path& path);
void write_png_gray(const std::vector<std::uint8_t>& pixels, int width, int height,
                    const std::filesystem::path& path);

Image downsample_image(const Image& image, int factor);
Mask downsample_mask(const Mask& mask, int factor);

/// Pinhole projection; nullopt when the point is behind the camera.
struct Projection {
  Vec2 pixel;
  double depth;
};
std::optional<Projection> project_point(const Intrinsics& k, const Pose& pose, const Vec3& world);
Vec3 unproject_pixel(const Intrinsics& k, const Pose& pose, const Vec2& pixel, double depth);

struct PromptPropagation {
  std::vector<std::vector<Vec2>> per_view;  // projected prompt locations per view
  std::vector<int> matched_point;           // per prompt, index into the cloud or -1
  std::vector<int> unmatched_prompts;       // indices of prompts without a point in range
};

inline constexpr double kDefaultPromptRadius = 8.0;

PromptPropagation propagate_prompts(const std::vector<Vec2>& prompts, int source_view,
                                    const SparsePointCloud& cloud, const PosedImageSet& set,
                                    double pixel_radius = kDefaultPromptRadius);

}  // namespace declutter
