#pragma once

#include "declutter/common.hpp"
#include "declutter/dataset.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace declutter {

/// Draws B valid (mask = 0) pixels spread evenly over the training views:
/// floor(B / V) per view, remainder round-robin from the first view.
/// Without replacement inside a view unless it has fewer valid pixels than its quota.
std::vector<PixelRef> sample_batch(const PosedImageSet& set, std::size_t batch_size, std::uint64_t seed);

/// Same as above over an explicit list of views.
std::vector<PixelRef> sample_batch(const std::vector<Mask>& masks, std::span<const int> views, std::size_t batch_size,
                                   std::uint64_t seed);

struct VisibilityHistogram {
  std::map<int, std::size_t> counts;  // visibility x in [1, x_max] -> pixel count
  int x_max = 0;
  double fitted_alpha = 0.0;

  std::size_t total() const;
  static VisibilityHistogram from_values(std::span<const int> visibility, int x_max);
};

/// Least-squares slope of log P(x) against -log(x_max - x + 1) over nonzero bins.
double fit_longtail(const VisibilityHistogram& hist);

/// Normalized P(x) proportional to (x_max - x + 1)^-alpha for x in [1, x_max].
std::map<int, double> longtail_model(int x_max, double alpha);

/// Mean visibility of a patch.
double patch_visibility(std::span<const double> values);

struct PatchDistribution {
  double mean = 0.0;
  double variance = 0.0;
  double min = 0.0;
  double max = 0.0;
  double pixel_variance = 0.0;
  double variance_ratio = 0.0;  // Var(patch) / Var(pixel)
  std::size_t patches = 0;
  std::size_t bound_violations = 0;  // patches outside [min, max] of their members
  std::map<long, std::size_t> q_histogram;  // sum of member visibilities -> count (y = key / K^2)
};

/// Over `trials` seeded groupings into M patches of K^2 pixels each, summarizes the
/// patch visibilities. Without replacement inside a trial unless `with_replacement`.
PatchDistribution patch_distribution(std::span<const double> pixel_visibility, int patch_side, int patches,
                                     int trials, std::uint64_t seed, bool with_replacement = false);

/// Per-pixel count of views whose mask is 0 at the same pixel coordinate.
/// A fixed-coordinate approximation of visibility for datasets without geometry.
std::vector<int> approximate_visibility(const std::vector<Mask>& masks);

}  // namespace declutter
