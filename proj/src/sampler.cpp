#include "declutter/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace declutter {

namespace {

// Uniform integer in [0, n) independent of the standard library's distribution code.
std::size_t draw_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

}  // namespace

std::vector<PixelRef> sample_batch(const std::vector<Mask>& masks, std::span<const int> views, std::size_t batch_size,
                                   std::uint64_t seed) {
  const std::size_t v_count = views.size();
  if (v_count == 0) throw ValidationError("sample_batch: no training views");
  if (batch_size < v_count) throw ValidationError("sample_batch: batch size smaller than the number of views");
  const std::size_t per_view = batch_size / v_count;
  const std::size_t remainder = batch_size - per_view * v_count;
  std::mt19937_64 rng(seed);
  std::vector<PixelRef> out;
  out.reserve(batch_size);
  std::vector<std::uint32_t> valid;
  for (std::size_t vi = 0; vi < v_count; ++vi) {
    const int view = views[vi];
    const Mask& mask = masks.at(view);
    valid.clear();
    for (std::size_t i = 0; i < mask.data.size(); ++i)
      if (mask.data[i] == 0) valid.push_back(static_cast<std::uint32_t>(i));
    if (valid.empty()) throw ValidationError("sample_batch: view " + std::to_string(view) + " has no valid pixels");
    const std::size_t quota = per_view + (vi < remainder ? 1 : 0);
    if (quota <= valid.size()) {
      // Partial Fisher-Yates.
      for (std::size_t i = 0; i < quota; ++i) {
        const std::size_t j = i + draw_index(rng, valid.size() - i);
        std::swap(valid[i], valid[j]);
        out.push_back({view, static_cast<int>(valid[i] % mask.width), static_cast<int>(valid[i] / mask.width)});
      }
    } else {
      for (std::size_t i = 0; i < quota; ++i) {
        const std::uint32_t p = valid[draw_index(rng, valid.size())];
        out.push_back({view, static_cast<int>(p % mask.width), static_cast<int>(p / mask.width)});
      }
    }
  }
  return out;
}

std::vector<PixelRef> sample_batch(const PosedImageSet& set, std::size_t batch_size, std::uint64_t seed) {
  const auto views = set.training_views();
  return sample_batch(set.masks, views, batch_size, seed);
}

std::size_t VisibilityHistogram::total() const {
  std::size_t t = 0;
  for (const auto& [x, c] : counts) t += c;
  return t;
}

VisibilityHistogram VisibilityHistogram::from_values(std::span<const int> visibility, int x_max) {
  VisibilityHistogram h;
  h.x_max = x_max;
  for (int v : visibility)
    if (v >= 1 && v <= x_max) ++h.counts[v];
  return h;
}

double fit_longtail(const VisibilityHistogram& hist) {
  const double total = static_cast<double>(hist.total());
  std::vector<double> xs, ys;
  for (const auto& [x, c] : hist.counts) {
    if (c == 0) continue;
    if (x < 1 || x > hist.x_max) throw ValidationError("fit_longtail: visibility value outside [1, x_max]");
    xs.push_back(-std::log(double(hist.x_max - x + 1)));
    ys.push_back(std::log(double(c) / total));
  }
  if (xs.size() < 3) {
    throw ValidationError("fit_longtail: degenerate histogram (" + std::to_string(xs.size()) +
                          " distinct visibility values, need >= 3)");
  }
  const double n = double(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return sxy / sxx;
}

std::map<int, double> longtail_model(int x_max, double alpha) {
  std::map<int, double> p;
  double z = 0.0;
  for (int x = 1; x <= x_max; ++x) z += std::pow(double(x_max - x + 1), -alpha);
  for (int x = 1; x <= x_max; ++x) p[x] = std::pow(double(x_max - x + 1), -alpha) / z;
  return p;
}

double patch_visibility(std::span<const double> values) {
  if (values.empty()) throw ValidationError("patch_visibility: empty patch");
  return std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
}

PatchDistribution patch_distribution(std::span<const double> pixels, int patch_side, int patches, int trials,
                                     std::uint64_t seed, bool with_replacement) {
  const std::size_t per_patch = std::size_t(patch_side) * patch_side;
  if (patch_side < 1 || patches < 1 || trials < 1) throw ValidationError("patch_distribution: bad K, M or trials");
  if (pixels.size() < per_patch) throw ValidationError("patch_distribution: fewer pixels than K^2");
  if (!with_replacement && std::size_t(patches) * per_patch > pixels.size()) {
    throw ValidationError("patch_distribution: M * K^2 exceeds the pixel count without replacement");
  }
  PatchDistribution d;
  const double n_pix = double(pixels.size());
  const double pix_mean = std::accumulate(pixels.begin(), pixels.end(), 0.0) / n_pix;
  for (double v : pixels) d.pixel_variance += (v - pix_mean) * (v - pix_mean);
  d.pixel_variance /= n_pix;

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(pixels.size());
  std::vector<double> values;
  values.reserve(std::size_t(patches) * trials);
  d.min = std::numeric_limits<double>::infinity();
  d.max = -std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < trials; ++trial) {
    if (!with_replacement) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = 0; i < std::size_t(patches) * per_patch; ++i) {
        const std::size_t j = i + draw_index(rng, order.size() - i);
        std::swap(order[i], order[j]);
      }
    }
    for (int m = 0; m < patches; ++m) {
      double sum = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t i = 0; i < per_patch; ++i) {
        const std::size_t idx = with_replacement ? draw_index(rng, pixels.size()) : order[m * per_patch + i];
        const double v = pixels[idx];
        sum += v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      const double y = sum / double(per_patch);
      if (y < lo - 1e-12 || y > hi + 1e-12) ++d.bound_violations;
      values.push_back(y);
      ++d.q_histogram[std::lround(sum)];
      d.min = std::min(d.min, y);
      d.max = std::max(d.max, y);
    }
  }
  d.patches = values.size();
  d.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
  for (double y : values) d.variance += (y - d.mean) * (y - d.mean);
  d.variance /= double(values.size());
  d.variance_ratio = d.pixel_variance > 0.0 ? d.variance / d.pixel_variance : 0.0;
  return d;
}

std::vector<int> approximate_visibility(const std::vector<Mask>& masks) {
  if (masks.empty()) return {};
  std::vector<int> out(masks.front().pixel_count(), 0);
  for (const auto& m : masks)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += m.data[i] == 0 ? 1 : 0;
  return out;
}

}  // namespace declutter
