#pragma once

#include "declutter/common.hpp"

#include <random>
#include <span>
#include <vector>

namespace declutter {

struct RenderConfig {
  int samples_per_ray = 64;
  double near = 0.5;
  double far = 6.0;
  bool stratified = true;
  bool white_background = false;

  void validate() const;
};

/// Depths along one ray. Evenly spaced mode spans [near, far] inclusive;
/// stratified mode draws one uniform sample inside each of N equal bins.
void sample_depths(double near, double far, int samples, bool stratified, std::mt19937_64* rng,
                   std::span<double> out);

/// Per-ray compositing buffers for a batch of rays with N samples each.
/// Sample arrays are row-major [ray][sample].
template <typename T>
struct RenderOutput {
  int rays = 0;
  int samples = 0;
  std::vector<T> rgb;        // rays x 3
  std::vector<T> sigma;      // rays x N
  std::vector<T> weights;    // rays x N
  std::vector<T> opacity;    // rays
  std::vector<T> deltas;     // rays x N
  std::vector<T> trans_after;  // rays x N, transmittance past each sample
};

/// Alpha compositing with alpha_k = 1 - exp(-sigma_k delta_k),
/// delta_k = depth_{k+1} - depth_k and a final delta of far - depth_N.
/// `background` is added with weight (1 - opacity).
template <typename T>
RenderOutput<T> volume_render(std::span<const T> sigma, std::span<const T> rgb, std::span<const T> depths,
                              int rays, int samples, T far, const Rgb& background);

/// Backpropagates d loss / d rgb (rays x 3) into per-sample sigma and color
/// gradients. Accumulates into d_sigma (rays x N) and d_color (rays x N x 3).
template <typename T>
void volume_render_backward(const RenderOutput<T>& forward, std::span<const T> color, std::span<const T> d_rgb,
                            const Rgb& background, std::span<T> d_sigma, std::span<T> d_color);

}  // namespace declutter
