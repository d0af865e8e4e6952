#pragma once

#include "declutter/common.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

namespace declutter {

struct EncodingConfig {
  int l_pos = 10;
  int l_dir = 4;
  bool include_identity = true;
  /// Linear partial weight on the band at the ramp front instead of the hard 0/1 mask.
  bool smooth_mask = false;

  int width(int bands) const { return 3 * ((include_identity ? 1 : 0) + 2 * bands); }
  void validate() const;
};

/// Weight of band j (0-based) given the current maximum frequency.
/// Hard mask: band j is open iff j + 1 <= f_max. Smooth: 1 below floor(f_max),
/// frac(f_max) at floor(f_max), 0 above.
double band_weight(int band, double f_max, bool smooth);

/// f_max(t) = L * min(1, t / t_freq_end).
double frequency_max(long t, int bands, long t_freq_end);

/// Encodes each input value p as (sin(2^j pi p), cos(2^j pi p)) for j < L,
/// each pair scaled by its band weight; identity values come first when enabled.
/// Layout: [p_0..p_{d-1} | per component i: sin_0, cos_0, sin_1, cos_1, ...].
void positional_encoding(std::span<const double> p, int bands, double f_max, bool include_identity, bool smooth,
                         std::span<double> out);

struct FieldConfig {
  EncodingConfig encoding;
  int depth = 8;
  int width = 128;
  int skip_layer = 4;  // hidden layer that also receives the position encoding; <= 0 disables
  Vec3 bound_center = Vec3::Zero();
  double bound_radius = 1.0;  // positions map to (x - center) / radius

  void validate() const;
};

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

/// Intermediate activations kept for the backward pass.
template <typename T>
struct FieldCache {
  int points = 0;
  int rays = 0;
  int samples = 0;
  MatX<T> pos_in;                  // 3 x P normalized positions
  MatX<T> dir_in;                  // 3 x R
  MatX<T> pos_enc;                 // Dp x P
  MatX<T> dir_enc;                 // Dd x R
  std::vector<MatX<T>> hidden;     // hidden[l]: W x P after ReLU
  MatX<T> density_pre;             // 1 x P
  MatX<T> feature;                 // W x P
  MatX<T> color_hidden;            // Wc x P after ReLU
  MatX<T> rgb;                     // 3 x P
  double f_max_pos = 0.0;
  double f_max_dir = 0.0;
};

/// Radiance field MLP: position encoding -> `depth` ReLU layers (skip input at
/// `skip_layer`) -> softplus density head; a linear feature layer concatenated
/// with the direction encoding feeds a ReLU layer of width/2 and a sigmoid RGB head.
/// Parameters live in one flat array so optimizers and checkpoints see a single block.
template <typename T>
class RadianceField {
 public:
  explicit RadianceField(FieldConfig config);

  const FieldConfig& config() const { return config_; }
  std::size_t parameter_count() const { return total_; }
  int pos_width() const { return pos_width_; }
  int dir_width() const { return dir_width_; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  std::vector<T> init_parameters(std::uint64_t seed) const;

  /// points: P x 3 world positions, row-major; dirs: R x 3 unit directions with
  /// P = R * samples (sample-major within each ray). Outputs sigma (P) and rgb (P x 3).
  void forward(std::span<const T> params, std::span<const T> points, std::span<const T> dirs, int samples,
               double f_max_pos, double f_max_dir, std::span<T> sigma, std::span<T> rgb, FieldCache<T>* cache) const;

  /// Accumulates parameter gradients. When d_points / d_dirs are non-empty,
  /// also writes input gradients (P x 3 and R x 3).
  void backward(std::span<const T> params, const FieldCache<T>& cache, std::span<const T> d_sigma,
                std::span<const T> d_rgb, std::span<T> d_params, std::span<T> d_points, std::span<T> d_dirs) const;

 private:
  struct Dense {
    std::size_t weight = 0;  // out x in, column-major
    std::size_t bias = 0;
    int in = 0;
    int out = 0;
  };
  Dense add_layer(int in, int out);

  FieldConfig config_;
  int pos_width_ = 0;
  int dir_width_ = 0;
  int color_width_ = 0;
  std::vector<Dense> layers_;
  Dense density_;
  Dense feature_;
  Dense color_hidden_;
  Dense color_out_;
  std::size_t total_ = 0;
};

}  // namespace declutter
