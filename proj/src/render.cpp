#include "declutter/render.hpp"

#include <cmath>
#include <string>

namespace declutter {

void RenderConfig::validate() const {
  if (samples_per_ray < 2) throw ValidationError("samples_per_ray must be >= 2");
  if (!(near < far)) throw ValidationError("render near must be < far");
}

void sample_depths(double near, double far, int samples, bool stratified, std::mt19937_64* rng,
                   std::span<double> out) {
  if (stratified) {
    const double bin = (far - near) / samples;
    std::uniform_real_distribution<double> jitter(0.0, 1.0);
    for (int k = 0; k < samples; ++k) out[k] = near + (k + jitter(*rng)) * bin;
  } else {
    const double step = (far - near) / (samples - 1);
    for (int k = 0; k < samples; ++k) out[k] = near + k * step;
    out[samples - 1] = far;
  }
}

template <typename T>
RenderOutput<T> volume_render(std::span<const T> sigma, std::span<const T> rgb, std::span<const T> depths,
                              int rays, int samples, T far, const Rgb& background) {
  RenderOutput<T> out;
  out.rays = rays;
  out.samples = samples;
  const std::size_t n = std::size_t(rays) * samples;
  out.rgb.assign(std::size_t(rays) * 3, T(0));
  out.sigma.assign(sigma.begin(), sigma.begin() + n);
  out.weights.assign(n, T(0));
  out.opacity.assign(rays, T(0));
  out.deltas.assign(n, T(0));
  out.trans_after.assign(n, T(0));

  for (int r = 0; r < rays; ++r) {
    const T* d = depths.data() + std::size_t(r) * samples;
    T transmittance(1);
    T acc(0);
    T c[3] = {T(0), T(0), T(0)};
    for (int k = 0; k < samples; ++k) {
      const std::size_t i = std::size_t(r) * samples + k;
      const T delta = (k + 1 < samples) ? d[k + 1] - d[k] : far - d[k];
      if (!(delta >= T(0)) || (k + 1 < samples && !(d[k + 1] > d[k]))) {
        throw ValidationError("volume_render: depths must be strictly increasing and <= far (ray " +
                              std::to_string(r) + ")");
      }
      const T alpha = T(1) - std::exp(-sigma[i] * delta);
      const T w = transmittance * alpha;
      out.deltas[i] = delta;
      out.weights[i] = w;
      for (int ch = 0; ch < 3; ++ch) c[ch] += w * rgb[i * 3 + ch];
      acc += w;
      transmittance *= (T(1) - alpha);
      out.trans_after[i] = transmittance;
    }
    out.opacity[r] = acc;
    for (int ch = 0; ch < 3; ++ch) out.rgb[std::size_t(r) * 3 + ch] = c[ch] + (T(1) - acc) * T(background[ch]);
  }
  return out;
}

template <typename T>
void volume_render_backward(const RenderOutput<T>& fwd, std::span<const T> color, std::span<const T> d_rgb,
                            const Rgb& background, std::span<T> d_sigma, std::span<T> d_color) {
  const int samples = fwd.samples;
  for (int r = 0; r < fwd.rays; ++r) {
    const T g[3] = {d_rgb[std::size_t(r) * 3], d_rgb[std::size_t(r) * 3 + 1], d_rgb[std::size_t(r) * 3 + 2]};
    // d C / d sigma_k = delta_k (T_{k+1} c'_k - sum_{j>k} w_j c'_j), c' = c - background.
    T suffix(0);  // sum_{j>k} w_j <g, c'_j>
    for (int k = samples - 1; k >= 0; --k) {
      const std::size_t i = std::size_t(r) * samples + k;
      T gc(0);
      for (int ch = 0; ch < 3; ++ch) {
        gc += g[ch] * (color[i * 3 + ch] - T(background[ch]));
        d_color[i * 3 + ch] += fwd.weights[i] * g[ch];
      }
      d_sigma[i] += fwd.deltas[i] * (fwd.trans_after[i] * gc - suffix);
      suffix += fwd.weights[i] * gc;
    }
  }
}

template RenderOutput<float> volume_render(std::span<const float>, std::span<const float>, std::span<const float>,
                                           int, int, float, const Rgb&);
template RenderOutput<double> volume_render(std::span<const double>, std::span<const double>,
                                            std::span<const double>, int, int, double, const Rgb&);
template void volume_render_backward(const RenderOutput<float>&, std::span<const float>, std::span<const float>,
                                     const Rgb&, std::span<float>, std::span<float>);
template void volume_render_backward(const RenderOutput<double>&, std::span<const double>,
                                     std::span<const double>, const Rgb&, std::span<double>, std::span<double>);

}  // namespace declutter
