#include "declutter/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace declutter {

ScheduleState ScheduleState::for_total(long total) {
  ScheduleState s;
  s.total_iterations = total;
  s.t_freq_end = std::max<long>(1, std::lround(0.1 * total));
  s.t_c = std::lround(0.2 * total);
  return s;
}

long ScheduleState::t_end() const { return schedule_coupling(*this); }

void ScheduleState::validate() const {
  if (total_iterations < 1) throw ValidationError("schedule: total_iterations must be >= 1");
  if (t_freq_end <= 0 || t_freq_end > total_iterations) throw ValidationError("schedule: need 0 < t_freq_end <= T");
  if (t_c < 0 || t_c > total_iterations) throw ValidationError("schedule: need 0 <= t_c <= T");
  if (t_start < 0) throw ValidationError("schedule: t_start must be >= 0");
  const long end = t_end();
  if (end > total_iterations) throw ValidationError("schedule: t_end must be <= T");
  if (!(occ_near_fraction > 0.0 && occ_near_fraction <= 1.0)) {
    throw ValidationError("schedule: occ_near_fraction must be in (0, 1]");
  }
}

long schedule_coupling(const ScheduleState& s) {
  long end;
  if (s.t_end_override) {
    end = *s.t_end_override;
  } else {
    if (!(s.lambda_anneal > 0.0)) throw ValidationError("schedule: lambda_anneal must be > 0");
    end = std::lround(static_cast<double>(s.t_freq_end) / s.lambda_anneal);
  }
  if (end <= s.t_start) {
    throw ValidationError("schedule: t_end (" + std::to_string(end) + ") must exceed t_start (" +
                          std::to_string(s.t_start) + ")");
  }
  return end;
}

double occ_weight(long t, const ScheduleState& s) {
  if (t < s.t_start) return 0.0;
  const long end = s.t_end();
  if (t >= end) return s.w_full;
  const double phase = std::numbers::pi * double(end - t) / double(end - s.t_start);
  return 0.5 * s.w_full * (1.0 + std::cos(phase));
}

int S3IMConfig::patches_for(std::size_t batch) const {
  if (patch_count > 0) return patch_count;
  return static_cast<int>(batch / (std::size_t(patch_side) * patch_side));
}

void S3IMConfig::validate() const {
  if (patch_side < 1 || window < 1 || stride < 1) throw ValidationError("s3im: patch_side, window, stride must be >= 1");
  if (patch_side % window != 0) throw ValidationError("s3im: patch_side must be divisible by the SSIM window");
  if (patch_count < 0) throw ValidationError("s3im: patch_count must be >= 0");
}

double masked_mse(std::span<const double> pred, std::span<const double> gt, std::span<double> d_pred) {
  if (pred.empty()) throw ValidationError("masked_mse: empty batch");
  if (pred.size() != gt.size()) throw ValidationError("masked_mse: shape mismatch");
  const double n = static_cast<double>(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - gt[i];
    sum += e * e;
    if (!d_pred.empty()) d_pred[i] += 2.0 * e / n;
  }
  return sum / n;
}

double occ_base(std::span<const double> sigma, int rays, int samples, double rho, std::span<double> d_sigma) {
  if (rays == 0) return 0.0;
  const int near_count = std::min(samples, static_cast<int>(std::ceil(rho * samples - 1e-12)));
  const double scale = 1.0 / (double(rays) * samples);
  double sum = 0.0;
  for (int r = 0; r < rays; ++r) {
    for (int k = 0; k < near_count; ++k) {
      const std::size_t i = std::size_t(r) * samples + k;
      sum += sigma[i];
      if (!d_sigma.empty()) d_sigma[i] += scale;
    }
  }
  return sum * scale;
}

double occ_loss(std::span<const double> sigma, int rays, int samples, long t, const ScheduleState& s,
                std::span<double> d_sigma) {
  const double w = occ_weight(t, s);
  if (w == 0.0) return 0.0;
  if (d_sigma.empty()) return w * occ_base(sigma, rays, samples, s.occ_near_fraction);
  std::vector<double> local(sigma.size(), 0.0);
  const double base = occ_base(sigma, rays, samples, s.occ_near_fraction, local);
  for (std::size_t i = 0; i < local.size(); ++i) d_sigma[i] += w * local[i];
  return w * base;
}

double ssim_patch(std::span<const double> a, std::span<const double> b, int side, const S3IMConfig& cfg,
                  std::span<double> d_a) {
  if (side % cfg.window != 0) throw ValidationError("ssim_patch: patch side not divisible by window");
  const std::size_t expected = std::size_t(side) * side * 3;
  if (a.size() != expected || b.size() != expected) throw ValidationError("ssim_patch: patch size mismatch");
  const int w = cfg.window;
  const double n = double(w) * w;
  int windows = 0;
  for (int y0 = 0; y0 + w <= side; y0 += cfg.stride)
    for (int x0 = 0; x0 + w <= side; x0 += cfg.stride) ++windows;
  const double norm = 1.0 / (double(windows) * 3.0);

  double total = 0.0;
  for (int y0 = 0; y0 + w <= side; y0 += cfg.stride) {
    for (int x0 = 0; x0 + w <= side; x0 += cfg.stride) {
      for (int ch = 0; ch < 3; ++ch) {
        auto idx = [&](int dx, int dy) { return (std::size_t(y0 + dy) * side + (x0 + dx)) * 3 + ch; };
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < w; ++dy)
          for (int dx = 0; dx < w; ++dx) {
            const double va = a[idx(dx, dy)], vb = b[idx(dx, dy)];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        const double mu_a = sa / n, mu_b = sb / n;
        const double var_a = saa / n - mu_a * mu_a;
        const double var_b = sbb / n - mu_b * mu_b;
        const double cov = sab / n - mu_a * mu_b;
        const double a1 = 2.0 * mu_a * mu_b + cfg.c1;
        const double a2 = 2.0 * cov + cfg.c2;
        const double b1 = mu_a * mu_a + mu_b * mu_b + cfg.c1;
        const double b2 = var_a + var_b + cfg.c2;
        const double s = (a1 * a2) / (b1 * b2);
        total += s;
        if (d_a.empty()) continue;
        for (int dy = 0; dy < w; ++dy)
          for (int dx = 0; dx < w; ++dx) {
            const std::size_t i = idx(dx, dy);
            const double d_mu = 1.0 / n;
            const double d_var = 2.0 * (a[i] - mu_a) / n;
            const double d_cov = (b[i] - mu_b) / n;
            const double d_num = 2.0 * mu_b * d_mu * a2 + a1 * 2.0 * d_cov;
            const double d_den = 2.0 * mu_a * d_mu * b2 + b1 * d_var;
            d_a[i] += norm * (d_num - s * d_den) / (b1 * b2);
          }
      }
    }
  }
  return total * norm;
}

std::vector<std::size_t> s3im_grouping(std::size_t rays, const S3IMConfig& cfg, std::uint64_t seed) {
  const std::size_t per_patch = std::size_t(cfg.patch_side) * cfg.patch_side;
  const int patches = cfg.patches_for(rays);
  if (patches < 1 || std::size_t(patches) * per_patch > rays) {
    throw ValidationError("s3im: need at least M*K^2 rays (have " + std::to_string(rays) + ")");
  }
  std::vector<std::size_t> order(rays);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order is stable across standard libraries.
  for (std::size_t i = rays - 1; i > 0; --i) {
    const std::size_t j = rng() % (i + 1);
    std::swap(order[i], order[j]);
  }
  order.resize(std::size_t(patches) * per_patch);
  return order;
}

double s3im(std::span<const double> pred, std::span<const double> gt, const S3IMConfig& cfg, std::uint64_t seed,
            std::span<double> d_pred) {
  cfg.validate();
  if (pred.size() != gt.size() || pred.size() % 3 != 0) throw ValidationError("s3im: shape mismatch");
  const std::size_t rays = pred.size() / 3;
  const auto order = s3im_grouping(rays, cfg, seed);
  const std::size_t per_patch = std::size_t(cfg.patch_side) * cfg.patch_side;
  const std::size_t patches = order.size() / per_patch;
  std::vector<double> pa(per_patch * 3), pb(per_patch * 3), grad;
  if (!d_pred.empty()) grad.resize(per_patch * 3);
  double sum = 0.0;
  for (std::size_t m = 0; m < patches; ++m) {
    for (std::size_t i = 0; i < per_patch; ++i) {
      const std::size_t ray = order[m * per_patch + i];
      for (int c = 0; c < 3; ++c) {
        pa[i * 3 + c] = pred[ray * 3 + c];
        pb[i * 3 + c] = gt[ray * 3 + c];
      }
    }
    if (!d_pred.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    sum += ssim_patch(pa, pb, cfg.patch_side, cfg, grad);
    if (!d_pred.empty()) {
      for (std::size_t i = 0; i < per_patch; ++i) {
        const std::size_t ray = order[m * per_patch + i];
        for (int c = 0; c < 3; ++c) d_pred[ray * 3 + c] += grad[i * 3 + c] / double(patches);
      }
    }
  }
  return sum / double(patches);
}

double s3im_loss(std::span<const double> pred, std::span<const double> gt, const S3IMConfig& cfg, std::uint64_t seed,
                 std::span<double> d_pred) {
  if (d_pred.empty()) return 1.0 - s3im(pred, gt, cfg, seed);
  std::vector<double> local(pred.size(), 0.0);
  const double value = s3im(pred, gt, cfg, seed, local);
  for (std::size_t i = 0; i < local.size(); ++i) d_pred[i] -= local[i];
  return 1.0 - value;
}

LossBreakdown total_loss(std::span<const double> pred_rgb, std::span<const double> gt_rgb,
                         std::span<const double> sigma, int rays, int samples, long t, const ScheduleState& s,
                         const S3IMConfig& cfg, std::uint64_t seed, const LossTerms& terms, std::span<double> d_rgb,
                         std::span<double> d_sigma) {
  if (pred_rgb.size() != std::size_t(rays) * 3 || gt_rgb.size() != pred_rgb.size()) {
    throw ValidationError("total_loss: rgb shape mismatch");
  }
  if (sigma.size() != std::size_t(rays) * samples) throw ValidationError("total_loss: sigma shape mismatch");
  const bool grads = !d_rgb.empty();
  LossBreakdown out;
  out.mse = masked_mse(pred_rgb, gt_rgb, d_rgb);
  out.total = out.mse;

  if (terms.occlusion && s.w_occ_coeff != 0.0) {
    out.w_occ = occ_weight(t, s);
    if (grads) {
      std::vector<double> local(sigma.size(), 0.0);
      out.occ_base = occ_base(sigma, rays, samples, s.occ_near_fraction, local);
      for (std::size_t i = 0; i < local.size(); ++i) d_sigma[i] += s.w_occ_coeff * out.w_occ * local[i];
    } else {
      out.occ_base = occ_base(sigma, rays, samples, s.occ_near_fraction);
    }
    out.occ = out.w_occ * out.occ_base;
    out.total += s.w_occ_coeff * out.occ;
  }

  if (terms.s3im && s.w_s3im != 0.0) {
    if (grads) {
      std::vector<double> local(pred_rgb.size(), 0.0);
      out.s3im = s3im_loss(pred_rgb, gt_rgb, cfg, seed, local);
      for (std::size_t i = 0; i < local.size(); ++i) d_rgb[i] += s.w_s3im * local[i];
    } else {
      out.s3im = s3im_loss(pred_rgb, gt_rgb, cfg, seed);
    }
    out.total += s.w_s3im * out.s3im;
  }
  return out;
}

}  // namespace declutter
