#pragma once

#include "declutter/common.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace declutter {

/// Iteration-indexed schedules shared by the encoding ramp, the camera gate
/// and the occlusion annealing.
struct ScheduleState {
  long total_iterations = 200000;  // T
  long t_freq_end = 20000;
  long t_c = 40000;
  double lambda_anneal = 100.0;
  std::optional<long> t_end_override;
  long t_start = 0;
  double w_full = 1.0;
  double w_s3im = 0.01;
  double w_occ_coeff = 0.01;
  double occ_near_fraction = 0.2;  // rho

  /// Defaults for a run of `total` iterations: ramp ends at 10%, cameras open at 20%.
  static ScheduleState for_total(long total);
  long t_end() const;
  void validate() const;
};

/// t_end = round(t_freq_end / lambda) unless overridden.
long schedule_coupling(const ScheduleState& s);

/// Cosine ramp from 0 at t_start to w_full at t_end.
double occ_weight(long t, const ScheduleState& s);

struct S3IMConfig {
  int patch_side = 64;   // K
  int patch_count = 0;   // M; 0 means floor(batch / K^2)
  int window = 4;        // w
  int stride = 4;
  double c1 = 1e-4;      // (0.01)^2
  double c2 = 9e-4;      // (0.03)^2

  int patches_for(std::size_t batch) const;
  void validate() const;
};

/// Mean squared error over all ray channels; d_pred receives its gradient when non-empty.
double masked_mse(std::span<const double> pred, std::span<const double> gt, std::span<double> d_pred = {});

/// Mean over rays of (1/N) sum_k sigma_k m_k with m_k = 1 for k < ceil(rho N).
double occ_base(std::span<const double> sigma, int rays, int samples, double rho, std::span<double> d_sigma = {});

/// occ_weight(t) * occ_base.
double occ_loss(std::span<const double> sigma, int rays, int samples, long t, const ScheduleState& s,
                std::span<double> d_sigma = {});

/// Mean SSIM over w x w windows (given stride) and channels of two K x K x 3
/// patches stored row-major. d_a receives d SSIM / d a when non-empty.
double ssim_patch(std::span<const double> a, std::span<const double> b, int side, const S3IMConfig& cfg,
                  std::span<double> d_a = {});

/// Seeded permutation of the ray order; returns indices of the rays that fill
/// the M patches in row-major patch order.
std::vector<std::size_t> s3im_grouping(std::size_t rays, const S3IMConfig& cfg, std::uint64_t seed);

/// (1/M) sum over patches of SSIM between regrouped prediction and target.
double s3im(std::span<const double> pred, std::span<const double> gt, const S3IMConfig& cfg, std::uint64_t seed,
            std::span<double> d_pred = {});

/// 1 - s3im.
double s3im_loss(std::span<const double> pred, std::span<const double> gt, const S3IMConfig& cfg,
                 std::uint64_t seed, std::span<double> d_pred = {});

struct LossTerms {
  bool occlusion = true;
  bool s3im = true;
};

struct LossBreakdown {
  double total = 0.0;
  double mse = 0.0;
  double occ = 0.0;       // w_occ(t) * occ_base
  double occ_base = 0.0;
  double s3im = 0.0;      // 1 - S3IM
  double w_occ = 0.0;
};

/// mse + w_occ_coeff * occ_loss + w_s3im * s3im_loss with disabled terms
/// contributing exactly zero. Gradients go to d_rgb (rays x 3) and
/// d_sigma (rays x N) when those are non-empty.
LossBreakdown total_loss(std::span<const double> pred_rgb, std::span<const double> gt_rgb,
                         std::span<const double> sigma, int rays, int samples, long t, const ScheduleState& s,
                         const S3IMConfig& cfg, std::uint64_t seed, const LossTerms& terms,
                         std::span<double> d_rgb = {}, std::span<double> d_sigma = {});

}  // namespace declutter
