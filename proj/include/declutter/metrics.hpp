#pragma once

#include "declutter/common.hpp"
#include "declutter/dataset.hpp"
#include "declutter/trainer.hpp"

#include <string>
#include <vector>

namespace declutter {

constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) over pixels with mask = 0, capped at 99 dB.
double psnr_masked(const Image& pred, const Image& gt, const Mask& mask);

/// Packs pixels row-major into a W x H rectangle with W = ceil(sqrt(n)),
/// H = ceil(n / W); leftover cells repeat the last pixel.
Image rearrange_valid(const std::vector<Rgb>& pixels);

/// Valid pixels of `image` (mask = 0) in scanline order.
std::vector<Rgb> valid_pixels(const Image& image, const Mask& mask);

/// Uniform-window SSIM (stride 1) averaged over windows and channels.
double ssim(const Image& a, const Image& b, int window = 7);

/// SSIM of the rearranged valid pixels.
double ssim_masked(const Image& pred, const Image& gt, const Mask& mask, int window = 7);

struct EvalRow {
  std::string name;
  int view = -1;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;  // one per holdout, then the average row

  std::string csv() const;
  std::string table() const;
};

/// Renders every holdout view from the checkpoint and scores it against the
/// dataset image on its valid pixels.
EvalReport eval_report(const Checkpoint& checkpoint, const PosedImageSet& dataset);

/// Builds a report from per-view rows, appending the average row.
EvalReport make_report(std::vector<EvalRow> rows);

}  // namespace declutter
