#include "declutter/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace declutter {

namespace {

void check_shapes(const Image& a, const Image& b, const Mask& m) {
  if (a.width != b.width || a.height != b.height || m.width != a.width || m.height != a.height) {
    throw ValidationError("metrics: image / mask shape mismatch");
  }
}

}  // namespace

double psnr_masked(const Image& pred, const Image& gt, const Mask& mask) {
  check_shapes(pred, gt, mask);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (mask.data[i] != 0) continue;
    for (int c = 0; c < 3; ++c) {
      const double e = double(pred.data[i * 3 + c]) - double(gt.data[i * 3 + c]);
      sum += e * e;
    }
    ++count;
  }
  if (count == 0) throw ValidationError("psnr_masked: every pixel is masked");
  const double mse = sum / double(count * 3);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

std::vector<Rgb> valid_pixels(const Image& image, const Mask& mask) {
  if (mask.width != image.width || mask.height != image.height) throw ValidationError("valid_pixels: shape mismatch");
  std::vector<Rgb> out;
  for (std::size_t i = 0; i < mask.data.size(); ++i)
    if (mask.data[i] == 0) out.push_back({image.data[i * 3], image.data[i * 3 + 1], image.data[i * 3 + 2]});
  return out;
}

Image rearrange_valid(const std::vector<Rgb>& pixels) {
  if (pixels.empty()) throw ValidationError("rearrange_valid: no pixels");
  const std::size_t n = pixels.size();
  std::size_t w = static_cast<std::size_t>(std::ceil(std::sqrt(double(n))));
  while (w * w < n) ++w;
  while (w > 1 && (w - 1) * (w - 1) >= n) --w;
  const std::size_t h = (n + w - 1) / w;
  Image img(static_cast<int>(w), static_cast<int>(h));
  for (std::size_t i = 0; i < w * h; ++i) {
    const Rgb& p = pixels[std::min(i, n - 1)];
    for (int c = 0; c < 3; ++c) img.data[i * 3 + c] = static_cast<float>(p[c]);
  }
  return img;
}

double ssim(const Image& a, const Image& b, int window) {
  if (a.width != b.width || a.height != b.height) throw ValidationError("ssim: shape mismatch");
  if (window < 1 || a.width < window || a.height < window) {
    throw ValidationError(fmt::format("ssim: {}x{} image is too small for a {}x{} window", a.width, a.height, window,
                                      window));
  }
  constexpr double c1 = 1e-4, c2 = 9e-4;
  const double n = double(window) * window;
  double total = 0.0;
  std::size_t count = 0;
  for (int y0 = 0; y0 + window <= a.height; ++y0)
    for (int x0 = 0; x0 + window <= a.width; ++x0)
      for (int c = 0; c < 3; ++c) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < window; ++dy)
          for (int dx = 0; dx < window; ++dx) {
            const double va = a.at(x0 + dx, y0 + dy, c), vb = b.at(x0 + dx, y0 + dy, c);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        const double ma = sa / n, mb = sb / n;
        const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / double(count);
}

double ssim_masked(const Image& pred, const Image& gt, const Mask& mask, int window) {
  check_shapes(pred, gt, mask);
  return ssim(rearrange_valid(valid_pixels(pred, mask)), rearrange_valid(valid_pixels(gt, mask)), window);
}

EvalReport make_report(std::vector<EvalRow> rows) {
  EvalReport r;
  EvalRow avg{"average", -1, 0.0, 0.0};
  for (const auto& row : rows) {
    avg.psnr += row.psnr;
    avg.ssim += row.ssim;
  }
  if (!rows.empty()) {
    avg.psnr /= double(rows.size());
    avg.ssim /= double(rows.size());
  }
  r.rows = std::move(rows);
  r.rows.push_back(avg);
  return r;
}

std::string EvalReport::csv() const {
  std::string out = "view,psnr,ssim\n";
  for (const auto& r : rows) out += fmt::format("{},{:.6f},{:.6f}\n", r.name, r.psnr, r.ssim);
  return out;
}

std::string EvalReport::table() const {
  std::string out = fmt::format("{:<10} {:>10} {:>8}\n", "view", "PSNR(dB)", "SSIM");
  for (const auto& r : rows) out += fmt::format("{:<10} {:>10.3f} {:>8.4f}\n", r.name, r.psnr, r.ssim);
  return out;
}

EvalReport eval_report(const Checkpoint& ckpt, const PosedImageSet& dataset) {
  if (dataset.holdout_indices.empty()) throw ValidationError("eval_report: dataset has no holdout views");
  if (dataset.view_count() != ckpt.base_poses.size()) {
    throw ValidationError("eval_report: checkpoint and dataset disagree on the number of views");
  }
  const CameraState camera = ckpt.camera_state();
  std::vector<EvalRow> rows;
  for (int v : dataset.holdout_indices) {
    const auto view = render_view(ckpt, effective_pose(camera, v), camera.intrinsics(), dataset.width(),
                                  dataset.height());
    rows.push_back({fmt::format("{:03}", v), v, psnr_masked(view.image, dataset.images[v], dataset.masks[v]),
                    ssim_masked(view.image, dataset.images[v], dataset.masks[v])});
  }
  return make_report(std::move(rows));
}

}  // namespace declutter
