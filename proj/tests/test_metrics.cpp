#include "helpers.hpp"

#include "declutter/metrics.hpp"
#include "declutter/scene.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace declutter;
using namespace declutter::test;

namespace {

Image random_image(int w, int h, std::uint64_t seed) {
  Image img(w, h);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (auto& v : img.data) v = u(rng);
  return img;
}

}  // namespace

TEST_CASE("psnr_masked") {
  const Image gt = random_image(8, 8, 1);
  Mask mask(8, 8);
  for (int x = 0; x < 8; ++x) mask.at(x, 3) = 1;
  Image pred = gt;
  for (int x = 0; x < 8; ++x)
    for (int c = 0; c < 3; ++c) pred.at(x, 3, c) = 1.0f - pred.at(x, 3, c);
  CHECK(psnr_masked(pred, gt, mask) == kPsnrCap);

  Image shifted(8, 8);
  for (std::size_t i = 0; i < gt.data.size(); ++i) shifted.data[i] = 0.5f;
  Image gt_half(8, 8, 0.4f);
  CHECK(psnr_masked(shifted, gt_half, mask) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK_THROWS_AS(psnr_masked(pred, gt, Mask(8, 8, 1)), ValidationError);
}

TEST_CASE("rearrange_valid") {
  std::vector<Rgb> twelve(12);
  for (int i = 0; i < 12; ++i) twelve[i] = {double(i), 0, 0};
  const Image a = rearrange_valid(twelve);
  CHECK(a.width == 4);
  CHECK(a.height == 3);
  CHECK(a.at(1, 2, 0) == 9.0f);

  std::vector<Rgb> seven(7);
  for (int i = 0; i < 7; ++i) seven[i] = {double(i) / 10, 0, 0};
  const Image b = rearrange_valid(seven);
  CHECK(b.width == 3);
  CHECK(b.height == 3);
  CHECK(b.at(1, 2, 0) == 0.6f);
  CHECK(b.at(2, 2, 0) == 0.6f);
  CHECK_THROWS_AS(rearrange_valid({}), ValidationError);
}

TEST_CASE("ssim") {
  const Image a = random_image(20, 20, 2);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  const Image b = random_image(20, 20, 3);
  const double s = ssim(a, b);
  CHECK(s >= -1.0);
  CHECK(s <= 1.0);
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  CHECK_THROWS_AS(ssim(Image(5, 5), Image(5, 5)), ValidationError);
}

TEST_CASE("masked SSIM decreases with noise") {
  auto [scene, rig] = make_declutter_scene({3, 32, 32, 0.45});
  OracleRenderOptions opt;
  opt.samples_per_ray = 48;
  const Image clean = render_oracle(scene, rig, 1, opt);
  const Mask mask = occluder_mask(scene, rig, 1);
  CHECK(ssim_masked(clean, clean, mask) == doctest::Approx(1.0).epsilon(1e-12));
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0.f, 1.f);
  std::vector<float> noise(clean.data.size());
  for (auto& v : noise) v = n(rng);
  double previous = 1.0;
  for (float sigma : {0.01f, 0.02f, 0.05f, 0.1f, 0.2f}) {
    Image noisy = clean;
    for (std::size_t i = 0; i < noise.size(); ++i) noisy.data[i] += sigma * noise[i];
    const double s = ssim_masked(noisy, clean, mask);
    CHECK(s < previous);
    previous = s;
  }
}

TEST_CASE("reports average their rows") {
  const EvalReport r = make_report({{"003", 3, 20.0, 0.5}, {"011", 11, 30.0, 0.9}, {"019", 19, 25.5, 0.7}});
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows.back().name == "average");
  CHECK(std::abs(r.rows.back().psnr - 75.5 / 3) < 1e-9);
  CHECK(std::abs(r.rows.back().ssim - 2.1 / 3) < 1e-9);
  CHECK(r.csv().find("view,psnr,ssim") != std::string::npos);
  CHECK(r.table().find("average") != std::string::npos);
}

TEST_CASE("eval_report covers every holdout") {
  auto [scene, rig] = make_declutter_scene({5, 16, 16, 0.45});
  SynthOptions opt;
  opt.samples_per_ray = 32;
  opt.point_stride = 0;
  opt.holdout_indices = std::vector<int>{1, 3};
  const PosedImageSet set = synthesize_dataset(scene, rig, opt);
  TrainConfig cfg = train_config_from_json({{"iterations", 2},
                                            {"batch_size", 32},
                                            {"samples_per_ray", 8},
                                            {"ablation_mode", "i"},
                                            {"schedule", {{"t_end", 1}}},
                                            {"field", {{"depth", 2}, {"width", 8}, {"skip_layer", 0}}}});
  Trainer t(cfg, set);
  t.run();
  const EvalReport r = eval_report(t.checkpoint(), set);
  REQUIRE(r.rows.size() == 3);
  CHECK(r.rows[0].view == 1);
  CHECK(r.rows[1].view == 3);
  for (const auto& row : r.rows) CHECK(std::isfinite(row.psnr));
}
