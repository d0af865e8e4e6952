#include "declutter/sampler.hpp"
#include "declutter/scene.hpp"

#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

using namespace declutter;

namespace {

// Counts proportional to (x_max - x + 1)^-alpha, scaled so rounding is negligible.
VisibilityHistogram exact_longtail(int x_max, double alpha) {
  VisibilityHistogram h;
  h.x_max = x_max;
  for (int x = 1; x <= x_max; ++x)
    h.counts[x] = static_cast<std::size_t>(std::llround(1e13 * std::pow(double(x_max - x + 1), -alpha)));
  return h;
}

std::vector<double> longtail_pixels(int x_max, double alpha, std::size_t n, std::uint64_t seed) {
  std::vector<double> weights;
  for (int x = 1; x <= x_max; ++x) weights.push_back(std::pow(double(x_max - x + 1), -alpha));
  std::discrete_distribution<int> d(weights.begin(), weights.end());
  std::mt19937_64 rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = d(rng) + 1;
  return out;
}

}  // namespace

TEST_CASE("sample_batch splits the batch evenly over views") {
  std::vector<Mask> masks(32, Mask(64, 64));
  std::vector<int> views(32);
  for (int v = 0; v < 32; ++v) views[v] = v;
  const auto batch = sample_batch(masks, views, 4096, 1);
  REQUIRE(batch.size() == 4096);
  std::map<int, int> per_view;
  std::set<std::tuple<int, int, int>> unique;
  for (const auto& p : batch) {
    ++per_view[p.view];
    unique.insert({p.view, p.x, p.y});
  }
  for (const auto& [v, c] : per_view) CHECK(c == 128);
  CHECK(unique.size() == batch.size());
}

TEST_CASE("sample_batch avoids masked pixels and is seeded") {
  std::vector<Mask> masks(3, Mask(16, 16));
  std::mt19937_64 rng(2);
  for (auto& m : masks)
    for (auto& x : m.data) x = (rng() % 3 == 0) ? 1 : 0;
  const std::vector<int> views{0, 2};
  const auto a = sample_batch(masks, views, 101, 5);
  REQUIRE(a.size() == 101);
  int count0 = 0;
  for (const auto& p : a) {
    CHECK(masks[p.view].at(p.x, p.y) == 0);
    CHECK(p.view != 1);
    count0 += p.view == 0;
  }
  CHECK(count0 == 51);  // remainder goes to the first view
  CHECK(sample_batch(masks, views, 101, 5) == a);
  CHECK(sample_batch(masks, views, 101, 6) != a);

  std::vector<Mask> full(1, Mask(4, 4, 1));
  const std::vector<int> only{0};
  CHECK_THROWS_AS(sample_batch(full, only, 8, 0), ValidationError);
}

TEST_CASE("fit_longtail recovers the exponent") {
  for (double alpha : {1.5, 2.0, 3.0}) {
    CHECK(std::abs(fit_longtail(exact_longtail(16, alpha)) - alpha) < 1e-6);
  }
  VisibilityHistogram flat;
  flat.x_max = 10;
  for (int x = 1; x <= 10; ++x) flat.counts[x] = 500;
  CHECK(std::abs(fit_longtail(flat)) < 1e-9);

  VisibilityHistogram few;
  few.x_max = 10;
  few.counts[10] = 3;
  few.counts[9] = 1;
  CHECK_THROWS_AS(fit_longtail(few), ValidationError);
}

TEST_CASE("longtail model is normalized") {
  const auto model = longtail_model(12, 2.0);
  double sum = 0;
  for (const auto& [x, p] : model) sum += p;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(model.at(12) > model.at(11));
}

TEST_CASE("visibility on an occluded synthetic scene is long-tailed") {
  // Cameras converge on the wall so frustum borders do not dominate the low-visibility bins.
  DeclutterSceneOptions opt{9, 32, 32, 0.45};
  opt.baseline = 0.6;
  opt.target_depth = 6.3;
  auto [scene, rig] = make_declutter_scene(opt);
  std::vector<int> values;
  for (std::size_t v = 0; v < rig.view_count(); ++v) {
    const auto vis = pixel_visibility(scene, rig, v);
    values.insert(values.end(), vis.begin(), vis.end());
  }
  const auto hist = VisibilityHistogram::from_values(values, int(rig.view_count()));
  CHECK(fit_longtail(hist) > 1.0);
}

TEST_CASE("patch visibility") {
  CHECK(patch_visibility(std::vector<double>(16, 5.0)) == 5.0);
  CHECK(patch_visibility(std::vector<double>{1, 9}) == 5.0);
  CHECK_THROWS_AS(patch_visibility(std::vector<double>{}), ValidationError);
}

TEST_CASE("patch distribution") {
  const auto pixels = longtail_pixels(16, 2.0, 20000, 3);

  SUBCASE("K = 1 reproduces the pixel distribution") {
    const auto d = patch_distribution(pixels, 1, int(pixels.size()), 1, 0);
    std::map<long, std::size_t> direct;
    for (double v : pixels) ++direct[std::lround(v)];
    CHECK(d.q_histogram == direct);
    CHECK(d.variance == doctest::Approx(d.pixel_variance).epsilon(1e-9));
  }
  SUBCASE("i.i.d. grouping divides the variance by K^2") {
    for (int k : {2, 4, 8}) {
      const auto d = patch_distribution(pixels, k, 64, 1000, 11, true);
      const double expected = 1.0 / (k * k);
      CHECK(std::abs(d.variance_ratio - expected) / expected < 0.2);
      CHECK(d.bound_violations == 0);
    }
  }
  SUBCASE("grouping without replacement shortens the tail") {
    for (int k : {2, 4}) {
      const auto d = patch_distribution(pixels, k, 200, 50, 12);
      CHECK(d.variance <= d.pixel_variance);
      CHECK(d.bound_violations == 0);
      CHECK(d.min >= 1.0);
      CHECK(d.max <= 16.0);
    }
  }
  SUBCASE("seeded") {
    const auto a = patch_distribution(pixels, 4, 10, 5, 99);
    const auto b = patch_distribution(pixels, 4, 10, 5, 99);
    CHECK(a.q_histogram == b.q_histogram);
    CHECK(a.variance == b.variance);
  }
}

TEST_CASE("approximate visibility counts unmasked views") {
  std::vector<Mask> masks(3, Mask(2, 2));
  masks[0].at(0, 0) = 1;
  masks[2].at(0, 0) = 1;
  masks[1].at(1, 1) = 1;
  CHECK(approximate_visibility(masks) == std::vector<int>{1, 3, 3, 2});
}
