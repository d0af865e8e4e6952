// Acceptance suite. Each criterion prints one line:
//   CRITERION <n> PASS|FAIL (<seconds>s): <measurements>
// Usage: acceptance [n ...]   (no arguments runs all ten)

#include "declutter/field.hpp"
#include "declutter/gradcheck.hpp"
#include "declutter/losses.hpp"
#include "declutter/metrics.hpp"
#include "declutter/render.hpp"
#include "declutter/sampler.hpp"
#include "declutter/scene.hpp"
#include "declutter/trainer.hpp"

#include <Eigen/SVD>
#include <fmt/core.h>
#include <malloc.h>

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

using namespace declutter;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

void progress(const std::string& msg) { fmt::print(stderr, "  .. {}\n", msg); }

// ---------------------------------------------------------------- shared setup

constexpr int kHoldout = 4;

// 9 views at 64x64 with the middle one held out: 8 train + 1 holdout.
PosedImageSet scene_dataset(const SyntheticScene& scene, const CameraRig& rig, double rot_deg = 0.0,
                            double trans = 0.0) {
  SynthOptions opt;
  opt.samples_per_ray = 128;
  opt.point_stride = 0;
  opt.holdout_indices = std::vector<int>{kHoldout};
  opt.rotation_noise_deg = rot_deg;
  opt.translation_noise = trans;
  opt.seed = 7;
  return synthesize_dataset(scene, rig, opt);
}

// MLP 4x64, N = 32, T = 5000. The batch is 512 rays so one run fits the CPU budget.
TrainConfig experiment_config(const std::string& mode, long iterations = 5000) {
  return train_config_from_json({{"iterations", iterations},
                                 {"batch_size", 512},
                                 {"samples_per_ray", 32},
                                 {"ablation_mode", mode},
                                 {"log_every", 1000},
                                 {"field", {{"depth", 4}, {"width", 64}, {"skip_layer", 2}}},
                                 {"s3im", {{"patch_side", 16}, {"window", 4}, {"stride", 4}}}});
}

Checkpoint train(const TrainConfig& cfg, const PosedImageSet& set, const std::string& label) {
  Trainer trainer(cfg, set);
  trainer.run(std::nullopt, [&](const LogRow& r) {
    progress(fmt::format("{} iter {} mse {:.5f} occ {:.3g} s3im {:.4f}", label, r.iteration, r.mse, r.occ, r.s3im));
  });
  return trainer.checkpoint();
}

Mask inverted(const Mask& m) {
  Mask out = m;
  for (auto& v : out.data) v = v ? 0 : 1;
  return out;
}

// ---------------------------------------------------------------- criteria

Outcome schedules() {
  // Occlusion weight against its closed form at the endpoints and midpoint.
  ScheduleState s = ScheduleState::for_total(200000);
  s.t_start = 40;
  s.w_full = 1.0;
  const long t_end = s.t_end();
  auto oracle = [&](long t) {
    if (t < s.t_start) return 0.0;
    if (t >= t_end) return s.w_full;
    return 0.5 * s.w_full * (1.0 + std::cos(std::numbers::pi * double(t_end - t) / double(t_end - s.t_start)));
  };
  double worst = 0.0;
  for (long t : {s.t_start, (s.t_start + t_end) / 2, t_end}) worst = std::max(worst, std::abs(occ_weight(t, s) - oracle(t)));
  worst = std::max({worst, std::abs(occ_weight(s.t_start, s) - 0.0), std::abs(occ_weight((s.t_start + t_end) / 2, s) - 0.5),
                    std::abs(occ_weight(t_end, s) - 1.0)});

  const ScheduleState full_scale = ScheduleState::for_total(200000);
  const bool coupling = full_scale.t_freq_end == 20000 && schedule_coupling(full_scale) == 200 && full_scale.t_end() == 200;
  bool ramp = true;
  for (long total : {1000L, 5000L, 200000L}) {
    const ScheduleState st = ScheduleState::for_total(total);
    for (int l : {4, 10}) ramp = ramp && frequency_max(total / 10, l, st.t_freq_end) == double(l);
  }
  return {worst <= 1e-12 && coupling && ramp,
          fmt::format("max |occ_weight - closed form| = {:.2e} (tol 1e-12); f_max(0.1T) = L: {}; t_end(T=200000, "
                      "lambda=100) = {} (want 200)",
                      worst, ramp ? "exact" : "MISMATCH", schedule_coupling(full_scale))};
}

Outcome rendering() {
  // sigma = 2 over depth length 1 on the principal ray; integration range = slab extent.
  SyntheticScene scene;
  scene.near = 2.0;
  scene.far = 3.0;
  Primitive slab;
  slab.shape = Shape::kPlaneSlab;
  slab.slab_axis = 2;
  slab.center = Vec3(0, 0, 2.5);
  slab.extent = Vec3(0, 0, 0.5);
  slab.density = 2.0;
  slab.albedo = Rgb{1, 1, 1};
  scene.primitives.push_back(slab);
  CameraRig rig;
  rig.width = rig.height = 9;
  rig.intrinsics = {9, 9, 4.5, 4.5};
  rig.poses.push_back(Pose{});
  const double expected = 1.0 - std::exp(-2.0 * 1.0);
  double err[2];
  int i = 0;
  for (int n : {128, 256}) {
    OracleRenderOptions o;
    o.samples_per_ray = n;
    const Image img = render_oracle(scene, rig, 0, o);
    err[i] = 0.0;
    for (int c = 0; c < 3; ++c) err[i] = std::max(err[i], std::abs(img.at(4, 4, c) - expected));
    ++i;
  }
  return {err[0] < 1e-3 && err[1] < 2.5e-4,
          fmt::format("|I - (1 - exp(-2))| = {:.3e} at 128 samples (tol 1e-3), {:.3e} at 256 (tol 2.5e-4)", err[0],
                      err[1])};
}

Outcome gradients() {
  const GradcheckProblem p = make_toy_problem(64, 16, 0);
  const GradientCheckReport r = gradient_check(p, 1e-4, 50);
  const std::size_t checked = r.field.checked + r.camera.checked;
  return {r.max_relative_error < 1e-3 && r.gated_camera_zero && checked >= 50 && r.camera.checked > 0,
          fmt::format("max relative error {:.3e} (tol 1e-3) over {} params (field {:.2e}, camera {:.2e}, {} at a "
                      "reduced step); gated camera gradient {}",
                      r.max_relative_error, checked, r.field.max_relative_error, r.camera.max_relative_error,
                      r.kink_shrunk, r.gated_camera_zero ? "exactly 0" : "NONZERO")};
}

Outcome s3im_properties() {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  S3IMConfig cfg;
  cfg.patch_side = 8;
  cfg.window = 4;
  cfg.stride = 4;
  const std::size_t rays = 512;
  auto random_batch = [&] {
    std::vector<double> v(rays * 3);
    for (auto& x : v) x = u(rng);
    return v;
  };
  const auto gt = random_batch();
  const double self = s3im_loss(gt, gt, cfg, 3);
  double lo = 2.0, hi = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto pred = random_batch();
    const double l = s3im_loss(pred, gt, cfg, std::uint64_t(trial));
    lo = std::min(lo, l);
    hi = std::max(hi, l);
  }
  // Anti-correlated batch pushes the loss toward its upper end.
  std::vector<double> anti(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) anti[i] = 1.0 - gt[i];
  const double anti_loss = s3im_loss(anti, gt, cfg, 4);
  lo = std::min(lo, anti_loss);
  hi = std::max(hi, anti_loss);
  const auto pred = random_batch();
  const bool deterministic = s3im_loss(pred, gt, cfg, 11) == s3im_loss(pred, gt, cfg, 11);

  // Synthetic long-tail visibility histogram, alpha = 2, x_max = 16.
  std::vector<double> weights;
  for (int x = 1; x <= 16; ++x) weights.push_back(std::pow(17.0 - x, -2.0));
  std::discrete_distribution<int> d(weights.begin(), weights.end());
  std::vector<double> pixels(20000);
  for (auto& v : pixels) v = d(rng) + 1;

  const PatchDistribution bounds = patch_distribution(pixels, 4, 100, 100, 5);  // 10,000 patches
  std::string ratios;
  bool ratio_ok = true;
  for (int k : {2, 4, 8}) {
    const PatchDistribution pd = patch_distribution(pixels, k, 64, 1000, 6 + k, true);
    const double target = 1.0 / (k * k);
    const double rel = std::abs(pd.variance_ratio - target) / target;
    ratio_ok = ratio_ok && rel <= 0.2;
    ratios += fmt::format(" K={}: {:.4f} vs {:.4f} ({:.1f}%)", k, pd.variance_ratio, target, 100 * rel);
  }
  const bool pass = self == 0.0 && lo >= 0.0 && hi <= 2.0 && deterministic && bounds.bound_violations == 0 &&
                    bounds.patches == 10000 && ratio_ok;
  return {pass, fmt::format("self loss {}; range [{:.4f}, {:.4f}] within [0, 2]; seed-deterministic {}; bounds hold "
                            "for {}/{} patches; variance ratio{} (tol 20%)",
                            self, lo, hi, deterministic, bounds.patches - bounds.bound_violations, bounds.patches,
                            ratios)};
}

Outcome longtail() {
  double worst = 0.0;
  for (double alpha : {1.5, 2.0, 3.0}) {
    VisibilityHistogram h;
    h.x_max = 16;
    for (int x = 1; x <= 16; ++x)
      h.counts[x] = static_cast<std::size_t>(std::llround(1e13 * std::pow(double(17 - x), -alpha)));
    worst = std::max(worst, std::abs(fit_longtail(h) - alpha));
  }
  // Oracle visibility over every reference view of an occluded scene whose cameras converge on the wall.
  DeclutterSceneOptions opt{9, 32, 32, 0.45};
  opt.baseline = 0.6;
  opt.target_depth = 6.3;
  auto [scene, rig] = make_declutter_scene(opt);
  std::vector<int> values;
  for (std::size_t v = 0; v < rig.view_count(); ++v) {
    const auto vis = pixel_visibility(scene, rig, v);
    values.insert(values.end(), vis.begin(), vis.end());
  }
  const double fitted = fit_longtail(VisibilityHistogram::from_values(values, int(rig.view_count())));
  return {worst < 1e-6 && fitted > 1.0,
          fmt::format("max |alpha_fit - alpha| = {:.2e} for alpha in {{1.5, 2, 3}} (tol 1e-6); occluded scene alpha = "
                      "{:.3f} (want > 1)",
                      worst, fitted)};
}

Outcome occlusion_removal() {
  auto [scene, rig] = make_declutter_scene({9, 64, 64, 0.45});
  double min_cover = 1.0, max_cover = 0.0;
  for (std::size_t v = 0; v < rig.view_count(); ++v) {
    const double c = double(occluder_mask(scene, rig, v).count_set()) / (64.0 * 64.0);
    min_cover = std::min(min_cover, c);
    max_cover = std::max(max_cover, c);
  }
  const PosedImageSet set = scene_dataset(scene, rig);
  OracleRenderOptions clean_opt;
  clean_opt.include_occluders = false;
  clean_opt.samples_per_ray = 128;
  const Image clean = render_oracle(scene, rig, kHoldout, clean_opt);
  const Mask footprint = inverted(set.masks[kHoldout]);

  auto footprint_psnr = [&](bool use_masks) {
    TrainConfig cfg = experiment_config("+s3im");
    cfg.use_masks = use_masks;
    const Checkpoint ck = train(cfg, set, use_masks ? "masked" : "unmasked");
    const CameraState cam = ck.camera_state();
    const auto img = render_view(ck, effective_pose(cam, kHoldout), cam.intrinsics(), 64, 64);
    return psnr_masked(img.image, clean, footprint);
  };
  const double masked = footprint_psnr(true);
  const double unmasked = footprint_psnr(false);
  const bool coverage = min_cover >= 0.10 && max_cover <= 0.25;
  return {coverage && masked - unmasked >= 3.0,
          fmt::format("holdout footprint PSNR vs occluder-free oracle: masked {:.2f} dB, unmasked {:.2f} dB, gain "
                      "{:.2f} dB (want >= 3); occluder coverage {:.1f}-{:.1f}%",
                      masked, unmasked, masked - unmasked, 100 * min_cover, 100 * max_cover)};
}

Outcome pose_recovery() {
  auto [scene, rig] = make_declutter_scene({9, 64, 64, 0.45});
  // Scene scale: mean distance from the cameras to the point they look at.
  double scale = 0.0;
  for (const auto& p : rig.poses) scale += (p.center - Vec3(0, 0, 5.0)).norm();
  scale /= double(rig.view_count());
  const double trans = 0.02 * scale;
  const PosedImageSet set = scene_dataset(scene, rig, 2.0, trans);

  // Mean rotation (deg) and center error over the training views. With `align`,
  // a similarity transform first removes the gauge freedom of the reconstruction:
  // its rotation comes from the camera orientations (the centers are nearly
  // collinear), then scale and offset from the centers by least squares.
  const auto views = set.training_views();
  auto errors = [&](const std::vector<Pose>& poses, bool align) {
    Mat3 r = Mat3::Identity();
    double s = 1.0;
    Vec3 t = Vec3::Zero();
    if (align) {
      Mat3 m = Mat3::Zero();
      for (int v : views) m += rig.poses[v].rotation * poses[v].rotation.transpose();
      Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
      Mat3 fix = Mat3::Identity();
      fix(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
      r = svd.matrixU() * fix * svd.matrixV().transpose();
      Vec3 c_mean = Vec3::Zero(), g_mean = Vec3::Zero();
      for (int v : views) {
        c_mean += poses[v].center / double(views.size());
        g_mean += rig.poses[v].center / double(views.size());
      }
      double num = 0.0, den = 0.0;
      for (int v : views) {
        const Vec3 rc = r * (poses[v].center - c_mean);
        num += (rig.poses[v].center - g_mean).dot(rc);
        den += rc.squaredNorm();
      }
      s = num / den;
      t = g_mean - s * r * c_mean;
    }
    double rot = 0.0, center = 0.0;
    for (int v : views) {
      rot += rotation_angle_between(r * poses[v].rotation, rig.poses[v].rotation);
      center += (s * r * poses[v].center + t - rig.poses[v].center).norm();
    }
    return std::pair{rot / views.size() * 180.0 / std::numbers::pi, center / views.size()};
  };
  auto recovered = [&](const Checkpoint& ck) {
    const CameraState cam = ck.camera_state();
    std::vector<Pose> out;
    for (std::size_t v = 0; v < cam.view_count(); ++v) out.push_back(effective_pose(cam, v));
    return out;
  };
  const auto mode2 = recovered(train(experiment_config("+camera"), set, "mode ii"));
  const auto mode1 = recovered(train(experiment_config("masked_nerf"), set, "mode i"));
  const auto [rot0, c0] = errors(set.poses, false);
  const auto [rot1, c1] = errors(mode1, false);
  const auto [rot2, c2] = errors(mode2, false);
  const auto [arot0, ac0] = errors(set.poses, true);
  const auto [arot2, ac2] = errors(mode2, true);
  // Reductions against the smaller of the injected and the aligned initial error.
  const double base_rot = std::min(rot0, arot0), base_c = std::min(c0, ac0);
  const double red_rot = 1.0 - arot2 / base_rot, red_c = 1.0 - ac2 / base_c;
  const bool frozen = rot1 == rot0 && c1 == c0;
  return {red_rot >= 0.5 && red_c >= 0.5 && frozen,
          fmt::format("injected {:.3f} deg / {:.4f} (2% of scale {:.2f}), {:.3f} deg / {:.4f} after alignment; mode ii "
                      "aligned {:.3f} deg / {:.4f} (reduction {:.0f}% / {:.0f}%, want >= 50%), unaligned {:.3f} deg / "
                      "{:.4f}; mode i unchanged: {}",
                      rot0, c0, scale, arot0, ac0, arot2, ac2, 100 * red_rot, 100 * red_c, rot2, c2, frozen)};
}

Outcome oar_effect() {
  auto [scene, rig] = make_declutter_scene({9, 64, 64, 0.45});
  // Drop the holdout's left neighbor: the volume in front of the holdout camera
  // on that side is then covered by a single training view.
  PosedImageSet set = scene_dataset(scene, rig);
  constexpr int kRemoved = kHoldout - 1;
  set.images.erase(set.images.begin() + kRemoved);
  set.masks.erase(set.masks.begin() + kRemoved);
  set.poses.erase(set.poses.begin() + kRemoved);
  set.holdout_indices = {kHoldout - 1};
  const int holdout = kHoldout - 1;
  const Mask& valid = set.masks[holdout];

  auto measure = [&](const std::string& mode) {
    const Checkpoint ck = train(experiment_config(mode), set, mode);
    const CameraState cam = ck.camera_state();
    const auto r = render_view(ck, effective_pose(cam, holdout), cam.intrinsics(), 64, 64, true);
    const int n = r.samples;
    const int near = static_cast<int>(std::ceil(0.2 * n));
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t px = 0; px < valid.pixel_count(); ++px) {
      if (valid.data[px]) continue;
      for (int k = 0; k < near; ++k) sum += r.sigma[px * n + k];
      count += near;
    }
    return std::pair{sum / double(count), psnr_masked(r.image, set.images[holdout], valid)};
  };
  const auto [density2, psnr2] = measure("+camera");
  const auto [density3, psnr3] = measure("+oar");
  const double ratio = density2 > 0 ? density3 / density2 : 0.0;
  return {ratio <= 0.5 && psnr2 - psnr3 <= 1.0,
          fmt::format("near-camera density on holdout rays: mode ii {:.4g}, mode iii {:.4g}, ratio {:.3f} (want <= "
                      "0.5); holdout masked PSNR {:.2f} -> {:.2f} dB (drop {:.2f}, want <= 1)",
                      density2, density3, ratio, psnr2, psnr3, psnr2 - psnr3)};
}

TrainConfig small_config(const std::string& mode, long iterations) {
  return train_config_from_json({{"iterations", iterations},
                                 {"batch_size", 256},
                                 {"samples_per_ray", 16},
                                 {"ablation_mode", mode},
                                 {"log_every", 1},
                                 {"field", {{"depth", 3}, {"width", 32}, {"skip_layer", 2}}},
                                 {"s3im", {{"patch_side", 8}, {"window", 4}, {"stride", 4}}}});
}

const PosedImageSet& small_dataset() {
  static const PosedImageSet set = [] {
    auto [scene, rig] = make_declutter_scene({9, 32, 32, 0.45});
    return scene_dataset(scene, rig);
  }();
  return set;
}

Outcome gating() {
  // Expected activation per mode: camera, occlusion, s3im.
  const std::map<std::string, std::array<bool, 3>> matrix = {{"masked_nerf", {false, false, false}},
                                                             {"+camera", {true, false, false}},
                                                             {"+oar", {true, true, false}},
                                                             {"+s3im", {true, true, true}}};
  bool ok = true;
  std::string detail;
  for (const auto& [mode, expect] : matrix) {
    const TrainConfig cfg = small_config(mode, 500);
    Trainer trainer(cfg, small_dataset());
    const auto initial = trainer.checkpoint().camera;
    std::size_t occ_nonzero = 0, s3im_nonzero = 0, occ_after_start = 0;
    bool camera_early = false;
    for (long t = 1; t <= cfg.iterations; ++t) {
      const LogRow r = trainer.step();
      occ_nonzero += r.occ != 0.0;
      s3im_nonzero += r.s3im != 0.0;
      occ_after_start += t > cfg.schedule.t_start;
      if (t < cfg.schedule.t_c) camera_early |= trainer.checkpoint().camera != initial;
    }
    const bool camera_moved = trainer.checkpoint().camera != initial;
    const bool row_ok = camera_moved == expect[0] && !camera_early &&
                        occ_nonzero == (expect[1] ? occ_after_start : 0) &&
                        s3im_nonzero == (expect[2] ? std::size_t(cfg.iterations) : 0);
    ok = ok && row_ok;
    detail += fmt::format("{}{}: camera {} occ {}/{} s3im {}/{}", detail.empty() ? "" : "; ", mode,
                          camera_moved ? "on" : "off", occ_nonzero, cfg.iterations, s3im_nonzero, cfg.iterations);
  }
  return {ok, detail};
}

Outcome determinism() {
  const TrainConfig cfg = small_config("+s3im", 500);
  auto run_all = [&] {
    Trainer t(cfg, small_dataset());
    return t.run();
  };
  const auto a = run_all(), b = run_all();
  bool identical = a.size() == b.size();
  for (std::size_t i = 0; identical && i < a.size(); ++i) identical = to_csv(a[i]) == to_csv(b[i]);

  Trainer first(cfg, small_dataset());
  first.run(173);
  const auto path = std::filesystem::temp_directory_path() / "declutter_acceptance_resume.ckpt";
  save_checkpoint(first.checkpoint(), path);
  Trainer second(load_checkpoint(path), small_dataset());
  const auto rest = second.run();
  std::filesystem::remove(path);
  double worst = 0.0;
  bool aligned = rest.size() == a.size() - 173;
  for (std::size_t i = 0; aligned && i < rest.size(); ++i) {
    const LogRow& x = rest[i];
    const LogRow& y = a[173 + i];
    aligned = x.iteration == y.iteration;
    for (auto [p, q] : {std::pair{x.mse, y.mse}, {x.occ, y.occ}, {x.s3im, y.s3im}, {x.total, y.total}})
      worst = std::max(worst, std::abs(p - q) / std::max(std::abs(q), 1e-300));
  }
  return {identical && aligned && worst <= 1e-6,
          fmt::format("same-seed logs identical: {}; resume at 173/500 max relative deviation {:.2e} (tol 1e-6)",
                      identical, worst)};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  const std::vector<std::function<Outcome()>> criteria = {schedules,         rendering,     gradients, s3im_properties,
                                                          longtail,          occlusion_removal, pose_recovery,
                                                          oar_effect,        gating,        determinism};
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::stoi(argv[i]));
  if (selected.empty())
    for (int i = 1; i <= 10; ++i) selected.push_back(i);

  int failures = 0;
  for (int n : selected) {
    if (n < 1 || n > 10) {
      fmt::print("unknown criterion {}\n", n);
      return 2;
    }
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[n - 1]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    fmt::print("CRITERION {} {} ({:.1f}s): {}\n", n, o.pass ? "PASS" : "FAIL", secs, o.detail);
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
