#include "declutter/gradcheck.hpp"

#include "declutter/render.hpp"
#include "declutter/sampler.hpp"
#include "declutter/scene.hpp"
#include "declutter/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace declutter {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradcheckResult check_gradient(const std::function<double(std::span<const double>)>& loss,
                               std::span<const double> x, std::span<const double> analytic,
                               std::span<const std::size_t> indices, double eps, int order) {
  if (order != 2 && order != 4) throw ValidationError("check_gradient: order must be 2 or 4");
  GradcheckResult r;
  std::vector<double> probe(x.begin(), x.end());
  auto at = [&](std::size_t i, double offset) {
    const double saved = probe[i];
    probe[i] = saved + offset;
    const double value = loss(probe);
    probe[i] = saved;
    return value;
  };
  for (std::size_t i : indices) {
    double numeric;
    if (order == 2) {
      numeric = (at(i, eps) - at(i, -eps)) / (2.0 * eps);
    } else {
      numeric = (8.0 * (at(i, eps) - at(i, -eps)) - (at(i, 2 * eps) - at(i, -2 * eps))) / (12.0 * eps);
    }
    const double err = relative_error(analytic[i], numeric);
    ++r.checked;
    if (err >= r.max_relative_error) {
      r.max_relative_error = err;
      r.worst_index = i;
      r.worst_analytic = analytic[i];
      r.worst_numeric = numeric;
    }
  }
  return r;
}

GradcheckProblem make_problem(const PosedImageSet& set, const FieldConfig& field, int rays, int samples,
                              std::uint64_t seed) {
  GradcheckProblem p;
  p.field = field;
  p.samples = samples;
  p.far = set.far;
  p.seed = seed;
  p.images = set.images;
  p.masks = set.masks;
  const auto views = set.training_views();
  p.pixels = sample_batch(set.masks, views, static_cast<std::size_t>(rays), derive_seed(seed, 1, 0));

  // Stratified depths drawn once and then held fixed.
  p.depths.resize(p.pixels.size() * samples);
  std::mt19937_64 rng(derive_seed(seed, 2, 0));
  for (std::size_t r = 0; r < p.pixels.size(); ++r)
    sample_depths(set.near, set.far, samples, true, &rng, std::span<double>(p.depths).subspan(r * samples, samples));

  p.schedule = ScheduleState::for_total(1000);
  p.schedule.w_occ_coeff = 1.0;
  p.schedule.w_s3im = 1.0;
  p.t = p.schedule.total_iterations;
  p.s3im.patch_side = 4;
  p.s3im.window = 2;
  p.s3im.stride = 2;
  p.terms = {true, true};

  p.camera = CameraState::from_initial(set.intrinsics, set.poses, p.schedule.t_c);
  // Start from a slightly moved camera so every learnable enters nonlinearly.
  std::mt19937_64 cam_rng(derive_seed(seed, 4, 0));
  std::normal_distribution<double> noise(0.0, 1e-2);
  for (std::size_t v = 0; v < p.camera.view_count(); ++v)
    for (int c = 0; c < 3; ++c) {
      p.camera.rotations[v][c] = noise(cam_rng);
      p.camera.translations[v][c] = noise(cam_rng);
    }
  p.camera.log_fx += noise(cam_rng);
  p.camera.log_fy += noise(cam_rng);
  p.camera_params.resize(p.camera.parameter_count());
  p.camera.write_parameters<double>(p.camera_params);

  const RadianceField<double> f(field);
  p.field_params = f.init_parameters(derive_seed(seed, 0, 0));
  return p;
}

GradcheckProblem make_toy_problem(int rays, int samples, std::uint64_t seed) {
  DeclutterSceneOptions opt;
  opt.views = 3;
  opt.width = 16;
  opt.height = 16;
  auto [scene, rig] = make_declutter_scene(opt);
  SynthOptions synth;
  synth.samples_per_ray = 64;
  synth.holdout_indices = std::vector<int>{};
  synth.point_stride = 0;
  const PosedImageSet set = synthesize_dataset(scene, rig, synth);

  FieldConfig field;
  field.encoding.l_pos = 4;
  field.encoding.l_dir = 2;
  field.depth = 3;
  field.width = 16;
  field.skip_layer = 2;
  fit_bounds(set, field);
  return make_problem(set, field, rays, samples, seed);
}

double problem_loss(const GradcheckProblem& p, std::span<const double> flat, std::vector<double>* grad,
                    std::vector<std::uint8_t>* relu_pattern) {
  const RadianceField<double> field(p.field);
  const std::size_t nf = field.parameter_count();
  const std::size_t nc = p.camera.parameter_count();
  if (flat.size() != nf + nc) throw ValidationError("problem_loss: parameter vector size mismatch");
  CameraState camera = p.camera;
  camera.read_parameters<double>(flat.subspan(nf, nc));
  const RayBatch rays = generate_rays(camera, p.pixels, p.images, p.masks);
  const bool camera_live = p.camera_terms && camera_gate(p.t, camera);
  const auto& enc = p.field.encoding;
  const double f_pos = frequency_max(p.t, enc.l_pos, p.schedule.t_freq_end);
  const double f_dir = frequency_max(p.t, enc.l_dir, p.schedule.t_freq_end);

  std::vector<double> d_field(nf, 0.0), d_camera;
  const LossBreakdown loss = evaluate_batch<double>(
      field, flat.subspan(0, nf), camera, rays, p.depths, p.samples, p.far, Rgb{}, p.t, p.schedule, p.s3im, p.terms,
      f_pos, f_dir, p.seed, d_field, camera_live && grad != nullptr ? &d_camera : nullptr, relu_pattern);
  if (grad != nullptr) {
    grad->assign(nf + nc, 0.0);
    std::copy(d_field.begin(), d_field.end(), grad->begin());
    if (camera_live) std::copy(d_camera.begin(), d_camera.end(), grad->begin() + static_cast<long>(nf));
  }
  return loss.total;
}

GradcheckResult check_gradient_kink_aware(const GradcheckProblem& p, std::span<const double> x,
                                         std::span<const double> analytic, std::span<const std::size_t> indices,
                                         double eps, int order, std::size_t* shrunk) {
  if (order != 2 && order != 4) throw ValidationError("check_gradient: order must be 2 or 4");
  std::vector<std::uint8_t> base, probe_pattern;
  problem_loss(p, x, nullptr, &base);
  std::vector<double> probe(x.begin(), x.end());
  GradcheckResult r;
  for (std::size_t i : indices) {
    double step = eps;
    double numeric = 0.0;
    for (int attempt = 0; attempt < 6; ++attempt, step *= 0.1) {
      bool smooth = true;
      auto at = [&](double offset) {
        probe[i] = x[i] + offset;
        const double v = problem_loss(p, probe, nullptr, &probe_pattern);
        probe[i] = x[i];
        smooth = smooth && probe_pattern == base;
        return v;
      };
      if (order == 2) {
        numeric = (at(step) - at(-step)) / (2.0 * step);
      } else {
        numeric = (8.0 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12.0 * step);
      }
      if (smooth) break;
      if (shrunk && attempt == 0) ++*shrunk;
    }
    const double err = relative_error(analytic[i], numeric);
    ++r.checked;
    if (err >= r.max_relative_error) {
      r.max_relative_error = err;
      r.worst_index = i;
      r.worst_analytic = analytic[i];
      r.worst_numeric = numeric;
    }
  }
  return r;
}

GradientCheckReport gradient_check(const GradcheckProblem& p, double eps, std::size_t min_params, int order) {
  const std::size_t nf = RadianceField<double>(p.field).parameter_count();
  std::vector<double> flat(p.field_params);
  flat.insert(flat.end(), p.camera_params.begin(), p.camera_params.end());
  std::vector<double> analytic;
  problem_loss(p, flat, &analytic);

  // Camera parameters of the views present in the batch.
  std::set<int> views;
  for (const auto& px : p.pixels) views.insert(px.view);
  std::vector<std::size_t> camera_idx = {nf, nf + 1};
  for (int v : views)
    for (int k = 0; k < 6; ++k) camera_idx.push_back(nf + 2 + 6 * std::size_t(v) + k);

  std::vector<std::size_t> all(nf);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(p.seed, 5, 0));
  std::shuffle(all.begin(), all.end(), rng);
  const std::size_t want = std::max<std::size_t>(min_params > camera_idx.size() ? min_params - camera_idx.size() : 0,
                                                 min_params / 2);
  all.resize(std::min(nf, want));
  std::sort(all.begin(), all.end());

  GradientCheckReport report;
  report.field = check_gradient_kink_aware(p, flat, analytic, all, eps, order, &report.kink_shrunk);
  if (p.camera_terms && p.t >= p.camera.trainable_from) {
    report.camera = check_gradient_kink_aware(p, flat, analytic, camera_idx, eps, order, &report.kink_shrunk);
  }
  report.max_relative_error = std::max(report.field.max_relative_error, report.camera.max_relative_error);

  GradcheckProblem gated = p;
  gated.t = std::max<long>(0, p.camera.trainable_from - 1);
  std::vector<double> g;
  report.gated_camera_zero = true;
  if (gated.t < p.camera.trainable_from) {
    problem_loss(gated, flat, &g);
    for (std::size_t i = nf; i < g.size(); ++i) report.gated_camera_zero &= g[i] == 0.0;
  }
  return report;
}

}  // namespace declutter
