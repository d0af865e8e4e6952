#include "declutter/cli.hpp"

#include "declutter/dataset.hpp"
#include "declutter/gradcheck.hpp"
#include "declutter/metrics.hpp"
#include "declutter/sampler.hpp"
#include "declutter/scene.hpp"
#include "declutter/trainer.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

namespace fs = std::filesystem;

namespace declutter {

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("--override '" + assignment + "': expected key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValidationError("--override '" + assignment + "': empty key component");
    if (!node->is_object()) {
      if (!node->is_null()) throw ValidationError("--override '" + key + "': '" + part + "' is not inside an object");
      *node = nlohmann::json::object();
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
}

namespace {

struct CommonOptions {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::vector<std::string> overrides;
  std::string device;
};

void setup_logging() {
  const char* env = std::getenv("DECLUTTER_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else if (level == "info") spdlog::set_level(spdlog::level::info);
  else throw ValidationError("DECLUTTER_LOG: expected error, info or debug (got '" + level + "')");
  spdlog::set_pattern("[%l] %v");
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("--config: cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("--config " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << text;
}

void require_known_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& prefix) {
  if (!j.is_object()) throw ValidationError("config key '" + prefix + "': expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ValidationError("unknown config key '" + (prefix.empty() ? k : prefix + "." + k) + "'");
  }
}

// Loads the config, applies overrides and the seed flag.
nlohmann::json load_config(const CommonOptions& o) {
  nlohmann::json j = read_json(o.config);
  for (const auto& ov : o.overrides) apply_override(j, ov);
  if (o.seed_given) j["seed"] = o.seed;
  return j;
}

fs::path out_dir(const CommonOptions& o, const std::string& fallback) {
  const fs::path dir = o.out.empty() ? fs::path(fallback) : fs::path(o.out);
  fs::create_directories(dir);
  return dir;
}

// Relative dataset paths resolve against the working directory first, then the config's directory.
fs::path resolve_path(const std::string& p, const CommonOptions& o) {
  // Relative paths are looked up next to the config first, then in the working directory.
  fs::path path(p);
  if (path.is_absolute()) return path;
  const fs::path alt = fs::path(o.config).parent_path() / path;
  return fs::exists(alt) ? alt : path;
}

TrainConfig train_config(const CommonOptions& o, nlohmann::json* resolved = nullptr) {
  const nlohmann::json j = load_config(o);
  TrainConfig c = train_config_from_json(j);
  if (resolved) *resolved = to_json(c);
  return c;
}

PosedImageSet dataset_for(const TrainConfig& c, const CommonOptions& o) {
  if (c.dataset.empty()) throw ValidationError("config key 'dataset': required for this command");
  return load_dataset(resolve_path(c.dataset, o), c.scale);
}

// ------------------------------------------------------------------ commands

int cmd_synth(const CommonOptions& o) {
  nlohmann::json j = load_config(o);
  require_known_keys(j,
                     {"scene", "preset", "samples_per_ray", "holdout_indices", "point_stride", "rotation_noise_deg",
                      "translation_noise", "clean_renders", "seed"},
                     "");
  SyntheticScene scene;
  CameraRig rig;
  if (j.contains("scene") == j.contains("preset")) {
    throw ValidationError("config: exactly one of 'scene' or 'preset' is required");
  }
  if (j.contains("scene")) {
    require_known_keys(j["scene"],
                       {"primitives", "background_color", "near", "far", "intrinsics", "resolution", "cameras", "seed"},
                       "scene");
    auto d = scene_from_json(j["scene"]);
    scene = d.scene;
    rig = d.rig;
  } else {
    const auto& p = j["preset"];
    require_known_keys(p, {"name", "views", "width", "height", "occluder_radius", "baseline", "target_depth"},
                       "preset");
    if (p.value("name", std::string("declutter")) != "declutter") {
      throw ValidationError("config key 'preset.name': only 'declutter' is available");
    }
    DeclutterSceneOptions opt;
    opt.views = p.value("views", opt.views);
    opt.width = p.value("width", opt.width);
    opt.height = p.value("height", opt.height);
    opt.occluder_radius = p.value("occluder_radius", opt.occluder_radius);
    opt.baseline = p.value("baseline", opt.baseline);
    opt.target_depth = p.value("target_depth", opt.target_depth);
    std::tie(scene, rig) = make_declutter_scene(opt);
  }
  SynthOptions s;
  s.samples_per_ray = j.value("samples_per_ray", s.samples_per_ray);
  if (j.contains("holdout_indices")) s.holdout_indices = j["holdout_indices"].get<std::vector<int>>();
  s.point_stride = j.value("point_stride", s.point_stride);
  s.rotation_noise_deg = j.value("rotation_noise_deg", 0.0);
  s.translation_noise = j.value("translation_noise", 0.0);
  s.seed = j.value("seed", std::uint64_t{0});
  const fs::path dir = out_dir(o, "synth_out");
  spdlog::info("rendering {} views at {}x{}", rig.view_count(), rig.width, rig.height);
  const PosedImageSet set = synthesize_dataset(scene, rig, s);
  save_dataset(set, dir);
  if (j.value("clean_renders", true)) {
    OracleRenderOptions clean;
    clean.samples_per_ray = s.samples_per_ray;
    clean.include_occluders = false;
    for (std::size_t v = 0; v < rig.view_count(); ++v)
      write_png_rgb(render_oracle(scene, rig, v, clean), dir / "clean" / fmt::format("{:03}.png", v));
  }
  write_text(dir / "scene.json", scene_to_json({scene, rig, s.seed}).dump(2));
  write_text(dir / "config.resolved.json", j.dump(2));
  spdlog::info("dataset written to {}", dir.string());
  return 0;
}

int cmd_train(const CommonOptions& o, const std::string& resume) {
  nlohmann::json resolved;
  const TrainConfig config = train_config(o, &resolved);
  const PosedImageSet set = dataset_for(config, o);
  const fs::path dir = out_dir(o, "train_out");
  write_text(dir / "config.resolved.json", resolved.dump(2));

  std::unique_ptr<Trainer> trainer;
  if (!resume.empty()) {
    trainer = std::make_unique<Trainer>(load_checkpoint(resume), set);
    spdlog::info("resuming from iteration {}", trainer->iteration());
  } else {
    trainer = std::make_unique<Trainer>(config, set);
  }
  std::ofstream log(dir / "metrics.csv", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw RuntimeFailure("cannot write " + (dir / "metrics.csv").string());
  if (resume.empty()) log << metrics_csv_header() << "\n";
  spdlog::info("training {} iterations, mode {}, batch {}", config.iterations, to_string(config.mode),
               config.batch_size);
  trainer->run(std::nullopt,
               [&](const LogRow& row) {
                 log << to_csv(row) << "\n" << std::flush;
                 spdlog::info("iter {:>7}  mse {:.6f}  occ {:.4g}  s3im {:.4f}  psnr {:.2f}", row.iteration, row.mse,
                              row.occ, row.s3im, row.psnr);
               },
               dir / "checkpoints");
  save_checkpoint(trainer->checkpoint(), dir / "model.ckpt");
  spdlog::info("checkpoint written to {}", (dir / "model.ckpt").string());
  return 0;
}

std::vector<int> parse_views(const std::string& spec, const PosedImageSet& set) {
  if (spec == "holdout") return set.holdout_indices;
  std::vector<int> out;
  if (spec == "all") {
    for (std::size_t v = 0; v < set.view_count(); ++v) out.push_back(int(v));
    return out;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ValidationError("--views: bad view index '" + item + "'");
    }
    if (out.back() < 0 || std::size_t(out.back()) >= set.view_count()) {
      throw ValidationError("--views: index " + item + " out of range");
    }
  }
  return out;
}

int cmd_render(const CommonOptions& o, const std::string& ckpt_path, const std::string& views) {
  nlohmann::json resolved;
  const TrainConfig config = train_config(o, &resolved);
  const PosedImageSet set = dataset_for(config, o);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const CameraState camera = ckpt.camera_state();
  const fs::path dir = out_dir(o, "render_out");
  write_text(dir / "config.resolved.json", resolved.dump(2));
  for (int v : parse_views(views, set)) {
    const auto img = render_view(ckpt, effective_pose(camera, v), camera.intrinsics(), set.width(), set.height());
    write_png_rgb(img.image, dir / fmt::format("{:03}.png", v));
  }
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& ckpt_path) {
  nlohmann::json resolved;
  const TrainConfig config = train_config(o, &resolved);
  const PosedImageSet set = dataset_for(config, o);
  const EvalReport report = eval_report(load_checkpoint(ckpt_path), set);
  const fs::path dir = out_dir(o, "eval_out");
  write_text(dir / "config.resolved.json", resolved.dump(2));
  write_text(dir / "eval.csv", report.csv());
  std::cout << report.table();
  return 0;
}

int cmd_visibility(const CommonOptions& o) {
  nlohmann::json j = load_config(o);
  require_known_keys(j,
                     {"scene", "preset", "dataset", "reference_views", "patch_sides", "patches", "trials",
                      "with_replacement", "seed"},
                     "");
  const std::uint64_t seed = j.value("seed", std::uint64_t{0});
  std::vector<int> values;
  int x_max = 0;
  if (j.contains("dataset")) {
    const PosedImageSet set = load_dataset(resolve_path(j["dataset"].get<std::string>(), o));
    values = approximate_visibility(set.masks);
    x_max = int(set.view_count());
  } else {
    SyntheticScene scene;
    CameraRig rig;
    if (j.contains("scene")) {
      auto d = scene_from_json(j["scene"]);
      scene = d.scene;
      rig = d.rig;
    } else {
      const auto& p = j.contains("preset") ? j["preset"] : nlohmann::json::object();
      require_known_keys(p, {"name", "views", "width", "height", "occluder_radius", "baseline", "target_depth"},
                         "preset");
      DeclutterSceneOptions opt;
      opt.views = p.value("views", opt.views);
      opt.width = p.value("width", opt.width);
      opt.height = p.value("height", opt.height);
      opt.occluder_radius = p.value("occluder_radius", opt.occluder_radius);
      opt.baseline = p.value("baseline", opt.baseline);
      opt.target_depth = p.value("target_depth", opt.target_depth);
      std::tie(scene, rig) = make_declutter_scene(opt);
    }
    std::vector<int> refs;
    if (j.contains("reference_views")) refs = j["reference_views"].get<std::vector<int>>();
    else
      for (std::size_t v = 0; v < rig.view_count(); ++v) refs.push_back(int(v));
    for (int r : refs) {
      const auto vis = pixel_visibility(scene, rig, std::size_t(r));
      values.insert(values.end(), vis.begin(), vis.end());
    }
    x_max = int(rig.view_count());
  }
  auto hist = VisibilityHistogram::from_values(values, x_max);
  hist.fitted_alpha = fit_longtail(hist);
  const auto model = longtail_model(x_max, hist.fitted_alpha);
  const fs::path dir = out_dir(o, "visibility_out");

  std::string csv = "x,count,P,model_P\n";
  const double total = double(hist.total());
  for (int x = 1; x <= x_max; ++x) {
    const auto it = hist.counts.find(x);
    const std::size_t c = it == hist.counts.end() ? 0 : it->second;
    csv += fmt::format("{},{},{:.9g},{:.9g}\n", x, c, double(c) / total, model.at(x));
  }
  write_text(dir / "visibility.csv", csv);

  nlohmann::json summary;
  summary["alpha"] = hist.fitted_alpha;
  summary["x_max"] = x_max;
  summary["pixels"] = hist.total();
  summary["excluded_pixels"] = values.size() - hist.total();
  std::vector<double> pix;
  for (int v : values)
    if (v >= 1) pix.push_back(double(v));
  const int trials = j.value("trials", 1000);
  const int patches = j.value("patches", 1);
  const bool with_replacement = j.value("with_replacement", true);
  for (int k : j.value("patch_sides", std::vector<int>{2, 4, 8})) {
    const auto d = patch_distribution(pix, k, patches, trials, derive_seed(seed, 7, std::uint64_t(k)), with_replacement);
    summary["patches"][std::to_string(k)] = {{"mean", d.mean},
                                             {"variance", d.variance},
                                             {"variance_ratio", d.variance_ratio},
                                             {"expected_ratio", 1.0 / (double(k) * k)},
                                             {"bound_violations", d.bound_violations}};
  }
  write_text(dir / "summary.json", summary.dump(2));

  // Bar chart of P(x): measured bars in gray, fitted model as a dark marker.
  const int bar = 12, gap = 4, height = 160;
  const int width = x_max * (bar + gap) + gap;
  std::vector<std::uint8_t> px(std::size_t(width) * height, 255);
  double peak = 0.0;
  for (int x = 1; x <= x_max; ++x) {
    const auto it = hist.counts.find(x);
    peak = std::max({peak, model.at(x), it == hist.counts.end() ? 0.0 : double(it->second) / total});
  }
  for (int x = 1; x <= x_max; ++x) {
    const auto it = hist.counts.find(x);
    const double p = it == hist.counts.end() ? 0.0 : double(it->second) / total;
    const int h = int(std::round(p / peak * (height - 10)));
    const int mh = int(std::round(model.at(x) / peak * (height - 10)));
    const int x0 = gap + (x - 1) * (bar + gap);
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < bar; ++xx) px[std::size_t(height - 1 - yy) * width + x0 + xx] = 150;
    for (int yy = std::max(0, mh - 1); yy <= mh && yy < height; ++yy)
      for (int xx = 0; xx < bar; ++xx) px[std::size_t(height - 1 - yy) * width + x0 + xx] = 0;
  }
  write_png_gray(px, width, height, dir / "visibility_hist.png");
  write_text(dir / "config.resolved.json", j.dump(2));
  std::cout << fmt::format("fitted alpha = {:.6f} over {} pixels (x_max = {})\n", hist.fitted_alpha, hist.total(),
                           x_max);
  return 0;
}

int cmd_propagate(const CommonOptions& o) {
  nlohmann::json j = load_config(o);
  require_known_keys(j, {"dataset", "source_view", "prompts", "radius", "seed"}, "");
  if (!j.contains("dataset")) throw ValidationError("config key 'dataset': required");
  const PosedImageSet set = load_dataset(resolve_path(j["dataset"].get<std::string>(), o));
  if (!set.points) throw ValidationError("dataset has no points.json; prompt propagation needs a point cloud");
  std::vector<Vec2> prompts;
  for (const auto& p : j.at("prompts")) prompts.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
  const auto result =
      propagate_prompts(prompts, j.value("source_view", 0), *set.points, set, j.value("radius", kDefaultPromptRadius));
  nlohmann::json out;
  out["matched_point"] = result.matched_point;
  out["unmatched_prompts"] = result.unmatched_prompts;
  out["views"] = nlohmann::json::array();
  for (const auto& view : result.per_view) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : view) pts.push_back({p.x(), p.y()});
    out["views"].push_back(pts);
  }
  const fs::path dir = out_dir(o, "prompts_out");
  write_text(dir / "prompts.json", out.dump(2));
  write_text(dir / "config.resolved.json", j.dump(2));
  if (!result.unmatched_prompts.empty()) {
    spdlog::warn("{} prompt(s) had no sparse point within {} px", result.unmatched_prompts.size(),
                 j.value("radius", kDefaultPromptRadius));
  }
  return 0;
}

int cmd_gradcheck(const CommonOptions& o, double eps, int rays) {
  nlohmann::json resolved;
  const TrainConfig config = train_config(o, &resolved);
  GradcheckProblem problem;
  if (config.dataset.empty()) {
    problem = make_toy_problem(rays, std::min(config.samples_per_ray, 16), config.seed);
  } else {
    const PosedImageSet set = dataset_for(config, o);
    FieldConfig field = config.field;
    if (config.auto_bounds) fit_bounds(set, field);
    problem = make_problem(set, field, rays, std::min(config.samples_per_ray, 16), config.seed);
  }
  const auto report = gradient_check(problem, eps);
  if (!o.out.empty()) write_text(fs::path(o.out) / "config.resolved.json", resolved.dump(2));
  std::cout << fmt::format("max relative error {:.3e} (field {:.3e} over {}, camera {:.3e} over {}, {} with a "
                           "reduced step at a ReLU boundary); gated camera gradient {}\n",
                           report.max_relative_error, report.field.max_relative_error, report.field.checked,
                           report.camera.max_relative_error, report.camera.checked, report.kink_shrunk,
                           report.gated_camera_zero ? "exactly zero" : "NONZERO");
  return report.max_relative_error < 1e-3 && report.gated_camera_zero ? 0 : 2;
}

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "JSON configuration file")->required()->check(CLI::ExistingFile);
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--seed", o.seed, "Seed for every random choice (default 0)")
      ->each([&o](const std::string&) { o.seed_given = true; });
  app->add_option("--override", o.overrides, "Config override key.subkey=value (repeatable)");
  app->add_option("--device", o.device, "Backend hint (accepted, currently CPU only)");
}

}  // namespace

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Occlusion-aware radiance field reconstruction toolkit"};
  app.require_subcommand(1);
  CommonOptions o;
  std::string checkpoint, views = "holdout";
  double eps = 1e-4;
  int rays = 64;

  auto* synth = app.add_subcommand("synth", "Render a synthetic posed-image dataset");
  auto* train = app.add_subcommand("train", "Train a radiance field");
  auto* render = app.add_subcommand("render", "Render views from a checkpoint");
  auto* eval = app.add_subcommand("eval", "Masked PSNR/SSIM on holdout views");
  auto* vis = app.add_subcommand("analyze-visibility", "Pixel/patch visibility statistics");
  auto* prop = app.add_subcommand("propagate-masks", "Propagate point prompts across views");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  for (auto* sub : {synth, train, render, eval, vis, prop, grad}) add_common(sub, o);
  train->add_option("--resume", checkpoint, "Continue from this checkpoint");
  render->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  render->add_option("--views", views, "holdout, all, or comma-separated indices");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  grad->add_option("--eps", eps, "Central-difference step");
  grad->add_option("--rays", rays, "Rays in the checked batch (<= 64)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    setup_logging();
    if (!o.device.empty()) spdlog::debug("device hint '{}' ignored (CPU backend)", o.device);
    if (*synth) return cmd_synth(o);
    if (*train) return cmd_train(o, checkpoint);
    if (*render) return cmd_render(o, checkpoint, views);
    if (*eval) return cmd_eval(o, checkpoint);
    if (*vis) return cmd_visibility(o);
    if (*prop) return cmd_propagate(o);
    if (*grad) {
      if (rays < 1 || rays > 64) throw ValidationError("--rays: must be in [1, 64]");
      return cmd_gradcheck(o, eps, rays);
    }
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    spdlog::error("config: {}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 1;
}

}  // namespace declutter
