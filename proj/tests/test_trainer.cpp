#include "helpers.hpp"

#include "declutter/scene.hpp"
#include "declutter/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace declutter;
using namespace declutter::test;

namespace {

const PosedImageSet& tiny_set() {
  static const PosedImageSet set = [] {
    auto [scene, rig] = make_declutter_scene({4, 16, 16, 0.45});
    SynthOptions opt;
    opt.samples_per_ray = 32;
    opt.point_stride = 0;
    opt.holdout_indices = std::vector<int>{2};
    return synthesize_dataset(scene, rig, opt);
  }();
  return set;
}

TrainConfig tiny_config(AblationMode mode, long iterations = 40) {
  nlohmann::json j = {{"iterations", iterations},
                      {"batch_size", 64},
                      {"samples_per_ray", 8},
                      {"log_every", 1},
                      {"ablation_mode", to_string(mode)},
                      {"field", {{"depth", 2}, {"width", 16}, {"skip_layer", 1}, {"l_pos", 4}, {"l_dir", 2}}},
                      {"schedule", {{"t_end", 3}}},
                      {"s3im", {{"patch_side", 4}, {"window", 2}, {"stride", 2}}}};
  return train_config_from_json(j);
}

}  // namespace

TEST_CASE("ablation mode names") {
  CHECK(ablation_from_string("masked_nerf") == AblationMode::kMaskedNerf);
  CHECK(ablation_from_string("i") == AblationMode::kMaskedNerf);
  CHECK(ablation_from_string("+camera") == AblationMode::kCamera);
  CHECK(ablation_from_string("iii") == AblationMode::kOar);
  CHECK(ablation_from_string("s3im") == AblationMode::kS3im);
  CHECK_THROWS_AS(ablation_from_string("v"), ValidationError);
  for (auto m : {AblationMode::kMaskedNerf, AblationMode::kCamera, AblationMode::kOar, AblationMode::kS3im})
    CHECK(ablation_from_string(to_string(m)) == m);

  const auto i = terms_for(AblationMode::kMaskedNerf);
  CHECK_FALSE((i.camera || i.occlusion || i.s3im));
  const auto iv = terms_for(AblationMode::kS3im);
  CHECK((iv.camera && iv.occlusion && iv.s3im));
}

TEST_CASE("train config JSON") {
  const TrainConfig a = train_config_from_json({{"iterations", 200000}});
  CHECK(a.schedule.t_freq_end == 20000);
  CHECK(a.schedule.t_c == 40000);
  CHECK(a.schedule.t_end() == 200);
  CHECK(a.lr_field == 5e-4);

  const TrainConfig b = tiny_config(AblationMode::kOar);
  const TrainConfig c = train_config_from_json(to_json(b));
  CHECK(to_json(c) == to_json(b));
  CHECK(config_hash(c) == config_hash(b));
  TrainConfig d = b;
  d.seed = 1;
  CHECK(config_hash(d) != config_hash(b));

  try {
    train_config_from_json({{"field", {{"widht", 3}}}});
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("field.widht") != std::string::npos);
  }
  CHECK_THROWS_AS(train_config_from_json({{"batch_size", 0}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json({{"iterations", 200}}), ValidationError);
}

TEST_CASE("derived seeds separate streams and counters") {
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
  CHECK(derive_seed(1, 2, 3) != derive_seed(1, 2, 4));
  CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 3));
  CHECK(derive_seed(1, 2, 3) != derive_seed(2, 2, 3));
}

TEST_CASE("loss terms and camera updates follow the ablation matrix") {
  for (auto mode : {AblationMode::kMaskedNerf, AblationMode::kCamera, AblationMode::kOar, AblationMode::kS3im}) {
    CAPTURE(to_string(mode));
    const TrainConfig cfg = tiny_config(mode);
    Trainer trainer(cfg, tiny_set());
    const auto initial = trainer.checkpoint().camera;
    const auto terms = terms_for(mode);
    bool camera_moved_early = false;
    for (long t = 1; t <= cfg.iterations; ++t) {
      const LogRow row = trainer.step();
      if (terms.occlusion && t > cfg.schedule.t_start) {
        CHECK(row.occ > 0.0);
      } else {
        CHECK(row.occ == 0.0);
      }
      if (terms.s3im) CHECK(row.s3im > 0.0);
      else CHECK(row.s3im == 0.0);
      if (t < cfg.schedule.t_c) camera_moved_early |= trainer.checkpoint().camera != initial;
    }
    CHECK_FALSE(camera_moved_early);
    CHECK((trainer.checkpoint().camera != initial) == terms.camera);
  }
}

TEST_CASE("frozen focal lengths") {
  TrainConfig cfg = tiny_config(AblationMode::kCamera);
  cfg.learn_focal = false;
  Trainer trainer(cfg, tiny_set());
  const auto before = trainer.camera_state();
  trainer.run();
  const auto after = trainer.camera_state();
  CHECK(after.log_fx == before.log_fx);
  CHECK(after.log_fy == before.log_fy);
  CHECK(after.rotations != before.rotations);
}

TEST_CASE("training never reads holdout views") {
  Trainer trainer(tiny_config(AblationMode::kS3im, 20), tiny_set());
  trainer.run();
  CHECK(trainer.touched_views() == std::set<int>{0, 1, 3});
}

TEST_CASE("identical seeds reproduce the logs") {
  const TrainConfig cfg = tiny_config(AblationMode::kS3im, 25);
  Trainer a(cfg, tiny_set()), b(cfg, tiny_set());
  const auto ra = a.run(), rb = b.run();
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(to_csv(ra[i]) == to_csv(rb[i]));
  TrainConfig other = cfg;
  other.seed = 9;
  Trainer c(other, tiny_set());
  CHECK(to_csv(c.run().back()) != to_csv(ra.back()));
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
  const TrainConfig cfg = tiny_config(AblationMode::kS3im, 30);
  Trainer full(cfg, tiny_set());
  const auto reference = full.run();

  Trainer first(cfg, tiny_set());
  first.run(17);
  const auto path = scratch_dir("resume") / "mid.ckpt";
  save_checkpoint(first.checkpoint(), path);
  Trainer second(load_checkpoint(path), tiny_set());
  CHECK(second.iteration() == 17);
  const auto rest = second.run();
  REQUIRE(rest.size() == reference.size() - 17);
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const LogRow& a = rest[i];
    const LogRow& b = reference[17 + i];
    CHECK(a.iteration == b.iteration);
    for (auto [x, y] : {std::pair{a.mse, b.mse}, {a.occ, b.occ}, {a.s3im, b.s3im}, {a.total, b.total}})
      CHECK(std::abs(x - y) <= 1e-6 * std::max(std::abs(y), 1e-30));
  }
}

TEST_CASE("checkpoint files") {
  Trainer trainer(tiny_config(AblationMode::kCamera, 10), tiny_set());
  trainer.run();
  const Checkpoint ck = trainer.checkpoint();
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(ck, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.iteration == ck.iteration);
  CHECK(back.field == ck.field);
  CHECK(back.camera == ck.camera);
  CHECK(back.adam_v_field == ck.adam_v_field);
  CHECK(back.adam_m_camera == ck.adam_m_camera);
  CHECK(back.near == ck.near);
  CHECK(back.initial_intrinsics == ck.initial_intrinsics);
  CHECK(to_json(back.config) == to_json(ck.config));

  std::filesystem::copy_file(dir / "a.ckpt", dir / "bad_magic.ckpt");
  {
    std::fstream f(dir / "bad_magic.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad_magic.ckpt"), ValidationError);

  std::filesystem::copy_file(dir / "a.ckpt", dir / "short.ckpt");
  std::filesystem::resize_file(dir / "short.ckpt", std::filesystem::file_size(dir / "a.ckpt") - 16);
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), ValidationError);

  // Edit the stored config without updating its hash.
  std::ifstream in(dir / "a.ckpt", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  const auto pos = bytes.find("\"batch_size\":64");
  REQUIRE(pos != std::string::npos);
  bytes.replace(pos, 15, "\"batch_size\":65");
  std::ofstream(dir / "edited.ckpt", std::ios::binary) << bytes;
  CHECK_THROWS_AS(load_checkpoint(dir / "edited.ckpt"), ValidationError);

  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), std::exception);
}

TEST_CASE("non-finite losses abort with the iteration") {
  PosedImageSet set = tiny_set();
  for (auto& v : set.images[0].data) v = std::nanf("");
  Trainer trainer(tiny_config(AblationMode::kMaskedNerf, 10), set);
  try {
    trainer.step();
    FAIL("expected a failure");
  } catch (const RuntimeFailure& e) {
    const std::string msg = e.what();
    CHECK(msg.find("iteration 1") != std::string::npos);
    CHECK(msg.find("mse") != std::string::npos);
  }
}

TEST_CASE("render_view") {
  Trainer trainer(tiny_config(AblationMode::kS3im, 5), tiny_set());
  const Checkpoint ck = trainer.checkpoint();
  const auto cam = ck.camera_state();
  const auto a = render_view(ck, effective_pose(cam, 2), cam.intrinsics(), 16, 16, true);
  const auto b = render_view(ck, effective_pose(cam, 2), cam.intrinsics(), 16, 16);
  CHECK(a.image == b.image);
  for (float v : a.image.data) CHECK(std::isfinite(v));
  CHECK(a.sigma.size() == 16u * 16u * std::size_t(a.samples));
  CHECK(b.sigma.empty());

  RenderSettings chunked;
  chunked.near = ck.near;
  chunked.far = ck.far;
  chunked.samples = ck.config.samples_per_ray;
  chunked.chunk = 7;
  const auto c = render_view(trainer.field(), trainer.field_parameters(), cam.intrinsics(), effective_pose(cam, 2), 16,
                             16, chunked);
  for (std::size_t i = 0; i < c.image.data.size(); ++i) CHECK(c.image.data[i] == doctest::Approx(a.image.data[i]));
}

TEST_CASE("fit_bounds covers the training frusta") {
  FieldConfig f;
  fit_bounds(tiny_set(), f);
  CHECK(f.bound_radius > 0.0);
  const auto& set = tiny_set();
  for (int v : set.training_views()) {
    const Vec3 ray = set.poses[v].rotation *
                     Vec3(-set.intrinsics.cx / set.intrinsics.fx, -set.intrinsics.cy / set.intrinsics.fy, 1).normalized();
    const Vec3 corner = set.poses[v].center + set.far * ray;
    CHECK(((corner - f.bound_center) / f.bound_radius).cwiseAbs().maxCoeff() <= 1.0 + 1e-9);
  }
}

TEST_CASE("metrics CSV rows") {
  CHECK(metrics_csv_header() == "iter,mse,occ,s3im,w_occ,f_max,psnr_val");
  LogRow r;
  r.iteration = 7;
  const std::string line = to_csv(r);
  CHECK(line.rfind("7,", 0) == 0);
  CHECK(std::count(line.begin(), line.end(), ',') == 6);
}
