#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "safnet/checkpoint.hpp"
#include "safnet/trainer.hpp"

using namespace safnet;
using safnet::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("safnet_train_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.model.enc_channels = 4;
  cfg.model.dec_channels = 6;
  cfg.model.dec_groups = 3;
  cfg.model.refine_channels = 4;
  cfg.model.refine_dilations = {1, 2};
  cfg.model.half_res_io = false;
  cfg.s1_crop = 32;
  cfg.s2_window = 16;
  cfg.batch = 1;
  cfg.epochs = 1;
  cfg.lr_max = 2e-3;
  cfg.lr_min = 1e-4;
  cfg.seed = 3;
  return cfg;
}

std::vector<Scene> tiny_scenes(int count, int size = 40) {
  std::vector<Scene> out;
  for (int i = 0; i < count; ++i) {
    SynthOptions o;
    o.seed = 100 + std::uint64_t(i);
    o.height = size;
    o.width = size;
    o.dx = i % 2 ? 2 : 0;
    out.push_back(synth_scene(o));
  }
  return out;
}

// Plain image operations applied one after another.
TensorD crop(const TensorD& x, int top, int left, int n) {
  TensorD out({1, x.c(), n, n});
  for (int c = 0; c < x.c(); ++c)
    for (int y = 0; y < n; ++y)
      for (int v = 0; v < n; ++v) out.at(0, c, y, v) = x.at(0, c, top + y, left + v);
  return out;
}

TensorD mirror_x(const TensorD& x) {
  TensorD out = x;
  for (int c = 0; c < x.c(); ++c)
    for (int y = 0; y < x.h(); ++y)
      for (int v = 0; v < x.w(); ++v) out.at(0, c, y, v) = x.at(0, c, y, x.w() - 1 - v);
  return out;
}

TensorD mirror_y(const TensorD& x) {
  TensorD out = x;
  for (int c = 0; c < x.c(); ++c)
    for (int y = 0; y < x.h(); ++y)
      for (int v = 0; v < x.w(); ++v) out.at(0, c, y, v) = x.at(0, c, x.h() - 1 - y, v);
  return out;
}

// Counter-clockwise: the top-right corner becomes the top-left.
TensorD turn_ccw(const TensorD& x) {
  const int n = x.h();
  TensorD out = x;
  for (int c = 0; c < x.c(); ++c)
    for (int y = 0; y < n; ++y)
      for (int v = 0; v < n; ++v) out.at(0, c, n - 1 - v, y) = x.at(0, c, y, v);
  return out;
}

TensorD reverse_rgb(const TensorD& x) {
  TensorD out = x;
  for (int c = 0; c < x.c(); ++c)
    for (int y = 0; y < x.h(); ++y)
      for (int v = 0; v < x.w(); ++v) out.at(0, c, y, v) = x.at(0, x.c() - 1 - c, y, v);
  return out;
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(2e-4, 1e-5, 0, 101) == 2e-4);
  CHECK(cosine_lr(2e-4, 1e-5, 100, 101) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(2e-4, 1e-5, 50, 101) == doctest::Approx(1.05e-4).epsilon(1e-12));
  CHECK(cosine_lr(2e-4, 1e-5, 0, 1) == 2e-4);
  double prev = 1.0;
  for (long s = 0; s < 1000; ++s) {
    const double lr = cosine_lr(2e-4, 1e-5, s, 1000);
    CHECK(lr <= prev);
    CHECK(lr >= 1e-5);
    prev = lr;
  }
}

TEST_CASE("augmentation equals crop, flips, rotation and channel reversal in order") {
  const TensorD x = random_tensor({1, 3, 7, 9}, 1, 0.0, 1.0);
  std::set<std::vector<double>> distinct;
  for (int fh = 0; fh < 2; ++fh)
    for (int fv = 0; fv < 2; ++fv)
      for (int rot = 0; rot < 4; ++rot)
        for (int rc = 0; rc < 2; ++rc) {
          AugmentDraw d;
          d.top = 2;
          d.left = 3;
          d.flip_h = fh;
          d.flip_v = fv;
          d.rot90 = rot;
          d.reverse_channels = rc;
          TensorD want = crop(x, 2, 3, 5);
          if (fh) want = mirror_x(want);
          if (fv) want = mirror_y(want);
          for (int r = 0; r < rot; ++r) want = turn_ccw(want);
          if (rc) want = reverse_rgb(want);
          const TensorD got = apply_augment(x, d, 5);
          CHECK(got == want);
          distinct.insert({got.values().begin(), got.values().end()});
        }
  // Flips and rotations cover the 8 symmetries of the square, twice each.
  CHECK(distinct.size() == 16);

  AugmentDraw none;
  none.top = 1;
  CHECK(apply_augment(x, none, 5) == crop(x, 1, 0, 5));
  none.left = 5;
  CHECK_THROWS_AS(apply_augment(x, none, 5), ShapeError);
}

TEST_CASE("augment draws stay inside the image") {
  std::mt19937_64 rng(5);
  std::set<int> rots;
  for (int i = 0; i < 200; ++i) {
    const AugmentDraw d = AugmentDraw::sample(rng, 40, 50, 32);
    CHECK((d.top >= 0 && d.top <= 8));
    CHECK((d.left >= 0 && d.left <= 18));
    rots.insert(d.rot90);
  }
  CHECK(rots.size() == 4);
}

TEST_CASE("augmented samples keep exposures and pad small scenes") {
  const Scene s = tiny_scenes(1, 24)[0];
  AugmentDraw d;
  const TrainSample t = augment_sample(s, d, 32);
  CHECK(t.ldr[0].shape() == Shape{1, 3, 32, 32});
  CHECK(t.exposure[2] == 16.0);
  // Inside the original frame the padded crop is a plain copy.
  CHECK(t.gt.at(0, 1, 23, 5) == s.gt->pixels.at(0, 1, 23, 5));
  // Reflection without repeating the edge.
  CHECK(t.gt.at(0, 1, 25, 5) == s.gt->pixels.at(0, 1, 21, 5));
  CHECK(t.gt.at(0, 1, 3, 24) == s.gt->pixels.at(0, 1, 3, 22));
  Scene no_gt = s;
  no_gt.gt.reset();
  CHECK_THROWS_AS(augment_sample(no_gt, d, 32), ContractError);
}

TEST_CASE("train config JSON and validation") {
  const TrainConfig cfg = tiny_train();
  const TrainConfig back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  const TrainConfig partial = TrainConfig::from_json(R"({"batch":2,"s1_crop":256})");
  CHECK(partial.batch == 2);
  CHECK(partial.s1_crop == 256);
  CHECK(partial.s2_window == 128);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"bogus":1})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"s1_crop":100})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"s2_window":96})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"lr_min":1})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"census_patch":4})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"batch":"x"})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json("[]"), ConfigError);
}

TEST_CASE("training on a fixed batch lowers the loss") {
  Trainer<double> tr(tiny_train());
  const auto scenes = tiny_scenes(1);
  const auto batch = tr.next_batch(scenes);
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(tr.train_step(batch, 50).total);
  int rises = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) rises += losses[i] > losses[i - 1];
  CHECK(rises <= 5);
  CHECK(losses.back() < 0.8 * losses.front());
  CHECK(tr.step_count() == 50);
  CHECK(tr.history().size() == 50);
  CHECK(tr.history()[10].lr == cosine_lr(2e-3, 1e-4, 10, 50));
  CHECK(tr.probe_loss(batch).total < losses.back());
}

TEST_CASE("resume continues bit-identically") {
  TempDir dir;
  const auto scenes = tiny_scenes(3);
  TrainConfig cfg = tiny_train();
  cfg.epochs = 2;

  Trainer<float> straight(cfg);
  for (int i = 0; i < 6; ++i) straight.train_step(straight.next_batch(scenes), 6);

  Trainer<float> first(cfg);
  for (int i = 0; i < 3; ++i) first.train_step(first.next_batch(scenes), 6);
  first.save(dir.path / "t.ckpt");
  Trainer<float> second = Trainer<float>::resume(dir.path / "t.ckpt");
  CHECK(second.step_count() == 3);
  REQUIRE(second.history().size() == 3);
  CHECK(second.history()[2].loss.total == first.history()[2].loss.total);
  for (int i = 0; i < 3; ++i) second.train_step(second.next_batch(scenes), 6);

  for (int i = 0; i < 6; ++i) {
    CHECK(second.history()[i].loss.total == straight.history()[i].loss.total);
  }
  CHECK(second.net().weights().to_tensors() == straight.net().weights().to_tensors());

  save_model(dir.path / "m.ckpt", cfg.model, straight.net().weights());
  CHECK_THROWS_AS(Trainer<float>::resume(dir.path / "m.ckpt"), CheckpointError);
}

TEST_CASE("fit writes checkpoints and metrics") {
  TempDir dir;
  const auto scenes = tiny_scenes(2);
  TrainConfig cfg = tiny_train();
  cfg.epochs = 2;
  cfg.checkpoint_every = 1;
  Trainer<float> tr(cfg);
  int calls = 0;
  const FitResult r = fit(tr, scenes, {scenes[0]}, {dir.path / "run", [&](const StepRecord&) {
                                                      ++calls;
                                                    }});
  CHECK(calls == 4);
  CHECK(r.history.size() == 4);
  CHECK(r.history.back().eval_psnr_mu.has_value());
  CHECK(!r.history.front().eval_psnr_mu.has_value());
  CHECK(fs::exists(dir.path / "run" / "last.ckpt"));
  std::ifstream csv(dir.path / "run" / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,lr,l1_r,perc_r,l1_m,census_m,total,eval_psnr_mu");
  int lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 4);

  // A finished schedule does nothing more.
  Trainer<float> done = Trainer<float>::resume(r.checkpoint);
  fit(done, scenes, {}, {});
  CHECK(done.step_count() == 4);
}

TEST_CASE("zero epochs leave the weights untouched") {
  TrainConfig cfg = tiny_train();
  cfg.epochs = 0;
  Trainer<double> tr(cfg);
  const auto before = tr.net().weights().to_tensors();
  const FitResult r = fit(tr, tiny_scenes(1), {}, {});
  CHECK(r.history.empty());
  CHECK(tr.net().weights().to_tensors() == before);
  CHECK(tr.net().weights().to_tensors() == Weights<double>::init(cfg.model, cfg.seed).to_tensors());
}

TEST_CASE("a non-finite loss raises before the update") {
  Trainer<double> tr(tiny_train());
  auto batch = tr.next_batch(tiny_scenes(1));
  batch[0].gt[5] = std::nan("");
  const auto before = tr.net().weights().to_tensors();
  CHECK_THROWS_AS(tr.train_step(batch, 10), DivergenceError);
  CHECK(tr.net().weights().to_tensors() == before);
  CHECK(tr.step_count() == 0);

  TempDir dir;
  Scene bad = tiny_scenes(1)[0];
  for (auto& v : bad.gt->pixels.values()) v = std::nan("");
  Trainer<double> fitted(tiny_train());
  CHECK_THROWS_AS(fit(fitted, {bad}, {}, {dir.path / "div"}), DivergenceError);
  CHECK(fs::exists(dir.path / "div" / "last.ckpt"));
}
