#include <cmath>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "safnet/losses.hpp"
#include "safnet/model.hpp"
#include "safnet/ops.hpp"
#include "safnet/warpgrid.hpp"

using namespace safnet;
using ag::Var;
using safnet::testing::grad_check;
using safnet::testing::random_tensor;

namespace {

// Parameter total counted layer by layer from the architecture description.
std::size_t expected_params(const ModelConfig& cfg) {
  const std::size_t c = cfg.enc_channels, d = cfg.dec_channels, g = cfg.dec_groups,
                    r = cfg.refine_channels;
  auto conv = [](std::size_t cin, std::size_t cout, std::size_t groups, bool prelu) {
    return cout * (cin / groups) * 9 + cout + (prelu ? cout : 0);
  };
  std::size_t n = conv(6, c, 1, true) + conv(c, c, 1, true);
  for (int l = 2; l <= cfg.levels; ++l) n += 2 * conv(c, c, 1, true);
  n += conv(6 + 3 * c, d, 1, true) + 3 * conv(d, d, g, true) + conv(d, d, 1, true);
  n += d * 6 * 16 + 6;
  n += 2 * (conv(6, r, 1, true) + conv(r, r, 1, true));
  n += conv(6 + 2 + 2 + 1 + 1 + 3, r, 1, true) + conv(r, r, 1, true);
  n += conv(3 * r, r, 1, true);
  n += cfg.refine_dilations.size() * conv(r, r, 1, true);
  n += conv(r, 3, 1, false);
  return n;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.enc_channels = 4;
  cfg.dec_channels = 6;
  cfg.dec_groups = 3;
  cfg.refine_channels = 4;
  cfg.refine_dilations = {1, 2};
  cfg.half_res_io = false;
  return cfg;
}

std::array<TensorD, 3> random_frames(int n, int h, int w, std::uint64_t seed) {
  return {random_tensor({n, 3, h, w}, seed, 0.05, 0.95),
          random_tensor({n, 3, h, w}, seed + 1, 0.05, 0.95),
          random_tensor({n, 3, h, w}, seed + 2, 0.05, 0.95)};
}

template <typename T>
FrameBatch<T> make_batch(const std::array<TensorD, 3>& f) {
  const int n = f[0].n();
  std::array<std::vector<double>, 3> t{std::vector<double>(n, 1.0), std::vector<double>(n, 4.0),
                                       std::vector<double>(n, 16.0)};
  return FrameBatch<T>::make({f[0].cast<T>(), f[1].cast<T>(), f[2].cast<T>()}, t, 2.2);
}

}  // namespace

TEST_CASE("parameter counts") {
  const ModelConfig full = ModelConfig::for_variant(Variant::SafNet);
  const ModelConfig small = ModelConfig::for_variant(Variant::SafNetS);
  const auto wf = Weights<float>::zeros(full);
  const auto ws = Weights<float>::zeros(small);
  CHECK(wf.parameter_count() == expected_params(full));
  CHECK(ws.parameter_count() == expected_params(small));
  CHECK(wf.parameter_count() == 1168729);
  CHECK(ws.parameter_count() == 622393);
  // The decoder is stored once and shared by every level.
  CHECK(wf.parameter_count("decoder.") == 408006);
  CHECK(ws.parameter_count() < wf.parameter_count());
  std::set<std::string> names;
  for (const auto& [name, v] : wf.entries()) CHECK(names.insert(name).second);
}

TEST_CASE("model config validation and JSON") {
  ModelConfig cfg;
  CHECK(cfg.divisor() == 32);
  cfg.half_res_io = false;
  CHECK(cfg.divisor() == 16);
  CHECK(ModelConfig::from_json(cfg.to_json()) == cfg);
  const ModelConfig s = ModelConfig::from_json(R"({"variant":"safnet-s","refine_channels":40})");
  CHECK(s.refine_blocks == RefineBlock::Plain);
  CHECK(s.refine_channels == 40);
  CHECK(s.variant() == Variant::SafNetS);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"levels":3})"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"dec_channels":100})"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"colour":1})"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"variant":"huge"})"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json("[1]"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json("{"), ConfigError);
}

TEST_CASE("weights initialisation") {
  const ModelConfig cfg = tiny_config();
  const auto a = Weights<double>::init(cfg, 3);
  const auto b = Weights<double>::init(cfg, 3);
  const auto c = Weights<double>::init(cfg, 4);
  CHECK(a.to_tensors() == b.to_tensors());
  CHECK(a.to_tensors() != c.to_tensors());
  CHECK(a.get("refine.fuse.prelu").value()[0] == 0.25);
  CHECK(a.get("decoder.conv0.bias").value()[0] == 0.0);
  // He fan-in scaling on the widest layer.
  const auto big = Weights<double>::init(ModelConfig{}, 1);
  const TensorD& w = big.get("refine.fuse.weight").value();
  double ss = 0;
  for (double v : w.values()) ss += v * v;
  CHECK(std::sqrt(ss / w.size()) == doctest::Approx(std::sqrt(2.0 / (240 * 9))).epsilon(0.02));

  auto tensors = a.to_tensors();
  CHECK(Weights<double>::from_tensors(cfg, tensors).to_tensors() == tensors);
  tensors.pop_back();
  CHECK_THROWS_AS(Weights<double>::from_tensors(cfg, tensors), CheckpointError);
  CHECK_THROWS_AS(SafNet<double>(ModelConfig{}, a), ConfigError);

  Weights<double> d = a.clone();
  d.get("refine.out.bias").mutable_value()[0] = 7;
  CHECK(a.get("refine.out.bias").value()[0] == 0);
  CHECK(a.cast<float>().cast<double>().to_tensors().size() == tensors.size() + 1);
}

TEST_CASE("zero decoder gives zero flow and half masks") {
  const ModelConfig cfg = ModelConfig::for_variant(Variant::SafNetS);
  Weights<double> w = Weights<double>::init(cfg, 11);
  for (auto& [name, v] : w.entries()) {
    if (name.rfind("decoder.", 0) == 0 && name.find(".prelu") == std::string::npos) {
      v.mutable_value().set_zero();
    }
  }
  const SafNet<double> net(cfg, w);
  const auto frames = random_frames(1, 64, 64, 20);
  const NetworkOutput<double> out = net.stage1(make_batch<double>(frames));
  for (double v : out.flow21.value().values()) REQUIRE(v == 0.0);
  for (double v : out.flow23.value().values()) REQUIRE(v == 0.0);
  for (double v : out.mask1.value().values()) REQUIRE(v == 0.5);
  for (double v : out.mask3.value().values()) REQUIRE(v == 0.5);
}

TEST_CASE("zero final refiner conv returns the merge") {
  const ModelConfig cfg = ModelConfig::for_variant(Variant::SafNetS);
  Weights<float> w = Weights<float>::init(cfg, 12);
  w.get("refine.out.weight").mutable_value().set_zero();
  w.get("refine.out.bias").mutable_value().set_zero();
  const SafNet<float> net(cfg, w);
  const FrameBatch<float> batch = make_batch<float>(random_frames(2, 64, 64, 30));
  const NetworkOutput<float> a = net.forward(batch);
  CHECK(a.refined.value() == a.merged.value());
  const NetworkOutput<float> b = net.forward_windowed(batch, 32);
  CHECK(b.refined.value() == b.merged.value());
}

TEST_CASE("masks stay in [0, 1] and the refined output is nonnegative") {
  const ModelConfig cfg = ModelConfig::for_variant(Variant::SafNetS);
  Weights<float> w = Weights<float>::init(cfg, 13);
  for (auto& v : w.get("refine.out.bias").mutable_value().values()) v = -0.5f;
  const SafNet<float> net(cfg, w);
  const NetworkOutput<float> out = net.forward(make_batch<float>(random_frames(1, 64, 96, 40)));
  for (float v : out.mask1.value().values()) REQUIRE((v >= 0 && v <= 1));
  for (float v : out.mask3.value().values()) REQUIRE((v >= 0 && v <= 1));
  bool clamped = false;
  for (float v : out.refined.value().values()) {
    REQUIRE(v >= 0);
    clamped = clamped || v == 0;
  }
  CHECK(clamped);
}

TEST_CASE("identical consistent frames merge to the common radiance") {
  const ModelConfig cfg = ModelConfig::for_variant(Variant::SafNet);
  const SafNet<double> net(cfg, Weights<double>::init(cfg, 14));
  // Radiance dim enough that no frame clips at t = 16.
  const TensorD h = random_tensor({1, 3, 40, 40}, 50, 0.001, 0.06);
  std::array<LdrImage, 3> l;
  const double t[3] = {1, 4, 16};
  for (int i = 0; i < 3; ++i) l[i] = linear_to_ldr(LinearImage{h}, t[i]);
  const FusionResult r = forward_full(l[0], l[1], l[2], net);
  REQUIRE(r.merged.pixels.shape() == h.shape());
  REQUIRE(r.refined.pixels.shape() == h.shape());
  REQUIRE(r.flow21.uv.shape() == Shape{1, 2, 40, 40});
  REQUIRE(r.mask3.m.shape() == Shape{1, 1, 40, 40});
  // Warping mixes neighbouring pixels, so the bound holds only for zero flow.
  const FusionResult r0 = forward_full(l[0], l[1], l[2],
                                       SafNet<double>(cfg, Weights<double>::zeros(cfg)));
  for (std::size_t i = 0; i < h.size(); ++i) {
    REQUIRE(std::abs(r0.merged.pixels[i] - h[i]) <= 1e-6);
  }
}

TEST_CASE("frame size divisibility") {
  const ModelConfig cfg = ModelConfig::for_variant(Variant::SafNetS);
  const SafNet<float> net(cfg, Weights<float>::init(cfg, 15));
  CHECK_THROWS_AS(net.stage1(make_batch<float>(random_frames(1, 48, 64, 60))), ShapeError);
  CHECK_THROWS_AS(net.forward_windowed(make_batch<float>(random_frames(1, 64, 64, 61)), 48),
                  PartitionError);
  CHECK_THROWS_AS(net.encode(Var<float>(TensorF({1, 6, 24, 32}))), ShapeError);
}

TEST_CASE("forward_full pads internally and is deterministic") {
  const ModelConfig cfg = ModelConfig::for_variant(Variant::SafNetS);
  const SafNet<double> net(cfg, Weights<double>::init(cfg, 16));
  const auto f = random_frames(1, 45, 70, 70);
  const LdrImage l1{f[0], 1.0}, l2{f[1], 4.0}, l3{f[2], 16.0};
  const FusionResult a = forward_full(l1, l2, l3, net);
  const FusionResult b = forward_full(l1, l2, l3, net);
  CHECK(a.refined.pixels.shape() == Shape{1, 3, 45, 70});
  CHECK(a.refined.pixels == b.refined.pixels);
  CHECK(a.flow23.uv == b.flow23.uv);
  CHECK_THROWS_AS(forward_full(l1, LdrImage{f[1], 0.0}, l3, net), InvalidExposure);
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
  const TensorD x({1, 1, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const TensorD p = reflect_pad(x, 4, 6);
  const double expect[4][6] = {
      {1, 2, 3, 2, 1, 2}, {4, 5, 6, 5, 4, 5}, {1, 2, 3, 2, 1, 2}, {4, 5, 6, 5, 4, 5}};
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 6; ++xx) CHECK(p.at(0, 0, y, xx) == expect[y][xx]);
  CHECK_THROWS_AS(reflect_pad(x, 1, 3), ShapeError);
}

TEST_CASE("training path on one window equals the eval path") {
  const ModelConfig cfg = ModelConfig::for_variant(Variant::SafNet);
  const SafNet<float> net(cfg, Weights<float>::init(cfg, 17));
  const FrameBatch<float> batch = make_batch<float>(random_frames(1, 128, 128, 80));
  const NetworkOutput<float> eval = net.forward(batch);
  const NetworkOutput<float> train = net.forward_windowed(batch, 128);
  CHECK(eval.refined.value() == train.refined.value());
  CHECK(eval.merged.value() == train.merged.value());
}

TEST_CASE("decoder steps double the resolution") {
  const ModelConfig cfg = tiny_config();
  const SafNet<double> net(cfg, Weights<double>::init(cfg, 18));
  const FeaturePyramid<double> p = net.encode(Var<double>(random_tensor({1, 6, 32, 32}, 90)));
  REQUIRE(p.levels.size() == 4);
  CHECK(p.levels[0].shape() == Shape{1, 4, 16, 16});
  CHECK(p.levels[3].shape() == Shape{1, 4, 2, 2});
  const auto s = DecoderState<double>::initial(1, 2, 2, 4);
  const auto next = net.decode_step(s, p.levels[3], p.levels[3], p.levels[3]);
  CHECK(next.level == 3);
  CHECK(next.flow21.shape() == Shape{1, 2, 4, 4});
  CHECK(next.mask3.shape() == Shape{1, 1, 4, 4});
  CHECK_THROWS_AS(net.decode_step(DecoderState<double>::initial(1, 2, 2, 0), p.levels[3],
                                  p.levels[3], p.levels[3]),
                  ContractError);
}

TEST_CASE("end-to-end parameter gradients") {
  const ModelConfig cfg = tiny_config();
  Weights<double> w = Weights<double>::init(cfg, 19);
  // Nonzero decoder biases move the flows off the integer grid.
  for (auto& v : w.get("decoder.deconv.bias").mutable_value().values()) v = 0.37;
  const SafNet<double> net(cfg, w);
  const auto frames = random_frames(1, 32, 32, 100);
  const FrameBatch<double> batch = make_batch<double>(frames);
  const Var<double> gt(random_tensor({1, 3, 32, 32}, 103, 0.0, 0.9));
  const RandomConvFeatures<double> fx(7, {4, 4});
  std::vector<std::pair<std::string, Var<double>>> leaves;
  for (const auto& [name, v] : net.weights().entries()) {
    if (name.find(".bias") != std::string::npos && name.rfind("decoder.deconv", 0) != 0) continue;
    leaves.emplace_back(name, v);
  }
  const auto r = grad_check(leaves, [&] {
    const NetworkOutput<double> out = net.forward_windowed(batch, 16);
    return total_loss(out.refined, out.merged, gt, fx, cfg.mu).total;
  }, 2, 5, 1e-6, 1e-6);
  CHECK_MESSAGE(r.max_rel_error < 1e-3, r.worst);
  CHECK(r.checked > 50);
}
