#include <benchmark/benchmark.h>

#include <random>

#include "safnet/losses.hpp"
#include "safnet/model.hpp"
#include "safnet/ops.hpp"
#include "safnet/warpgrid.hpp"

using namespace safnet;
using ag::Var;

namespace {

template <typename T>
Tensor<T> noise(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  const Var<float> x(noise<float>({1, c, n, n}, 1));
  const Var<float> w(noise<float>({c, c, 3, 3}, 2, -0.1, 0.1));
  const Var<float> b(Tensor<float>({1, c, 1, 1}));
  ag::NoGradGuard no_grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::conv2d(x, w, b, {1, 1, 1, 1}).value().data());
  }
  state.SetItemsProcessed(state.iterations() * int64_t(n) * n * c * c * 9);
}
BENCHMARK(BM_Conv3x3)->Args({40, 128})->Args({80, 128})->Unit(benchmark::kMillisecond);

void BM_Conv3x3Backward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  Var<float> x(noise<float>({1, c, n, n}, 1), true);
  Var<float> w(noise<float>({c, c, 3, 3}, 2, -0.1, 0.1), true);
  Var<float> b(Tensor<float>({1, c, 1, 1}), true);
  for (auto _ : state) {
    ag::backward(ops::mean_abs_diff(ops::conv2d(x, w, b, {1, 1, 1, 1}), x));
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_Conv3x3Backward)->Args({40, 64})->Unit(benchmark::kMillisecond);

void BM_BackwardWarp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Tensor<float> src = noise<float>({1, 3, n, n}, 3);
  const Tensor<float> flow = noise<float>({1, 2, n, n}, 4, -8.0, 8.0);
  for (auto _ : state) benchmark::DoNotOptimize(backward_warp(src, flow).data());
  state.SetItemsProcessed(state.iterations() * int64_t(n) * n);
}
BENCHMARK(BM_BackwardWarp)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_CensusLoss(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Var<float> a(noise<float>({1, 3, n, n}, 5));
  const Var<float> b(noise<float>({1, 3, n, n}, 6));
  ag::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(census_loss(a, b).value().data());
}
BENCHMARK(BM_CensusLoss)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Forward(benchmark::State& state) {
  const ModelConfig cfg =
      ModelConfig::for_variant(state.range(0) ? Variant::SafNetS : Variant::SafNet);
  const int n = static_cast<int>(state.range(1));
  const SafNet<float> net(cfg, Weights<float>::init(cfg, 1));
  const FrameBatch<float> batch = FrameBatch<float>::make(
      {noise<float>({1, 3, n, n}, 7), noise<float>({1, 3, n, n}, 8),
       noise<float>({1, 3, n, n}, 9)},
      {std::vector<double>{1.0}, {4.0}, {16.0}}, kDefaultGamma);
  ag::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(batch).refined.value().data());
  state.SetLabel(std::string(to_string(cfg.variant())));
}
BENCHMARK(BM_Forward)->Args({0, 256})->Args({1, 256})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
