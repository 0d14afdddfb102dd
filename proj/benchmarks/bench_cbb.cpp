// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "cbb/block.hpp"
#include "cbb/kernels.hpp"
#include "cbb/scm.hpp"

using namespace cbb;

namespace {

Tensor gaussian(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = g(rng);
  return t;
}

// Args: channels, side (N = side²), batch.
void configure(benchmark::internal::Benchmark* b) {
  b->Args({32, 4, 50})->Args({64, 8, 16})->Args({128, 8, 8})->Unit(benchmark::kMicrosecond);
}

void BM_Forward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), side = static_cast<std::size_t>(state.range(1));
  CbbParams p = init_params({.channels = c, .seed = 1});
  const Tensor x = gaussian({static_cast<std::size_t>(state.range(2)), side * side, c}, 2);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(cbb_forward(tape, tape.constant(x), p, side, side).out.value().data().data());
  }
}
BENCHMARK(BM_Forward)->Apply(configure);

void BM_ForwardBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), side = static_cast<std::size_t>(state.range(1));
  CbbParams p = init_params({.channels = c, .seed = 1});
  p.set_requires_grad(true);
  const Tensor x = gaussian({static_cast<std::size_t>(state.range(2)), side * side, c}, 2);
  for (auto _ : state) {
    Tape tape;
    tape.backward(sum(cbb_forward(tape, tape.constant(x), p, side, side).out));
  }
}
BENCHMARK(BM_ForwardBackward)->Apply(configure);

void BM_Infer(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), side = static_cast<std::size_t>(state.range(1));
  const CbbParams p = init_params({.channels = c, .seed = 1});
  const ProjectionCache cache = precompute_projection(p);
  const Tensor x = gaussian({static_cast<std::size_t>(state.range(2)), side * side, c}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(cbb_infer(x, p, cache, side, side).data().data());
}
BENCHMARK(BM_Infer)->Apply(configure);

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), side = static_cast<std::size_t>(state.range(1));
  const Tensor x = gaussian({static_cast<std::size_t>(state.range(2)), c, side, side}, 3);
  const Tensor w = gaussian({c, c, 3, 3}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d(x, w).data().data());
}
BENCHMARK(BM_Conv2d)->Apply(configure);

void BM_Frontdoor(benchmark::State& state) {
  const int card = static_cast<int>(state.range(0));
  const causal::Scm s = causal::random_scm(card, card, card, card, 5);
  for (auto _ : state)
    for (int x = 0; x < card; ++x) benchmark::DoNotOptimize(causal::frontdoor(s, x).data());
}
BENCHMARK(BM_Frontdoor)->Arg(2)->Arg(4)->Arg(8);

}  // namespace

BENCHMARK_MAIN();
