// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "ver/analysis.hpp"
#include "ver/moe.hpp"
#include "ver/tensor.hpp"

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  const ver::Tensor a = ver::Tensor::randn({n, n}, rng);
  const ver::Tensor b = ver::Tensor::randn({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ver::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(256);

void BM_MoeForward(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(2);
  const std::size_t width = 32, rows = 128, experts = 6;
  ver::MoeLayer layer(width, 4 * width, experts, rng, 0.1);
  ver::NoisyGate gate(width, width, experts, rng, 0.5);
  const ver::Tensor x = ver::Tensor::randn({rows, width}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ver::moe_forward(layer, x, gate, k, false, nullptr).output);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows));
}
BENCHMARK(BM_MoeForward)->DenseRange(1, 6);

void BM_KsgMutualInformation(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  const ver::Tensor x = ver::Tensor::randn({n, 5}, rng);
  const ver::Tensor y = ver::Tensor::randn({n, 5}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ver::knn_mutual_information(x, y, 3, 4).value);
}
BENCHMARK(BM_KsgMutualInformation)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
