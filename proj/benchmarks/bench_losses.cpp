#include <benchmark/benchmark.h>

#include "cassle/sslcore.hpp"

using namespace cassle;

namespace {

torch::Tensor unit_rows(int64_t n, int64_t d, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  auto x = torch::randn({n, d}, gen);
  return x / x.norm(2, 1, true);
}

void BM_NtXent(benchmark::State& state) {
  const auto z1 = unit_rows(state.range(0), 128, 1).requires_grad_(true);
  const auto z2 = unit_rows(state.range(0), 128, 2).requires_grad_(true);
  for (auto _ : state) {
    auto loss = ssl::nt_xent(z1, z2, 0.5);
    loss.backward();
    benchmark::DoNotOptimize(loss.item<float>());
  }
}
BENCHMARK(BM_NtXent)->Arg(64)->Arg(256);

void BM_InfoNceQueue(benchmark::State& state) {
  const auto q = unit_rows(256, 128, 3).requires_grad_(true);
  const auto k = unit_rows(256, 128, 4);
  const auto queue = unit_rows(state.range(0), 128, 5);
  for (auto _ : state) {
    auto loss = ssl::info_nce(q, k, queue, 0.2);
    loss.backward();
    benchmark::DoNotOptimize(loss.item<float>());
  }
}
BENCHMARK(BM_InfoNceQueue)->Arg(4096)->Arg(16384);

void BM_BarlowTwins(benchmark::State& state) {
  auto gen = at::detail::createCPUGenerator(6);
  auto z1 = torch::randn({256, state.range(0)}, gen);
  auto z2 = torch::randn({256, state.range(0)}, gen);
  z1 = ((z1 - z1.mean(0)) / z1.std(0, false)).requires_grad_(true);
  z2 = ((z2 - z2.mean(0)) / z2.std(0, false)).requires_grad_(true);
  for (auto _ : state) {
    auto loss = ssl::barlow_twins_loss(z1, z2, 0.0051);
    loss.backward();
    benchmark::DoNotOptimize(loss.item<float>());
  }
}
BENCHMARK(BM_BarlowTwins)->Arg(128)->Arg(512);

}  // namespace
