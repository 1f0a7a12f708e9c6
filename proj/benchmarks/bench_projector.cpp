#include <benchmark/benchmark.h>

#include "cassle/condproj.hpp"

using namespace cassle;

namespace {

// Forward and backward of the conditioned projector at the default widths.
void BM_Projector(benchmark::State& state) {
  const auto mode = static_cast<cond::ConditioningMode>(state.range(0));
  cond::ConditioningSpec spec;
  spec.mode = mode;
  if (mode == cond::ConditioningMode::hypernet) {
    spec.projector_hidden = 64;
    spec.projector_out = 32;
  }
  torch::manual_seed(0);
  cond::ConditionedProjector projector(spec, 128);
  auto gen = at::detail::createCPUGenerator(1);
  const auto e = torch::randn({256, 128}, gen).requires_grad_(true);
  const auto omega = torch::rand({256, 14}, gen);
  for (auto _ : state) {
    auto z = cond::project(projector, e, omega);
    z.pow(2).mean().backward();
    benchmark::DoNotOptimize(z.data_ptr<float>());
  }
  state.SetLabel(std::string(cond::to_string(mode)));
}
BENCHMARK(BM_Projector)->DenseRange(0, 4);

}  // namespace
