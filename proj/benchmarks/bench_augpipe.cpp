#include <benchmark/benchmark.h>

#include "cassle/augpipe.hpp"

using namespace cassle;

namespace {

aug::Image gradient_image(int size) {
  aug::Image img(size, size, 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      img.at(y, x, 0) = static_cast<float>(x) / size;
      img.at(y, x, 1) = static_cast<float>(y) / size;
      img.at(y, x, 2) = 0.5f;
    }
  }
  return img;
}

void BM_ViewPair(benchmark::State& state) {
  const auto image = gradient_image(static_cast<int>(state.range(0)));
  aug::AugmentationPolicy policy;
  policy.out_size = static_cast<int>(state.range(0));
  RandomStream rng(1);
  for (auto _ : state) benchmark::DoNotOptimize(aug::make_view_pair(image, policy, rng));
  state.SetItemsProcessed(state.iterations() * 2);
}
BENCHMARK(BM_ViewPair)->Arg(32)->Arg(96);

void BM_EncodeOmega(benchmark::State& state) {
  const aug::AugmentationPolicy policy;
  RandomStream rng(2);
  const auto record = aug::sample_record(policy, rng, 32, 32);
  for (auto _ : state) benchmark::DoNotOptimize(aug::encode_omega(record, policy));
}
BENCHMARK(BM_EncodeOmega);

}  // namespace

BENCHMARK_MAIN();
