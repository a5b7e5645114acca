#include <benchmark/benchmark.h>

#include "cvrnet/ops.hpp"
#include "cvrnet/rng.hpp"

using namespace cvrnet;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, float scale = 1.0f) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal()) * scale;
  return t;
}

void BM_conv2d_forward(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  const Tensor x = randn({4, 28, 28, c}, 1);
  const Tensor w = randn({3, 3, c, c}, 2, 0.1f);
  const ConvSpec spec{3, 3, 1, Padding::same, 1};
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d_forward(x, w, Tensor(), spec));
  }
  state.SetItemsProcessed(state.iterations() * 4 * 28 * 28 * 9 * c * c);
}
BENCHMARK(BM_conv2d_forward)->Arg(16)->Arg(32)->Arg(64);

void BM_conv2d_backward(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  const Tensor x = randn({4, 28, 28, c}, 1);
  const Tensor w = randn({3, 3, c, c}, 2, 0.1f);
  const ConvSpec spec{3, 3, 1, Padding::same, 1};
  const Tensor dy = randn({4, 28, 28, c}, 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d_backward(x, w, spec, dy));
  }
}
BENCHMARK(BM_conv2d_backward)->Arg(16)->Arg(32);

void BM_depthwise_separable_forward(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  const Tensor x = randn({4, 28, 28, c}, 1);
  const Tensor dw = randn({3, 3, c, 1}, 2, 0.3f);
  const Tensor pw = randn({1, 1, c, c}, 3, 0.1f);
  const ConvSpec spec{3, 3, 1, Padding::same, 1};
  for (auto _ : state) {
    benchmark::DoNotOptimize(depthwise_separable_forward(x, dw, Tensor(), pw, Tensor(), spec));
  }
}
BENCHMARK(BM_depthwise_separable_forward)->Arg(32)->Arg(64);

void BM_maxpool(benchmark::State& state) {
  const Tensor x = randn({4, 56, 56, 64}, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(maxpool2d_forward(x, 3, 3, 2));
  }
}
BENCHMARK(BM_maxpool);

void BM_batch_norm_train(benchmark::State& state) {
  const Tensor x = randn({8, 28, 28, 64}, 1);
  const Tensor gamma = Tensor::full({64}, 1.0f);
  const Tensor beta({64});
  const Tensor rm({64});
  const Tensor rv = Tensor::full({64}, 1.0f);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        batch_norm_forward(x, gamma, beta, rm, rv, BnMode::train, 0.99f, 1e-3f));
  }
}
BENCHMARK(BM_batch_norm_train);

void BM_dense_forward(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  const Tensor x = randn({16, c}, 1);
  const Tensor w = randn({c, 256}, 2, 0.05f);
  const Tensor b({256});
  for (auto _ : state) {
    benchmark::DoNotOptimize(dense_forward(x, w, b));
  }
}
BENCHMARK(BM_dense_forward)->Arg(512)->Arg(4096);

void BM_softmax_cross_entropy(benchmark::State& state) {
  const Tensor logits = randn({64, 4}, 1, 2.0f);
  Tensor labels({64, 4});
  for (std::int64_t i = 0; i < 64; ++i) labels(i, i % 4) = 1.0f;
  const Tensor weights = Tensor::full({4}, 1.0f);
  for (auto _ : state) {
    benchmark::DoNotOptimize(softmax_cross_entropy(logits, labels, weights));
  }
}
BENCHMARK(BM_softmax_cross_entropy);

}  // namespace

BENCHMARK_MAIN();
