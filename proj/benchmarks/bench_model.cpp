#include <benchmark/benchmark.h>

#include "cvrnet/metrics.hpp"
#include "cvrnet/model.hpp"
#include "cvrnet/optim.hpp"

using namespace cvrnet;

namespace {

ModelConfig scaled_config(int den) {
  ModelConfig cfg;
  cfg.input_h = cfg.input_w = 32;
  cfg.num_classes = 2;
  cfg.width = WidthMultiplier{1, den};
  return cfg;
}

Tensor random_batch(std::int64_t b, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({b, 32, 32, 3});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
  return x;
}

void BM_model_forward_infer(benchmark::State& state) {
  CvrNet model(scaled_config(static_cast<int>(state.range(0))), 7);
  const Tensor x = random_batch(4, 11);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.forward(x, BnMode::infer));
  }
}
BENCHMARK(BM_model_forward_infer)->Arg(16)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_model_train_step(benchmark::State& state) {
  CvrNet model(scaled_config(static_cast<int>(state.range(0))), 7);
  const Tensor x = random_batch(8, 13);
  Tensor labels({8, 2});
  for (std::int64_t i = 0; i < 8; ++i) labels(i, i % 2) = 1.0f;
  const Tensor weights = Tensor::full({2}, 1.0f);
  TrainConfig cfg;
  AdamState opt;
  opt.init_like(model.params());
  for (auto _ : state) {
    model.params().zero_grads();
    benchmark::DoNotOptimize(model.loss_backward(x, labels, weights));
    adam_step(model.params(), opt, 1e-4f, cfg);
  }
}
BENCHMARK(BM_model_train_step)->Arg(16)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_compute_metrics(benchmark::State& state) {
  ConfusionMatrix cm(4, {});
  Rng rng(3);
  for (int p = 0; p < 4; ++p)
    for (int a = 0; a < 4; ++a) cm.at(p, a) = static_cast<std::int64_t>(rng.below(5000)) + 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(compute_metrics(cm));
  }
}
BENCHMARK(BM_compute_metrics);

}  // namespace

BENCHMARK_MAIN();
