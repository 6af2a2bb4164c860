#include <benchmark/benchmark.h>

#include <random>

#include "ctxreg/loss.hpp"
#include "ctxreg/ops.hpp"

using namespace ctxreg;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  std::vector<Real> v(rows * cols);
  for (auto& x : v) x = static_cast<Real>(n(rng));
  return Tensor::from({rows, cols}, std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

struct Fixture {
  SyntheticTask task{SyntheticTaskSpec{}};
  std::vector<PaddedBatch> batches;
  ContextTransformer model;

  explicit Fixture(std::size_t width)
      : model(
            [&] {
              ModelConfig cfg;
              cfg.vocab_size = task.vocab().size();
              cfg.layers = 1;
              cfg.width = width;
              cfg.heads = 4;
              cfg.ff_width = 2 * width;
              return cfg;
            }(),
            1) {
    batches = make_batches(generate_corpus(task).train, 32, 1);
  }
};

void BM_TrainStepLoss(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  f.model.set_training(true);
  LossOptions opt;
  std::size_t i = 0;
  for (auto _ : state) {
    const PaddedBatch& b = f.batches[i++ % f.batches.size()];
    f.model.params().zero_grad();
    backward(total_loss(f.model, b, opt).total);
  }
}
BENCHMARK(BM_TrainStepLoss)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_ForwardEval(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  NoGradGuard guard;
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(f.model.forward_batch(f.batches[i++ % f.batches.size()], ContextChoice::kTrue));
  }
}
BENCHMARK(BM_ForwardEval)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
