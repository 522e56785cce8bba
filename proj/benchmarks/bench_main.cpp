#include <benchmark/benchmark.h>

#include <random>

#include "geonorm/model.hpp"
#include "geonorm/norm_layers.hpp"
#include "geonorm/ops.hpp"
#include "geonorm/training.hpp"

using namespace geonorm;

namespace {

DenseTensor randn(Shape shape, std::uint64_t seed) {
  DenseTensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  for (double& v : t.values()) v = n(rng);
  return t;
}

Precision precision_arg(const benchmark::State& state) {
  return state.range(1) ? Precision::kNarrow : Precision::kWide;
}

// Activations (16 * 64, n) times weights (n, n): the shape of every projection in the toy model.
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = randn({16 * 64, n}, 1), b = randn({n, n}, 2);
  for (auto _ : state) {
    Tape tape(precision_arg(state));
    benchmark::DoNotOptimize(matmul(tape.constant(a), tape.constant(b)).value()[0]);
  }
  state.SetItemsProcessed(state.iterations() * 16 * 64 * n * n);
}
BENCHMARK(BM_Matmul)->ArgsProduct({{64, 256}, {0, 1}});

void BM_GeoNormForwardBackward(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto x0 = randn({16, 64, d}, 3), g0 = randn({16, 64, d}, 4);
  GeoNormParams p;
  GeoNormLayer layer(p, "bench");
  for (auto _ : state) {
    Tape tape(precision_arg(state));
    Var x = tape.variable(x0), g = tape.variable(g0);
    tape.backward(mean(layer.forward(x, g, {1, 4})));
    benchmark::DoNotOptimize(tape.grad(x)[0]);
  }
  state.SetItemsProcessed(state.iterations() * 16 * 64);
}
BENCHMARK(BM_GeoNormForwardBackward)->ArgsProduct({{64}, {0, 1}});

// One optimizer step of the default toy model: forward, backward and Adam.
void BM_TrainStep(benchmark::State& state) {
  ModelConfig mc;
  mc.strategy = parse_strategy(all_strategy_names().at(static_cast<std::size_t>(state.range(0))));
  TrainConfig tc;
  tc.precision = precision_arg(state);
  TransformerModel model(mc, 1);
  auto params = model.parameters();
  AdamState adam;
  std::vector<std::uint8_t> text(20000);
  std::mt19937_64 rng(5);
  for (auto& c : text) c = static_cast<std::uint8_t>('a' + rng() % 26);
  for (auto _ : state) {
    const Batch b = sample_batch(text, mc.seq_len, tc.batch, rng);
    Tape tape(tc.precision);
    Var loss = cross_entropy(model.forward(tape, b.inputs, b.batch, b.seq), b.targets);
    model.zero_grad();
    tape.backward(loss);
    adam_step(params, adam, tc);
    benchmark::DoNotOptimize(loss.value().item());
  }
  state.SetLabel(all_strategy_names().at(static_cast<std::size_t>(state.range(0))));
}
BENCHMARK(BM_TrainStep)->ArgsProduct({{0, 1, 2, 3, 4}, {0, 1}})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
