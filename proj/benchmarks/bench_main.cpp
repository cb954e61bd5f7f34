#include <benchmark/benchmark.h>

#include <random>

#include "sqz/model.hpp"
#include "sqz/ops.hpp"
#include "sqz/pruning.hpp"
#include "sqz/rng.hpp"
#include "sqz/verification.hpp"

namespace {

using namespace sqz;

Tensor noise(const Shape& shape, std::uint64_t seed) {
  Tensor t(shape);
  Rng rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

// args: channels in, filters, spatial size, kernel
void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), f = static_cast<std::size_t>(state.range(1));
  const auto s = static_cast<std::size_t>(state.range(2)), k = static_cast<std::size_t>(state.range(3));
  const Tensor x = noise({8, c, s, s}, 1);
  Parameter<float> w(noise({f, c, k, k}, 2)), b(noise({f}, 3));
  for (auto _ : state) {
    Tape<float> tape;
    tape.set_grad_enabled(false);
    auto y = conv2d(tape.constant(x), tape.parameter(w), tape.parameter(b), {1, static_cast<int>(k / 2), "bench"});
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2dForward)->Args({3, 8, 113, 3})->Args({16, 64, 56, 1})->Args({16, 64, 56, 3});

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), f = static_cast<std::size_t>(state.range(1));
  const auto s = static_cast<std::size_t>(state.range(2)), k = static_cast<std::size_t>(state.range(3));
  const Tensor x = noise({8, c, s, s}, 1);
  Parameter<float> w(noise({f, c, k, k}, 2)), b(noise({f}, 3));
  for (auto _ : state) {
    Tape<float> tape;
    auto y = conv2d(tape.constant(x), tape.parameter(w), tape.parameter(b), {1, static_cast<int>(k / 2), "bench"});
    tape.backward(sum(y));
    w.zero_grad();
    b.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({3, 8, 113, 3})->Args({16, 64, 56, 3});

void BM_MicroTrainStep(benchmark::State& state) {
  ModelGraph m = build_micro_config(20, static_cast<int>(state.range(0)), 1);
  const Tensor x = noise({16, 3, 113, 113}, 4);
  std::vector<int> labels(16);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 20);
  for (auto _ : state) {
    m.zero_grad();
    Tape<float> tape;
    ForwardOptions o;
    o.mode = NormMode::kTrain;
    auto out = forward(tape, m, x, o);
    tape.backward(softmax_cross_entropy(out.logits, std::span<const int>(labels)));
  }
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_MicroTrainStep)->Arg(8)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_MicroInferEmbeddings(benchmark::State& state) {
  ModelGraph m = build_micro_config(20, 8, 1);
  const Tensor x = noise({16, 3, 113, 113}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(infer_embeddings(m, x).data());
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_MicroInferEmbeddings)->Unit(benchmark::kMillisecond);

void BM_ScoreBatch(benchmark::State& state) {
  ModelGraph m = build_micro_config(20, 8, 1);
  const auto groups = group_model(m);
  for (auto* p : m.trainable_parameters()) p->grad = noise(p->value.shape(), 6);
  for (auto _ : state) {
    ImportanceTable table(groups.size());
    score_batch(table, groups, m);
    benchmark::DoNotOptimize(table.sums().data());
  }
}
BENCHMARK(BM_ScoreBatch);

void BM_SurgeryMicro(benchmark::State& state) {
  const ModelGraph m = build_micro_config(20, 8, 1);
  const auto groups = group_model(m);
  std::vector<int> victims;
  for (int i = 0; i < static_cast<int>(groups.size()); i += 10) victims.push_back(i);
  for (auto _ : state) benchmark::DoNotOptimize(surgery(m, groups, victims).size());
}
BENCHMARK(BM_SurgeryMicro)->Unit(benchmark::kMicrosecond);

void BM_ComputeEer(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(7);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> g(n), i(n);
  for (auto& v : g) v = d(rng) + 1.5;
  for (auto& v : i) v = d(rng);
  for (auto _ : state) benchmark::DoNotOptimize(compute_eer(g, i).eer);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n));
}
BENCHMARK(BM_ComputeEer)->Arg(1000)->Arg(36800);

}  // namespace

BENCHMARK_MAIN();
