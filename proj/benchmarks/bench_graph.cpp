#include <benchmark/benchmark.h>

#include <vector>

#include "metawrap/graph.hpp"
#include "metawrap/oracle.hpp"
#include "metawrap/rng.hpp"
#include "metawrap/tensor.hpp"

using namespace metawrap;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_MatmulForward(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  const Tensor a = random_tensor({n, n}, rng);
  const Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(t_matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_MatmulForward)->Arg(16)->Arg(64)->Arg(128);

void BM_GradientTensorMode(benchmark::State& state) {
  const RandomGraph rg = make_random_graph(static_cast<uint64_t>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(gradient(rg.root, rg.params, /*create_graph=*/false));
  }
}
BENCHMARK(BM_GradientTensorMode)->Arg(3)->Arg(17);

void BM_GradientCreateGraph(benchmark::State& state) {
  const RandomGraph rg = make_random_graph(static_cast<uint64_t>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(gradient(rg.root, rg.params, /*create_graph=*/true));
  }
}
BENCHMARK(BM_GradientCreateGraph)->Arg(3)->Arg(17);

void BM_Hvp(benchmark::State& state) {
  const RandomGraph rg = make_random_graph(static_cast<uint64_t>(state.range(0)));
  Rng rng(7);
  std::vector<Tensor> v;
  for (const Tensor& t : rg.values) {
    Tensor w = t;
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1.0, 1.0);
    v.push_back(std::move(w));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(hvp(rg.root, rg.params, v, rg.params));
  }
}
BENCHMARK(BM_Hvp)->Arg(3)->Arg(17);

void BM_ReplayEvalAll(benchmark::State& state) {
  const RandomGraph rg = make_random_graph(static_cast<uint64_t>(state.range(0)));
  Replay replay(rg.root, rg.params);
  for (auto _ : state) {
    benchmark::DoNotOptimize(replay.eval_all(rg.values));
  }
}
BENCHMARK(BM_ReplayEvalAll)->Arg(3)->Arg(17);

}  // namespace

BENCHMARK_MAIN();
