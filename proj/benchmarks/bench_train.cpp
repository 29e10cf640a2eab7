#include <benchmark/benchmark.h>

#include "metawrap/data.hpp"
#include "metawrap/model.hpp"
#include "metawrap/train.hpp"

using namespace metawrap;

namespace {

SyntheticData bench_data() {
  SyntheticConfig c;
  c.n_users = 40;
  c.n_items = 200;
  c.n_groups = 5;
  c.pos_per_user = 20;
  c.neg_per_user = 20;
  c.test_fraction = 0.2;
  c.max_seq_len = 20;
  c.seed = 4000;
  return generate_synthetic(c);
}

TrainConfig bench_cfg(Method m, int n_inner) {
  TrainConfig c;
  c.method = m;
  c.mu = 0.5;
  c.beta = 0.01;
  c.n_inner = n_inner;
  c.batch_size = 64;
  c.in_ratio = 0.8;
  c.lr.kind = LrSpec::Kind::kConstant;
  c.lr.gamma0 = 0.05;
  c.seed = 1;
  c.k = 8;
  return c;
}

// One optimizer step, preceded by untimed warmup inside bench_train_steps.
void step_benchmark(benchmark::State& state, Method m, int n_inner) {
  const SyntheticData data = bench_data();
  const TrainConfig cfg = bench_cfg(m, n_inner);
  for (auto _ : state) {
    const std::vector<double> ms = bench_train_steps(data.split, cfg, 1, 0);
    state.SetIterationTime(ms.at(0) / 1000.0);
  }
}

void BM_StepAttentionOnly(benchmark::State& state) {
  step_benchmark(state, Method::kAttentionOnly, 1);
}
BENCHMARK(BM_StepAttentionOnly)->UseManualTime()->Unit(benchmark::kMillisecond);

void BM_StepMetaWrapper(benchmark::State& state) {
  step_benchmark(state, Method::kMetaWrapper, static_cast<int>(state.range(0)));
}
BENCHMARK(BM_StepMetaWrapper)->Arg(1)->Arg(2)->Arg(3)->UseManualTime()->Unit(benchmark::kMillisecond);

void BM_InferenceBatch(benchmark::State& state) {
  const SyntheticData data = bench_data();
  const ParamSet params = init_params(8, data.split.n_items, data.split.n_cats, 1);
  for (auto _ : state) {
    const std::vector<double> ms = bench_inference(
        data.split.train, params, ModelVariant::kSelector, Pooling::kWeightedSum,
        /*n_batches=*/1, /*batch_size=*/state.range(0), /*warmup=*/0);
    state.SetIterationTime(ms.at(0) / 1000.0);
  }
}
BENCHMARK(BM_InferenceBatch)->Arg(64)->Arg(256)->UseManualTime()->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
