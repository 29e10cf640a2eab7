#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "metawrap/data.hpp"
#include "metawrap/metrics.hpp"
#include "metawrap/model.hpp"
#include "metawrap/oracle.hpp"
#include "metawrap/rng.hpp"

using namespace metawrap;

TEST_CASE("ranking score on hand-checked cases") {
  CHECK(auc({0.9, 0.8}, {0.1, 0.2}) == 1.0);
  CHECK(auc({0.1}, {0.9}) == 0.0);
  CHECK(auc({0.5}, {0.5}) == 0.5);
  CHECK(auc({0.8, 0.6}, {0.7, 0.3}) == 0.75);
  CHECK_THROWS_AS(auc({}, {0.1}), MetricError);
  CHECK_THROWS_AS(auc({0.1}, {}), MetricError);
}

TEST_CASE("rank-sum and brute-force pair counting agree to double precision") {
  Rng rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    const int np = 1 + static_cast<int>(rng.index(50));
    const int nn = 1 + static_cast<int>(rng.index(50));
    const bool with_ties = rng.bernoulli(0.5);
    std::vector<double> pos(np), neg(nn);
    const auto draw = [&]() {
      // A coarse grid forces many exact ties; a continuous draw avoids them.
      return with_ties ? static_cast<double>(rng.index(8)) / 8.0 : rng.uniform();
    };
    for (auto& s : pos) s = draw();
    for (auto& s : neg) s = draw();
    worst = std::max(worst, std::fabs(auc(pos, neg) - brute_auc(pos, neg)));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("label-splitting wrapper routes scores by class") {
  const double a = auc_labeled({0.9, 0.1, 0.8, 0.2}, {1.0, 0.0, 1.0, 0.0});
  CHECK(a == 1.0);
  // pos {0.8, 0.6} vs neg {0.7, 0.3}: three of four pairs concordant.
  CHECK(auc_labeled({0.8, 0.7, 0.6, 0.3}, {1.0, 0.0, 1.0, 0.0}) == 0.75);
  // Single-class inputs cannot be ranked.
  CHECK_THROWS_AS(auc_labeled({0.9, 0.8}, {1.0, 1.0}), MetricError);
  CHECK_THROWS_AS(auc_labeled({0.9, 0.8}, {0.0, 0.0}), MetricError);
}

TEST_CASE("improvement percentages reproduce the published anchors") {
  CHECK(std::fabs(impr(0.8201, 0.7524) - 26.82) < 0.005);
  CHECK(std::fabs(impr(0.9010, 0.8298) - 21.59) < 0.005);
  CHECK(impr(0.75, 0.75) == 0.0);
  CHECK(impr(0.5, 0.75) == -100.0);
  CHECK_THROWS_AS(impr(0.8, 0.5), MetricError);
}

TEST_CASE("overfit report equals the split losses it is built from") {
  SyntheticConfig cfg;
  cfg.n_users = 8;
  cfg.n_items = 40;
  cfg.n_groups = 4;
  cfg.pos_per_user = 6;
  cfg.neg_per_user = 6;
  cfg.seed = 3;
  const SyntheticData synth = generate_synthetic(cfg);
  const ParamSet params = init_params(4, synth.split.n_items, synth.split.n_cats, 11);

  const OverfitReport r =
      overfit_report(params, synth.split, ModelVariant::kSelector, Pooling::kWeightedSum);
  const double train =
      dataset_loss(synth.split.train, params, ModelVariant::kSelector, Pooling::kWeightedSum);
  const double test =
      dataset_loss(synth.split.test, params, ModelVariant::kSelector, Pooling::kWeightedSum);
  CHECK(r.train_loss == train);
  CHECK(r.test_loss == test);
  CHECK(r.gap == test - train);
}

TEST_CASE("timing summaries on a known sample") {
  // Sorted: 1 2 3 4 10. mean 4; p50 = 3; p95 interpolates between 4 and 10.
  const TimingStats s = summarize_timings({3.0, 1.0, 4.0, 2.0, 10.0});
  CHECK(s.count == 5);
  CHECK(s.mean_ms == 4.0);
  CHECK(s.p50_ms == 3.0);
  CHECK(s.min_ms == 1.0);
  CHECK(s.max_ms == 10.0);
  CHECK(s.p95_ms > 4.0);
  CHECK(s.p95_ms <= 10.0);

  const TimingStats one = summarize_timings({7.0});
  CHECK(one.mean_ms == 7.0);
  CHECK(one.p50_ms == 7.0);
  CHECK(one.p95_ms == 7.0);

  CHECK_THROWS_AS(summarize_timings({}), MetricError);
}
