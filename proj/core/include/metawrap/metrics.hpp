#pragma once

#include <vector>

#include "metawrap/data.hpp"
#include "metawrap/model.hpp"
#include "metawrap/tensor.hpp"

namespace metawrap {

class MetricError : public Error {
public:
  using Error::Error;
};

// AUC via the rank-sum (Mann-Whitney) statistic with average ranks for tied
// scores; equivalent to counting concordant pairs with ties worth 1/2.
// Throws MetricError when either class is empty.
double auc(const std::vector<double>& pos, const std::vector<double>& neg);

// Convenience: split scores by 0/1 labels first.
double auc_labeled(const std::vector<double>& scores, const std::vector<double>& labels);

// Relative improvement over a random-guess-adjusted baseline, in percent:
// ((auc_model - 0.5) / (auc_base - 0.5) - 1) * 100. The baseline must not
// sit exactly at chance level.
double impr(double auc_model, double auc_base);

struct OverfitReport {
  double train_loss = 0.0;
  double test_loss = 0.0;
  double gap = 0.0;  // test - train
};

// Mean log loss on the train and test splits plus their gap.
OverfitReport overfit_report(const ParamSet& params, const SplitDataset& data,
                             ModelVariant variant, Pooling pooling);

struct TimingStats {
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  int64_t count = 0;
};

TimingStats summarize_timings(std::vector<double> ms);

}  // namespace metawrap
