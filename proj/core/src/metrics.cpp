#include "metawrap/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace metawrap {

double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty())
    throw MetricError("AUC undefined: need at least one positive and one negative score");

  struct Entry {
    double score;
    bool positive;
  };
  std::vector<Entry> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.push_back({s, true});
  for (double s : neg) all.push_back({s, false});
  std::sort(all.begin(), all.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });

  // Average rank over each tie group, then the Mann-Whitney U statistic.
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t t = i; t < j; ++t)
      if (all[t].positive) rank_sum_pos += avg_rank;
    i = j;
  }
  const double p = static_cast<double>(pos.size());
  const double n = static_cast<double>(neg.size());
  const double u = rank_sum_pos - p * (p + 1.0) / 2.0;
  return u / (p * n);
}

double auc_labeled(const std::vector<double>& scores, const std::vector<double>& labels) {
  if (scores.size() != labels.size())
    throw MetricError("auc_labeled: scores and labels differ in length");
  std::vector<double> pos, neg;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 1.0)
      pos.push_back(scores[i]);
    else if (labels[i] == 0.0)
      neg.push_back(scores[i]);
    else
      throw MetricError("auc_labeled: labels must be 0 or 1");
  }
  return auc(pos, neg);
}

double impr(double auc_model, double auc_base) {
  if (auc_base == 0.5)
    throw MetricError("improvement undefined: baseline AUC sits exactly at chance level");
  return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0;
}

OverfitReport overfit_report(const ParamSet& params, const SplitDataset& data,
                             ModelVariant variant, Pooling pooling) {
  OverfitReport r;
  r.train_loss = dataset_loss(data.train, params, variant, pooling);
  r.test_loss = dataset_loss(data.test, params, variant, pooling);
  r.gap = r.test_loss - r.train_loss;
  return r;
}

TimingStats summarize_timings(std::vector<double> ms) {
  if (ms.empty()) throw MetricError("summarize_timings: no samples");
  TimingStats s;
  s.count = static_cast<int64_t>(ms.size());
  std::sort(ms.begin(), ms.end());
  s.min_ms = ms.front();
  s.max_ms = ms.back();
  double total = 0.0;
  for (double v : ms) total += v;
  s.mean_ms = total / static_cast<double>(ms.size());
  auto quantile = [&](double q) {
    const double idx = q * static_cast<double>(ms.size() - 1);
    const size_t lo = static_cast<size_t>(idx);
    const size_t hi = std::min(ms.size() - 1, lo + 1);
    const double frac = idx - static_cast<double>(lo);
    return ms[lo] * (1.0 - frac) + ms[hi] * frac;
  };
  s.p50_ms = quantile(0.5);
  s.p95_ms = quantile(0.95);
  return s;
}

}  // namespace metawrap
