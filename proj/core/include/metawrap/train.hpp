#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metawrap/bilevel.hpp"
#include "metawrap/data.hpp"
#include "metawrap/model.hpp"

namespace metawrap {

// Joint training: every method consumes the same per-epoch task stream
// (inner/outer batch pairs) under the same seed, so method comparisons and
// degeneracy checks (mu = 0) are exact.
//
//   base            predictor only, sum pooling, inner batches, log loss
//   attention_only  predictor + selector on the inner batches alone
//   m2              joint objective with a zero-step unroll: the outer loss
//                   is evaluated at the current iterate
//   gdmax           one detached inner step; the selector receives only the
//                   direct outer gradient (no curvature coupling)
//   meta_wrapper    full unrolled objective; the selector gradient includes
//                   the curvature chain through every inner step

enum class Method { kBase, kAttentionOnly, kM2, kGdmax, kMetaWrapper };

std::string method_name(Method m);
Method method_from_string(const std::string& name);

struct EpochMetrics {
  int epoch = 0;            // 1-based
  double train_loss = 0.0;  // mean inner loss over the epoch's steps
  double oob_loss = 0.0;    // mean outer (out-of-batch) loss; NaN if unused
  double valid_auc = 0.0;   // NaN when the split is empty
  double test_auc = 0.0;    // NaN when the split is empty
  double step_ms_mean = 0.0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
};

struct TrainConfig {
  Method method = Method::kMetaWrapper;
  double mu = 0.5;       // outer-loss weight in [0,1]
  double beta = 0.01;    // inner step size
  int n_inner = 1;       // unroll length N
  int64_t batch_size = 128;
  int epochs = 30;
  double in_ratio = 0.8;  // fraction of the train split feeding inner batches
  LrSpec lr;
  uint64_t seed = 1;
  Pooling pooling = Pooling::kWeightedSum;
  int64_t k = 8;  // embedding width
  int64_t eval_batch_size = 256;
  double divergence_threshold = 1e6;
  bool eval_each_epoch = true;
  std::function<void(const EpochMetrics&)> on_epoch;  // optional progress hook
};

struct TrainResult {
  ParamSet params;
  RunMetrics metrics;
};

// Runs cfg.epochs epochs over data.train and returns the final parameters
// plus per-epoch metrics. Zero epochs returns the freshly initialized
// parameters untouched. Throws NumericError if any step loss goes non-finite
// or beyond cfg.divergence_threshold (with epoch/step context).
TrainResult train(const SplitDataset& data, const TrainConfig& cfg);

// Serialized metrics, one JSON object per epoch (keys: epoch, train_loss,
// oob_loss, valid_auc, test_auc, step_ms_mean; NaN encodes as null).
std::string metrics_to_jsonl(const RunMetrics& m);
// Same with timing fields removed — the determinism-comparison form.
std::string metrics_to_jsonl_stable(const RunMetrics& m);

// Derivative probe of the joint objective at explicitly supplied parameter
// values, built from the same loss graphs the optimizer uses. Leaf order:
// predictor ("f.*"), selector ("g.*"), then the embedding rows touched by
// the two batches ("e<fid>", ascending fid). value() is a pure function of
// the supplied tensors, so finite differences of it are an independent
// reference for gradient(). The originating ParamSet and the instances
// behind the batch pointers must outlive the probe.
struct JointProbe {
  std::vector<std::string> names;
  std::vector<Tensor> at;  // values taken from the originating ParamSet

  double value(const std::vector<Tensor>& values) const;
  std::vector<Tensor> gradient(const std::vector<Tensor>& values) const;

  // The same objective built once as a reusable graph rooted at a scalar:
  // `leaves` aligns with `names`, and re-evaluating the graph at rebound leaf
  // values (metawrap::forward, or oracle::Replay for repeated sweeps) equals
  // value() at those values bit for bit. Built at the stored `at` tensors.
  struct Graph {
    NodePtr total;
    std::vector<NodePtr> leaves;
  };
  Graph graph() const;

  // Wiring (treat as read-only).
  std::vector<const Instance*> d_in, d_out;
  const ParamSet* shapes = nullptr;
  double mu = 0.5;
  double beta = 0.01;
  int n_inner = 1;
  Pooling pooling = Pooling::kWeightedSum;
  size_t n_predictor = 0;  // leading entries of `names` that form theta
  size_t n_selector = 0;
};

JointProbe make_joint_probe(const ParamSet& params, const std::vector<const Instance*>& d_in,
                            const std::vector<const Instance*>& d_out, double mu, double beta,
                            int n_inner, Pooling pooling);

// Per-step wall times (ms) of real optimizer steps after `warmup` untimed
// steps; the task stream cycles if the dataset is small.
std::vector<double> bench_train_steps(const SplitDataset& data, const TrainConfig& cfg,
                                      int n_steps, int warmup);

// Per-batch wall times (ms) of forward scoring over `instances`.
std::vector<double> bench_inference(const std::vector<Instance>& instances, const ParamSet& params,
                                    ModelVariant variant, Pooling pooling, int n_batches,
                                    int64_t batch_size, int warmup);

}  // namespace metawrap
