#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "metawrap/data.hpp"
#include "metawrap/graph.hpp"
#include "metawrap/tensor.hpp"

namespace metawrap {

// CTR prediction model: a predictor network f over (pooled history, target)
// and a selector network g scoring each history item against the target.
//
// Embeddings live in one table covering items and categories; the embedding
// of a behavior is the sum of its item row and its category row. The
// selector sees, per history item, the concatenation
// [e_i ; e_target ; e_i - e_target ; e_i * e_target] and emits a relevance
// score in (0,1). Pooling contracts the history with those scores; the
// predictor consumes [pooled ; e_target] through two hidden layers and a
// sigmoid output clamped away from {0,1} before the log loss.

inline constexpr int64_t kHidden1 = 80;
inline constexpr int64_t kHidden2 = 40;
inline constexpr double kProbClampLo = 1e-7;
inline constexpr double kProbClampHi = 1.0 - 1e-7;

enum class Pooling { kWeightedSum, kSoftmax };

// Uniform-sum pooling (no selector) vs selector-weighted pooling.
enum class ModelVariant { kBase, kSelector };

struct MlpParams {
  Tensor w1, b1, w2, b2, w3, b3;
};

struct ParamSet {
  int64_t k = 8;  // embedding width
  int64_t n_items = 0;
  int64_t n_cats = 0;
  Tensor embedding;    // {n_items + n_cats, k}
  MlpParams predictor;  // input width 2k
  MlpParams selector;   // input width 4k

  int64_t n_features() const { return n_items + n_cats; }
  int64_t item_fid(int64_t item) const;  // bounds-checked feature ids
  int64_t cat_fid(int64_t cat) const;
  Tensor embedding_row(int64_t fid) const;  // {k,1} column copy
};

// Uniform initialization: weights U[-1/sqrt(fan_in), 1/sqrt(fan_in)), biases
// zero, embeddings U[-0.05, 0.05). Deterministic in `seed`.
ParamSet init_params(int64_t k, int64_t n_items, int64_t n_cats, uint64_t seed);

using NodeMap = std::map<std::string, NodePtr>;

// Differentiable leaves for the MLP parameters, keyed "f.w1".."f.b3" /
// "g.w1".."g.b3". Embedding rows are keyed "e<fid>" by the caller.
NodeMap predictor_inputs(const ParamSet& p);
NodeMap selector_inputs(const ParamSet& p);
std::string embedding_key(int64_t fid);

// Mutable views of the named dense parameters (embedding excluded), used to
// apply updates; iteration order is the map order and therefore stable.
std::map<std::string, Tensor*> dense_param_slots(ParamSet& p);

// Resolves a feature id to its {k,1} embedding node. Implemented by the
// training loop (current iterate) and by plain table lookups for inference.
using EmbeddingLookup = std::function<NodePtr(int64_t fid)>;
EmbeddingLookup table_lookup(const ParamSet& p);  // constants from the table

// Selector scores for one instance: E {k,T} history embeddings, ev {k,1}
// target embedding; returns a {1,T} row of sigmoid scores.
NodePtr selector_scores(const NodePtr& E, const NodePtr& ev, const NodeMap& selector);

// Contract the history with a score row: weighted_sum = E s', softmax
// variant normalizes the scores first. Returns {k,1}.
NodePtr pool(const NodePtr& E, const NodePtr& s_row, Pooling pooling);

// Clamped click probabilities for a batch laid out as columns: x {2k,B} ->
// {1,B}.
NodePtr predictor_probs(const NodePtr& x, const NodeMap& predictor);

// Mean binary cross-entropy of a probability row against 0/1 labels.
NodePtr bce_loss(const NodePtr& p_row, const std::vector<double>& labels);

// Probability row for a batch of instances (columns in batch order).
NodePtr batch_probs(const std::vector<const Instance*>& batch, const EmbeddingLookup& emb,
                    const ParamSet& shapes, const NodeMap& predictor, const NodeMap& selector,
                    ModelVariant variant, Pooling pooling);

// Mean BCE over a batch of instances.
NodePtr batch_loss(const std::vector<const Instance*>& batch, const EmbeddingLookup& emb,
                   const ParamSet& shapes, const NodeMap& predictor, const NodeMap& selector,
                   ModelVariant variant, Pooling pooling);

struct Prediction {
  double p_hat = 0.0;
  Tensor s_u;    // {1,T} selector scores (all ones for kBase)
  Tensor r_hat;  // {k,1} pooled history
};

Prediction predict(const Instance& inst, const ParamSet& params, ModelVariant variant,
                   Pooling pooling);

// Scores for many instances (forward only, batched internally).
std::vector<double> score_instances(const std::vector<Instance>& instances,
                                    const ParamSet& params, ModelVariant variant, Pooling pooling,
                                    int64_t batch_size = 256);

// Mean BCE of the model over a set of instances (forward only).
double dataset_loss(const std::vector<Instance>& instances, const ParamSet& params,
                    ModelVariant variant, Pooling pooling, int64_t batch_size = 256);

// Binary checkpoint with bit-exact round-trip of every tensor.
void save_checkpoint(const std::string& path, const ParamSet& params, uint64_t seed);
struct Checkpoint {
  ParamSet params;
  uint64_t seed = 0;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace metawrap
