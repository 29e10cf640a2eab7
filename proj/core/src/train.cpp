#include "metawrap/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <set>

#include <json.hpp>

#include "metawrap/metrics.hpp"

namespace metawrap {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Decorrelates the task-stream randomness from parameter initialization
// while keeping both a pure function of the run seed.
constexpr uint64_t kTaskStreamSalt = 0x9e3779b97f4a7c15ULL;

struct StepOutcome {
  double inner = kNaN;
  double outer = kNaN;
};

class Trainer {
public:
  Trainer(const SplitDataset& data, const TrainConfig& cfg)
      : data_(data), cfg_(cfg), params_(init_params(cfg.k, data.n_items, data.n_cats, cfg.seed)),
        dense_slots_(dense_param_slots(params_)) {
    validate();
    // mu = 0 removes the outer term from the joint objective, which is
    // exactly the attention-only method; run that code path directly.
    effective_ = cfg_.method;
    if (effective_ == Method::kMetaWrapper && cfg_.mu == 0.0) effective_ = Method::kAttentionOnly;
    n_unroll_ = effective_ == Method::kM2 ? 0 : cfg_.n_inner;
    uses_outer_ = effective_ == Method::kM2 || effective_ == Method::kGdmax ||
                  effective_ == Method::kMetaWrapper;
    variant_ = effective_ == Method::kBase ? ModelVariant::kBase : ModelVariant::kSelector;
  }

  StepOutcome step(const TaskBatch& task, double gamma);

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  bool uses_outer() const { return uses_outer_; }
  ModelVariant variant() const { return variant_; }

private:
  void validate() const {
    if (cfg_.mu < 0.0 || cfg_.mu > 1.0) throw ConfigError("train: mu must lie in [0, 1]");
    if (cfg_.n_inner < 0) throw ConfigError("train: n_inner must be non-negative");
    if (cfg_.method == Method::kMetaWrapper && cfg_.mu > 0.0 && cfg_.n_inner < 1)
      throw ConfigError("train: meta_wrapper needs n_inner >= 1 (use method m2 for a zero-step unroll)");
    if (cfg_.epochs < 0) throw ConfigError("train: epochs must be non-negative");
    if (cfg_.beta < 0.0) throw ConfigError("train: beta must be non-negative");
  }

  // Named differentiable leaves for the current iterate restricted to the
  // parameters this task touches.
  NodeMap make_theta0(const std::vector<int64_t>& fids) const {
    NodeMap theta = predictor_inputs(params_);
    for (int64_t fid : fids) {
      const std::string key = embedding_key(fid);
      theta[key] = input(params_.embedding_row(fid), key);
    }
    return theta;
  }

  static EmbeddingLookup map_lookup(const NodeMap& theta) {
    return [&theta](int64_t fid) -> NodePtr {
      auto it = theta.find(embedding_key(fid));
      if (it == theta.end())
        throw Error("internal: embedding row " + std::to_string(fid) + " missing from iterate");
      return it->second;
    };
  }

  std::vector<int64_t> touched_fids(const TaskBatch& task) const {
    std::vector<int64_t> fids;
    auto add_instance = [&](const Instance* inst) {
      for (size_t h = 0; h < inst->history_items.size(); ++h) {
        fids.push_back(params_.item_fid(inst->history_items[h]));
        fids.push_back(params_.cat_fid(inst->history_cats[h]));
      }
      fids.push_back(params_.item_fid(inst->target_item));
      fids.push_back(params_.cat_fid(inst->target_cat));
    };
    for (const Instance* inst : task.d_in) add_instance(inst);
    if (uses_outer_)
      for (const Instance* inst : task.d_out) add_instance(inst);
    std::sort(fids.begin(), fids.end());
    fids.erase(std::unique(fids.begin(), fids.end()), fids.end());
    return fids;
  }

  LossBuilder loss_builder(const std::vector<const Instance*>& batch) const {
    return [this, &batch](const NodeMap& theta, const NodeMap& phi) {
      return batch_loss(batch, map_lookup(theta), params_, theta, phi, variant_, cfg_.pooling);
    };
  }

  void apply_update(const std::map<std::string, Tensor>& theta_grads,
                    const std::map<std::string, Tensor>& phi_grads, double gamma,
                    double phi_scale);
  void apply_named(const std::string& name, const Tensor& grad, double step);

  const SplitDataset& data_;
  TrainConfig cfg_;
  ParamSet params_;
  std::map<std::string, Tensor*> dense_slots_;
  Method effective_ = Method::kMetaWrapper;
  int n_unroll_ = 1;
  bool uses_outer_ = false;
  ModelVariant variant_ = ModelVariant::kSelector;
};

void Trainer::apply_named(const std::string& name, const Tensor& grad, double step) {
  if (!name.empty() && name[0] == 'e') {
    const int64_t fid = std::stoll(name.substr(1));
    for (int64_t j = 0; j < params_.k; ++j) params_.embedding.at(fid, j) -= step * grad[j];
    return;
  }
  auto it = dense_slots_.find(name);
  if (it == dense_slots_.end()) throw Error("internal: unknown parameter '" + name + "' in update");
  Tensor& t = *it->second;
  if (!t.same_shape(grad))
    throw ShapeError("internal: gradient shape mismatch for '" + name + "'");
  for (int64_t i = 0; i < t.numel(); ++i) t[i] -= step * grad[i];
}

void Trainer::apply_update(const std::map<std::string, Tensor>& theta_grads,
                           const std::map<std::string, Tensor>& phi_grads, double gamma,
                           double phi_scale) {
  for (const auto& [name, g] : theta_grads) apply_named(name, g, gamma);
  for (const auto& [name, g] : phi_grads) apply_named(name, g, gamma * phi_scale);
}

StepOutcome Trainer::step(const TaskBatch& task, double gamma) {
  if (task.d_in.empty()) throw ConfigError("train: empty inner batch");
  if (uses_outer_ && task.d_out.empty())
    throw ConfigError(
        "train: the outer partition ran dry for this step; lower in_ratio or batch size");

  const std::vector<int64_t> fids = touched_fids(task);
  NodeMap theta0 = make_theta0(fids);
  NodeMap phi = variant_ == ModelVariant::kSelector ? selector_inputs(params_) : NodeMap{};

  StepOutcome out;
  switch (effective_) {
    case Method::kBase:
    case Method::kAttentionOnly: {
      const NodePtr loss = loss_builder(task.d_in)(theta0, phi);
      std::vector<NodePtr> wrt;
      std::vector<std::string> names;
      for (const auto& [name, node] : theta0) {
        names.push_back(name);
        wrt.push_back(node);
      }
      for (const auto& [name, node] : phi) {
        names.push_back(name);
        wrt.push_back(node);
      }
      const GradMap grads = gradient(loss, wrt, /*create_graph=*/false);
      for (size_t i = 0; i < wrt.size(); ++i)
        if (grads.has_path(i)) apply_named(names[i], grads.tensor(i), gamma);
      out.inner = loss->value().value();
      break;
    }
    case Method::kM2:
    case Method::kMetaWrapper: {
      const LossBuilder inner = loss_builder(task.d_in);
      const LossBuilder outer = loss_builder(task.d_out);
      const MetaGradient mg =
          meta_gradient(inner, outer, theta0, phi, cfg_.mu, cfg_.beta, n_unroll_);
      apply_update(mg.theta, mg.phi, gamma, 1.0);
      out.inner = mg.inner_value;
      out.outer = mg.outer_value;
      break;
    }
    case Method::kGdmax: {
      // Inner gradient at the current iterate updates theta; the selector is
      // driven by the outer loss at a detached one-step adaptation, so no
      // curvature information reaches phi.
      const NodePtr inner = loss_builder(task.d_in)(theta0, phi);
      std::vector<NodePtr> theta_nodes;
      std::vector<std::string> theta_names;
      for (const auto& [name, node] : theta0) {
        theta_names.push_back(name);
        theta_nodes.push_back(node);
      }
      const GradMap g_in = gradient(inner, theta_nodes, /*create_graph=*/false);

      NodeMap theta_bar;
      for (size_t i = 0; i < theta_nodes.size(); ++i) {
        if (g_in.has_path(i)) {
          Tensor stepped = theta_nodes[i]->value();
          const Tensor& g = g_in.tensor(i);
          for (int64_t j = 0; j < stepped.numel(); ++j) stepped[j] -= cfg_.beta * g[j];
          theta_bar[theta_names[i]] = input(std::move(stepped), theta_names[i]);
        } else {
          theta_bar[theta_names[i]] = theta_nodes[i];
        }
      }

      const NodePtr outer = loss_builder(task.d_out)(theta_bar, phi);
      std::vector<NodePtr> phi_nodes;
      std::vector<std::string> phi_names;
      for (const auto& [name, node] : phi) {
        phi_names.push_back(name);
        phi_nodes.push_back(node);
      }
      const GradMap g_out = gradient(outer, phi_nodes, /*create_graph=*/false);

      for (size_t i = 0; i < theta_nodes.size(); ++i)
        if (g_in.has_path(i)) apply_named(theta_names[i], g_in.tensor(i), gamma);
      for (size_t i = 0; i < phi_nodes.size(); ++i)
        if (g_out.has_path(i)) apply_named(phi_names[i], g_out.tensor(i), gamma * cfg_.mu);
      out.inner = inner->value().value();
      out.outer = outer->value().value();
      break;
    }
  }
  return out;
}

double split_auc(const std::vector<Instance>& split, const ParamSet& params, ModelVariant variant,
                 Pooling pooling, int64_t eval_batch) {
  if (split.empty()) return kNaN;
  const std::vector<double> scores = score_instances(split, params, variant, pooling, eval_batch);
  std::vector<double> labels;
  labels.reserve(split.size());
  for (const Instance& inst : split) labels.push_back(inst.label);
  return auc_labeled(scores, labels);
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::kBase: return "base";
    case Method::kAttentionOnly: return "attention_only";
    case Method::kM2: return "m2";
    case Method::kGdmax: return "gdmax";
    case Method::kMetaWrapper: return "meta_wrapper";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  if (name == "base") return Method::kBase;
  if (name == "attention_only") return Method::kAttentionOnly;
  if (name == "m2") return Method::kM2;
  if (name == "gdmax") return Method::kGdmax;
  if (name == "meta_wrapper") return Method::kMetaWrapper;
  throw ConfigError("unknown method '" + name +
                    "' (expected base, attention_only, m2, gdmax or meta_wrapper)");
}

TrainResult train(const SplitDataset& data, const TrainConfig& cfg) {
  if (data.train.empty()) throw ConfigError("train: empty training split");
  Trainer trainer(data, cfg);
  Rng task_rng(cfg.seed ^ kTaskStreamSalt);

  TrainResult result;
  int64_t global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<TaskBatch> tasks =
        make_tasks(data.train, cfg.in_ratio, cfg.batch_size, task_rng);
    double inner_sum = 0.0, outer_sum = 0.0, ms_sum = 0.0;
    int64_t outer_count = 0;
    for (const TaskBatch& task : tasks) {
      ++global_step;
      const double gamma = lr_schedule(global_step, epoch, cfg.lr);
      const auto t0 = std::chrono::steady_clock::now();
      StepOutcome outcome;
      try {
        outcome = trainer.step(task, gamma);
      } catch (const NumericError& e) {
        throw NumericError("diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(global_step) + ": " + e.what());
      }
      const auto t1 = std::chrono::steady_clock::now();
      ms_sum += std::chrono::duration<double, std::milli>(t1 - t0).count();

      if (!std::isfinite(outcome.inner) || std::abs(outcome.inner) > cfg.divergence_threshold ||
          (trainer.uses_outer() &&
           (!std::isfinite(outcome.outer) || std::abs(outcome.outer) > cfg.divergence_threshold)))
        throw NumericError("diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(global_step) + ": loss left the finite range");
      inner_sum += outcome.inner;
      if (trainer.uses_outer()) {
        outer_sum += outcome.outer;
        ++outer_count;
      }
    }

    EpochMetrics em;
    em.epoch = epoch + 1;
    const auto n_steps = static_cast<double>(tasks.size());
    em.train_loss = inner_sum / n_steps;
    em.oob_loss = outer_count > 0 ? outer_sum / static_cast<double>(outer_count) : kNaN;
    em.step_ms_mean = ms_sum / n_steps;
    if (cfg.eval_each_epoch) {
      em.valid_auc = split_auc(data.valid, trainer.params(), trainer.variant(), cfg.pooling,
                               cfg.eval_batch_size);
      em.test_auc = split_auc(data.test, trainer.params(), trainer.variant(), cfg.pooling,
                              cfg.eval_batch_size);
    } else {
      em.valid_auc = kNaN;
      em.test_auc = kNaN;
    }
    result.metrics.epochs.push_back(em);
    if (cfg.on_epoch) cfg.on_epoch(em);
  }
  result.params = std::move(trainer.params());
  return result;
}

namespace {

nlohmann::ordered_json epoch_json(const EpochMetrics& e, bool with_timing) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["train_loss"] = e.train_loss;
  j["oob_loss"] = e.oob_loss;
  j["valid_auc"] = e.valid_auc;
  j["test_auc"] = e.test_auc;
  if (with_timing) j["step_ms_mean"] = e.step_ms_mean;
  return j;
}

}  // namespace

std::string metrics_to_jsonl(const RunMetrics& m) {
  std::string out;
  for (const EpochMetrics& e : m.epochs) out += epoch_json(e, true).dump() + "\n";
  return out;
}

std::string metrics_to_jsonl_stable(const RunMetrics& m) {
  std::string out;
  for (const EpochMetrics& e : m.epochs) out += epoch_json(e, false).dump() + "\n";
  return out;
}

namespace {

LossBuilder probe_builder(const JointProbe& p, const std::vector<const Instance*>& batch) {
  return [&p, &batch](const NodeMap& theta, const NodeMap& phi) {
    EmbeddingLookup emb = [&theta](int64_t fid) -> NodePtr {
      auto it = theta.find(embedding_key(fid));
      if (it == theta.end())
        throw Error("joint probe: embedding row " + std::to_string(fid) + " not in leaf set");
      return it->second;
    };
    return batch_loss(batch, emb, *p.shapes, theta, phi, ModelVariant::kSelector, p.pooling);
  };
}

struct ProbeMaps {
  NodeMap theta, phi;
};

ProbeMaps probe_maps(const JointProbe& p, const std::vector<Tensor>& values) {
  if (values.size() != p.names.size()) throw Error("joint probe: wrong number of value tensors");
  ProbeMaps m;
  for (size_t i = 0; i < p.names.size(); ++i) {
    if (!values[i].same_shape(p.at[i]))
      throw ShapeError("joint probe: value " + std::to_string(i) + " has shape " +
                       values[i].shape_str() + ", expected " + p.at[i].shape_str());
    const bool is_phi = i >= p.n_predictor && i < p.n_predictor + p.n_selector;
    (is_phi ? m.phi : m.theta)[p.names[i]] = input(values[i], p.names[i]);
  }
  return m;
}

}  // namespace

double JointProbe::value(const std::vector<Tensor>& values) const {
  const ProbeMaps m = probe_maps(*this, values);
  const LossBuilder inner = probe_builder(*this, d_in);
  if (mu == 0.0) return inner(m.theta, m.phi)->value().value();

  // Tensor-mode unroll: the update arithmetic is shared with the graph
  // build (same kernels, same order), but adjoints stay plain tensors so
  // the two evaluations per coordinate of central differencing stay cheap.
  // Equality with the graph-built joint value is asserted in the tests.
  double inner0 = 0.0;
  NodeMap th = m.theta;
  for (int j = 0; j < n_inner; ++j) {
    const NodePtr loss = inner(th, m.phi);
    if (j == 0) inner0 = loss->value().value();
    std::vector<NodePtr> wrt;
    wrt.reserve(th.size());
    for (const auto& [name, node] : th) wrt.push_back(node);
    const GradMap g = metawrap::gradient(loss, wrt, /*create_graph=*/false);
    NodeMap next;
    size_t i = 0;
    for (const auto& [name, node] : th) {
      next[name] = g.has_path(i) ? input(t_sub(node->value(), t_scale(g.tensor(i), beta)), name)
                                 : node;
      ++i;
    }
    th = std::move(next);
  }
  if (n_inner == 0) inner0 = inner(m.theta, m.phi)->value().value();
  const double outer_v = probe_builder(*this, d_out)(th, m.phi)->value().value();
  // Combine through the same kernels the graph total uses (scale, then add):
  // written inline the compiler may contract this into a fused multiply-add,
  // whose single rounding breaks bit-equality with the graph-built value.
  return t_add(Tensor::scalar(inner0), t_scale(Tensor::scalar(outer_v), mu)).value();
}

JointProbe::Graph JointProbe::graph() const {
  const ProbeMaps m = probe_maps(*this, at);
  const JointLoss jl = joint_loss(probe_builder(*this, d_in), probe_builder(*this, d_out),
                                  m.theta, m.phi, mu, beta, n_inner);
  Graph g;
  g.total = jl.total;
  g.leaves.reserve(names.size());
  for (size_t i = 0; i < names.size(); ++i) {
    const bool is_phi = i >= n_predictor && i < n_predictor + n_selector;
    g.leaves.push_back((is_phi ? m.phi : m.theta).at(names[i]));
  }
  return g;
}

std::vector<Tensor> JointProbe::gradient(const std::vector<Tensor>& values) const {
  const ProbeMaps m = probe_maps(*this, values);
  const MetaGradient mg = meta_gradient(probe_builder(*this, d_in), probe_builder(*this, d_out),
                                        m.theta, m.phi, mu, beta, n_inner);
  std::vector<Tensor> out;
  out.reserve(names.size());
  for (size_t i = 0; i < names.size(); ++i) {
    const bool is_phi = i >= n_predictor && i < n_predictor + n_selector;
    const auto& src = is_phi ? mg.phi : mg.theta;
    out.push_back(src.at(names[i]));
  }
  return out;
}

JointProbe make_joint_probe(const ParamSet& params, const std::vector<const Instance*>& d_in,
                            const std::vector<const Instance*>& d_out, double mu, double beta,
                            int n_inner, Pooling pooling) {
  JointProbe p;
  p.d_in = d_in;
  p.d_out = d_out;
  p.shapes = &params;
  p.mu = mu;
  p.beta = beta;
  p.n_inner = n_inner;
  p.pooling = pooling;

  const NodeMap pred = predictor_inputs(params);
  const NodeMap sel = selector_inputs(params);
  p.n_predictor = pred.size();
  p.n_selector = sel.size();
  for (const auto& [name, node] : pred) {
    p.names.push_back(name);
    p.at.push_back(node->value());
  }
  for (const auto& [name, node] : sel) {
    p.names.push_back(name);
    p.at.push_back(node->value());
  }

  std::vector<int64_t> fids;
  auto add_instance = [&](const Instance* inst) {
    for (size_t h = 0; h < inst->history_items.size(); ++h) {
      fids.push_back(params.item_fid(inst->history_items[h]));
      fids.push_back(params.cat_fid(inst->history_cats[h]));
    }
    fids.push_back(params.item_fid(inst->target_item));
    fids.push_back(params.cat_fid(inst->target_cat));
  };
  for (const Instance* inst : d_in) add_instance(inst);
  for (const Instance* inst : d_out) add_instance(inst);
  std::sort(fids.begin(), fids.end());
  fids.erase(std::unique(fids.begin(), fids.end()), fids.end());
  for (int64_t fid : fids) {
    p.names.push_back(embedding_key(fid));
    p.at.push_back(params.embedding_row(fid));
  }
  return p;
}

std::vector<double> bench_train_steps(const SplitDataset& data, const TrainConfig& cfg,
                                      int n_steps, int warmup) {
  if (n_steps < 1) throw ConfigError("bench: need at least one timed step");
  Trainer trainer(data, cfg);
  Rng task_rng(cfg.seed ^ kTaskStreamSalt);
  std::vector<TaskBatch> tasks = make_tasks(data.train, cfg.in_ratio, cfg.batch_size, task_rng);

  std::vector<double> ms;
  ms.reserve(static_cast<size_t>(n_steps));
  int64_t global_step = 0;
  size_t cursor = 0;
  for (int i = 0; i < warmup + n_steps; ++i) {
    if (cursor == tasks.size()) {
      tasks = make_tasks(data.train, cfg.in_ratio, cfg.batch_size, task_rng);
      cursor = 0;
    }
    ++global_step;
    const double gamma = lr_schedule(global_step, /*epoch=*/0, cfg.lr);
    const auto t0 = std::chrono::steady_clock::now();
    trainer.step(tasks[cursor], gamma);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= warmup) ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    ++cursor;
  }
  return ms;
}

std::vector<double> bench_inference(const std::vector<Instance>& instances, const ParamSet& params,
                                    ModelVariant variant, Pooling pooling, int n_batches,
                                    int64_t batch_size, int warmup) {
  if (instances.empty()) throw ConfigError("bench: no instances to score");
  if (n_batches < 1) throw ConfigError("bench: need at least one timed batch");
  std::vector<double> ms;
  ms.reserve(static_cast<size_t>(n_batches));
  size_t cursor = 0;
  std::vector<Instance> chunk;
  for (int i = 0; i < warmup + n_batches; ++i) {
    chunk.clear();
    for (int64_t b = 0; b < batch_size; ++b) {
      chunk.push_back(instances[cursor]);
      cursor = (cursor + 1) % instances.size();
    }
    const auto t0 = std::chrono::steady_clock::now();
    score_instances(chunk, params, variant, pooling, batch_size);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= warmup) ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return ms;
}

}  // namespace metawrap
