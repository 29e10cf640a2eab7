#include "metawrap/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "metawrap/metrics.hpp"
#include "metawrap/rng.hpp"

namespace metawrap {

std::vector<Tensor> fd_gradient(const ScalarFn& f, const std::vector<Tensor>& at, double eps) {
  if (eps <= 0.0) throw Error("fd_gradient requires eps > 0");
  std::vector<Tensor> grads;
  grads.reserve(at.size());
  std::vector<Tensor> point = at;
  for (size_t i = 0; i < at.size(); ++i) {
    Tensor g(at[i].shape());
    for (int64_t j = 0; j < at[i].numel(); ++j) {
      const double orig = point[i][j];
      point[i][j] = orig + eps;
      const double fp = f(point);
      point[i][j] = orig - eps;
      const double fm = f(point);
      point[i][j] = orig;
      g[j] = (fp - fm) / (2.0 * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

std::vector<Tensor> fd_hvp(const ScalarFn& f, const std::vector<Tensor>& at,
                           const std::vector<Tensor>& v, double eps) {
  if (at.size() != v.size()) throw Error("fd_hvp: point/vector arity mismatch");
  for (size_t i = 0; i < at.size(); ++i)
    if (!at[i].same_shape(v[i]))
      throw ShapeError("fd_hvp: vector " + std::to_string(i) + " has shape " + v[i].shape_str() +
                       ", point has " + at[i].shape_str());
  std::vector<Tensor> plus = at, minus = at;
  for (size_t i = 0; i < at.size(); ++i)
    for (int64_t j = 0; j < at[i].numel(); ++j) {
      plus[i][j] += eps * v[i][j];
      minus[i][j] -= eps * v[i][j];
    }
  const std::vector<Tensor> gp = fd_gradient(f, plus);
  const std::vector<Tensor> gm = fd_gradient(f, minus);
  std::vector<Tensor> out;
  out.reserve(at.size());
  for (size_t i = 0; i < at.size(); ++i) {
    Tensor h(at[i].shape());
    for (int64_t j = 0; j < at[i].numel(); ++j) h[j] = (gp[i][j] - gm[i][j]) / (2.0 * eps);
    out.push_back(std::move(h));
  }
  return out;
}

double brute_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty())
    throw MetricError("AUC undefined: need at least one positive and one negative score");
  double s = 0.0;
  for (const double p : pos)
    for (const double n : neg) {
      if (p > n)
        s += 1.0;
      else if (p == n)
        s += 0.5;
    }
  return s / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

double max_rel_err(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw ShapeError("max_rel_err requires equal shapes, got " + a.shape_str() + " vs " +
                     b.shape_str());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, rel_err(a[i], b[i]));
  return m;
}

namespace {

Tensor identity(int64_t d) {
  Tensor t({d, d});
  for (int64_t i = 0; i < d; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor matrix_power(const Tensor& m, int n) {
  Tensor out = identity(m.dim(0));
  for (int i = 0; i < n; ++i) out = t_matmul(out, m);
  return out;
}

// Symmetric PSD matrix M M' / d plus ridge * I.
Tensor random_spd(int64_t d, Rng& rng, double ridge) {
  Tensor m({d, d});
  for (int64_t i = 0; i < d * d; ++i) m[i] = rng.uniform(-1.0, 1.0);
  Tensor s = t_scale(t_matmul(m, t_transpose(m)), 1.0 / static_cast<double>(d));
  for (int64_t i = 0; i < d; ++i) s.at(i, i) += ridge;
  return s;
}

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

StubProblem StubProblem::random(int64_t d, int64_t q, uint64_t seed, bool linear_outer) {
  Rng rng(seed);
  StubProblem s;
  s.A = random_spd(d, rng, 0.5);
  s.a0 = random_tensor({d, 1}, rng, -1.0, 1.0);
  s.P = random_tensor({d, q}, rng, -1.0, 1.0);
  s.B = linear_outer ? Tensor::zeros({d, d}) : random_spd(d, rng, 0.1);
  s.b = random_tensor({d, 1}, rng, -1.0, 1.0);
  s.c = random_tensor({d, 1}, rng, -1.0, 1.0);
  s.lambda = rng.uniform(0.05, 0.5);
  s.theta0 = random_tensor({d, 1}, rng, -1.0, 1.0);
  s.phi = random_tensor({q, 1}, rng, -1.0, 1.0);
  return s;
}

NodePtr StubProblem::inner_loss(const NodePtr& theta, const NodePtr& phi_node) const {
  const NodePtr target = add(constant(a0, "stub.a0"), matmul(constant(P, "stub.P"), phi_node));
  const NodePtr d = sub(theta, target);
  const NodePtr ad = matmul(constant(A, "stub.A"), d);
  return scale(sum(mul(d, ad)), 0.5);
}

NodePtr StubProblem::outer_loss(const NodePtr& theta, const NodePtr& phi_node) const {
  const NodePtr e = sub(theta, constant(b, "stub.b"));
  const NodePtr be = matmul(constant(B, "stub.B"), e);
  NodePtr out = scale(sum(mul(e, be)), 0.5);
  out = add(out, sum(mul(constant(c, "stub.c"), theta)));
  out = add(out, scale(sum(mul(phi_node, phi_node)), lambda * 0.5));
  return out;
}

Tensor StubProblem::theta_after(const Tensor& th0, const Tensor& ph, double beta,
                                int n_steps) const {
  if (n_steps == 0 || beta == 0.0) return th0;  // no movement, exactly
  const Tensor a = t_add(a0, t_matmul(P, ph));
  const Tensor w = matrix_power(t_sub(identity(A.dim(0)), t_scale(A, beta)), n_steps);
  return t_add(a, t_matmul(w, t_sub(th0, a)));
}

Tensor StubProblem::inner_grad_theta(const Tensor& theta, const Tensor& ph) const {
  const Tensor a = t_add(a0, t_matmul(P, ph));
  return t_matmul(A, t_sub(theta, a));
}

Tensor StubProblem::inner_grad_phi(const Tensor& theta, const Tensor& ph) const {
  const Tensor a = t_add(a0, t_matmul(P, ph));
  return t_scale(t_matmul(t_transpose(P), t_matmul(A, t_sub(theta, a))), -1.0);
}

Tensor StubProblem::outer_grad_theta(const Tensor& theta) const {
  return t_add(t_matmul(B, t_sub(theta, b)), c);
}

Tensor StubProblem::hypergradient(const Tensor& th0, const Tensor& ph, double beta,
                                  int n_steps) const {
  const Tensor thn = theta_after(th0, ph, beta, n_steps);
  const Tensor w = matrix_power(t_sub(identity(A.dim(0)), t_scale(A, beta)), n_steps);
  const Tensor m = t_sub(identity(A.dim(0)), w);  // I - (I - beta A)^N
  const Tensor gtheta = outer_grad_theta(thn);
  Tensor out = t_matmul(t_transpose(P), t_matmul(t_transpose(m), gtheta));
  return t_add(out, t_scale(ph, lambda));
}

Tensor StubProblem::hypergradient_limit(const Tensor& ph) const {
  const Tensor a = t_add(a0, t_matmul(P, ph));
  const Tensor gtheta = t_add(t_matmul(B, t_sub(a, b)), c);
  return t_add(t_matmul(t_transpose(P), gtheta), t_scale(ph, lambda));
}

double StubProblem::inner_value(const Tensor& theta, const Tensor& ph) const {
  const Tensor a = t_add(a0, t_matmul(P, ph));
  const Tensor d = t_sub(theta, a);
  return 0.5 * t_dot(d, t_matmul(A, d));
}

double StubProblem::outer_value(const Tensor& theta, const Tensor& ph) const {
  const Tensor e = t_sub(theta, b);
  return 0.5 * t_dot(e, t_matmul(B, e)) + t_dot(c, theta) + 0.5 * lambda * t_dot(ph, ph);
}

Tensor stub_hypergradient(const StubProblem& stub, double beta, int n_steps) {
  return stub.hypergradient(stub.theta0, stub.phi, beta, n_steps);
}

namespace {

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t[i]));
  return m;
}

// Smoothly squash a node whose values have drifted large, so long op chains
// stay in a well-conditioned range for finite differencing.
NodePtr tamed(NodePtr x) {
  if (max_abs(x->value()) > 10.0) return sigmoid(scale(std::move(x), 0.1));
  return x;
}

Tensor random_tensor(const std::vector<int64_t>& shape, Rng& rng) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.5, 1.5);
  return t;
}

// Strictly positive, smooth transform of an arbitrary node; safe argument
// for log and reciprocal.
NodePtr positive_of(const NodePtr& x) { return add(sigmoid(x), constant_scalar(0.1)); }

}  // namespace

RandomGraph make_random_graph(uint64_t seed) {
  Rng rng(seed);
  const std::vector<std::vector<int64_t>> shape_pool = {{1},    {2, 1}, {3, 1},
                                                        {2, 2}, {2, 3}, {3, 2}};
  RandomGraph g;
  std::vector<NodePtr> pool;

  const size_t n_params = 2 + rng.index(3);  // 2..4 differentiable leaves
  for (size_t i = 0; i < n_params; ++i) {
    const auto& shp = shape_pool[rng.index(shape_pool.size())];
    Tensor t = random_tensor(shp, rng);
    NodePtr p = input(t, "p" + std::to_string(i));
    g.params.push_back(p);
    g.values.push_back(std::move(t));
    pool.push_back(std::move(p));
  }
  const size_t n_const = 1 + rng.index(2);  // 1..2 frozen leaves
  for (size_t i = 0; i < n_const; ++i) {
    const auto& shp = shape_pool[rng.index(shape_pool.size())];
    pool.push_back(constant(random_tensor(shp, rng)));
  }

  auto pick = [&]() -> const NodePtr& { return pool[rng.index(pool.size())]; };
  auto pick_rank2 = [&]() -> NodePtr {
    for (int tries = 0; tries < 16; ++tries) {
      const NodePtr& n = pick();
      if (n->value().rank() == 2) return n;
    }
    return nullptr;
  };

  const size_t n_ops = 6 + rng.index(7);  // 6..12 composite nodes
  for (size_t i = 0; i < n_ops; ++i) {
    NodePtr out;
    switch (rng.index(13)) {
      case 0: {  // add / sub / mul with shape-compatible operands
        const NodePtr& a = pick();
        NodePtr b;
        for (int tries = 0; tries < 16 && !b; ++tries) {
          const NodePtr& c = pick();
          if (c->value().same_shape(a->value()) || c->value().is_scalar() ||
              a->value().is_scalar())
            b = c;
        }
        if (!b) b = a;
        const size_t which = rng.index(3);
        out = which == 0 ? add(a, b) : which == 1 ? sub(a, b) : mul(a, b);
        break;
      }
      case 1: {  // matmul; falls back to the always-valid gram product
        NodePtr a = pick_rank2();
        if (!a) break;
        NodePtr b;
        for (int tries = 0; tries < 16 && !b; ++tries) {
          const NodePtr& c = pick();
          if (c->value().rank() == 2 && c->value().dim(0) == a->value().dim(1)) b = c;
        }
        out = b ? matmul(a, b) : matmul(transpose(a), a);
        break;
      }
      case 2:
        out = sigmoid(pick());
        break;
      case 3:
        out = softmax(pick());
        break;
      case 4:
        out = scale(pick(), (rng.bernoulli(0.5) ? 1.0 : -1.0) * (0.3 + rng.uniform() * 1.7));
        break;
      case 5:
        out = log(positive_of(pick()));
        break;
      case 6:
        out = reciprocal(positive_of(pick()));
        break;
      case 7: {
        NodePtr a = pick_rank2();
        if (a) out = transpose(a);
        break;
      }
      case 8:
        // Bounds far outside the tamed value range: smooth at the
        // evaluation point while still exercising the clamp backward rule.
        out = clamp(pick(), -50.0, 50.0);
        break;
      case 9: {
        NodePtr a = pick_rank2();
        if (a) out = concat({a, a}, rng.bernoulli(0.5) ? 1 : 0);
        break;
      }
      case 10: {
        NodePtr a = pick_rank2();
        if (!a) break;
        const int axis = rng.bernoulli(0.5) ? 0 : 1;
        const int64_t dim = a->value().dim(axis);
        const int64_t extent = 1 + static_cast<int64_t>(rng.index(static_cast<size_t>(dim)));
        const int64_t offset = static_cast<int64_t>(rng.index(static_cast<size_t>(dim - extent) + 1));
        out = slice(a, axis, offset, extent);
        break;
      }
      case 11:
        out = sum(pick());
        break;
      default:
        out = mean(pick());
        break;
    }
    if (out) pool.push_back(tamed(std::move(out)));
  }

  // Scalar root that blends the two most recently built nodes.
  NodePtr a = pool[pool.size() - 1];
  NodePtr b = pool[pool.size() - 2];
  g.root = add(mean(a), mean(b));
  return g;
}

ScalarFn graph_scalar_fn(NodePtr root, std::vector<NodePtr> params) {
  return [root = std::move(root), params = std::move(params)](const std::vector<Tensor>& at) {
    if (at.size() != params.size()) throw Error("graph_scalar_fn: arity mismatch");
    BindMap binds;
    for (size_t i = 0; i < params.size(); ++i) binds.emplace(params[i].get(), at[i]);
    return forward(root, binds).value();
  };
}

Replay::Replay(const NodePtr& root, const std::vector<NodePtr>& leaves) {
  if (!root) throw Error("replay: null root");
  if (root->value().numel() != 1)
    throw ShapeError("replay: root must be scalar, got " + root->value().shape_str());

  // Reachable nodes in topological order. Node ids are globally monotone and
  // parents exist before children, so ascending id is a valid order.
  std::vector<const Node*> order;
  std::unordered_set<const Node*> seen;
  std::vector<const Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const NodePtr& p : n->parents())
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id() < b->id(); });

  std::unordered_map<const Node*, uint32_t> slot_of;
  slot_of.reserve(order.size() * 2);
  slot_.reserve(order.size());
  steps_.reserve(order.size());
  for (const Node* n : order) {
    const auto s = static_cast<uint32_t>(slot_.size());
    slot_of.emplace(n, s);
    slot_.push_back(n->value());
    if (n->op() == Op::kInput) continue;
    Step st;
    st.op = n->op();
    st.attr = n->attr();
    st.args.reserve(n->parents().size());
    for (const NodePtr& p : n->parents()) st.args.push_back(slot_of.at(p.get()));
    st.out = s;
    steps_.push_back(std::move(st));
  }
  root_slot_ = slot_of.at(root.get());

  leaf_slot_.reserve(leaves.size());
  leaf_values_.reserve(leaves.size());
  for (const NodePtr& l : leaves) {
    if (!l) throw Error("replay: null leaf");
    if (l->op() != Op::kInput) throw Error("replay: leaves must be input nodes");
    auto it = slot_of.find(l.get());
    leaf_slot_.push_back(it == slot_of.end() ? kNoSlot : it->second);
    leaf_values_.push_back(l->value());
  }

  // Steps downstream of each leaf: a step is affected when any operand slot
  // is the leaf itself or the output of an affected earlier step.
  downstream_.resize(leaves.size());
  std::vector<uint8_t> dirty(slot_.size(), 0);
  for (size_t i = 0; i < leaves.size(); ++i) {
    if (leaf_slot_[i] == kNoSlot) continue;
    std::fill(dirty.begin(), dirty.end(), 0);
    dirty[leaf_slot_[i]] = 1;
    for (size_t s = 0; s < steps_.size(); ++s) {
      bool hit = false;
      for (uint32_t a : steps_[s].args)
        if (dirty[a]) {
          hit = true;
          break;
        }
      if (hit) {
        dirty[steps_[s].out] = 1;
        downstream_[i].push_back(static_cast<uint32_t>(s));
      }
    }
  }
}

void Replay::run_step(const Step& st) {
  // Hot ops write straight into the fixed-shape output slot (a node is never
  // its own parent, so output and operands cannot alias); the rest go through
  // the allocating dispatch. The per-op finiteness guard is skipped either
  // way: a non-finite intermediate only makes the replayed root differ wildly
  // from the reference, which the calling check's tolerance flags anyway.
  Tensor& out = slot_[st.out];
  switch (st.op) {
    case Op::kMatmul: t_matmul_to(out.data(), slot_[st.args[0]], slot_[st.args[1]]); return;
    case Op::kAdd: t_add_to(out.data(), slot_[st.args[0]], slot_[st.args[1]]); return;
    case Op::kSub: t_sub_to(out.data(), slot_[st.args[0]], slot_[st.args[1]]); return;
    case Op::kMul: t_mul_to(out.data(), slot_[st.args[0]], slot_[st.args[1]]); return;
    case Op::kTranspose: t_transpose_to(out.data(), slot_[st.args[0]]); return;
    case Op::kSigmoid: t_sigmoid_to(out.data(), slot_[st.args[0]]); return;
    case Op::kScale: t_scale_to(out.data(), slot_[st.args[0]], st.attr.c0); return;
    default: break;
  }
  scratch_.clear();
  for (uint32_t a : st.args) scratch_.push_back(&slot_[a]);
  slot_[st.out] = eval_op(st.op, st.attr, scratch_, /*check_finite=*/false);
}

double Replay::eval_all(const std::vector<Tensor>& leaf_values) {
  if (leaf_values.size() != leaf_slot_.size())
    throw Error("replay: expected " + std::to_string(leaf_slot_.size()) + " leaf values, got " +
                std::to_string(leaf_values.size()));
  for (size_t i = 0; i < leaf_values.size(); ++i) {
    if (!leaf_values[i].same_shape(leaf_values_[i]))
      throw ShapeError("replay: leaf " + std::to_string(i) + " has shape " +
                       leaf_values[i].shape_str() + ", expected " + leaf_values_[i].shape_str());
    leaf_values_[i] = leaf_values[i];
    if (leaf_slot_[i] != kNoSlot) slot_[leaf_slot_[i]] = leaf_values[i];
  }
  for (const Step& st : steps_) run_step(st);
  return slot_[root_slot_].value();
}

double Replay::eval_one(size_t i, const Tensor& leaf_value) {
  if (i >= leaf_slot_.size()) throw Error("replay: leaf index out of range");
  if (!leaf_value.same_shape(leaf_values_[i]))
    throw ShapeError("replay: leaf " + std::to_string(i) + " has shape " +
                     leaf_value.shape_str() + ", expected " + leaf_values_[i].shape_str());
  const uint32_t ls = leaf_slot_[i];
  if (ls == kNoSlot) {
    leaf_values_[i] = leaf_value;
    return slot_[root_slot_].value();
  }
  slot_[ls] = leaf_value;
  for (uint32_t s : downstream_[i]) run_step(steps_[s]);
  return slot_[root_slot_].value();
}

std::vector<Tensor> fd_gradient(Replay& r, const std::vector<Tensor>& at, double eps) {
  if (eps <= 0.0) throw Error("fd_gradient requires eps > 0");
  r.eval_all(at);
  std::vector<Tensor> grads;
  grads.reserve(at.size());
  for (size_t i = 0; i < at.size(); ++i) {
    Tensor g(at[i].shape());
    Tensor work = at[i];
    for (int64_t j = 0; j < at[i].numel(); ++j) {
      const double orig = at[i][j];
      work[j] = orig + eps;
      const double fp = r.eval_one(i, work);
      work[j] = orig - eps;
      const double fm = r.eval_one(i, work);
      work[j] = orig;
      g[j] = (fp - fm) / (2.0 * eps);
    }
    // Put the leaf back so nodes only this leaf reaches hold base values
    // again before the next leaf's sweep.
    r.eval_one(i, at[i]);
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace metawrap
