#include "metawrap/graph.hpp"

#include <algorithm>
#include <atomic>
#include <optional>
#include <unordered_set>
#include <utility>

namespace metawrap {

namespace {

std::atomic<uint64_t> g_next_id{1};
std::atomic<int64_t> g_live_nodes{0};

}  // namespace

// Single evaluation kernel shared by eager construction and forward() replay.
Tensor eval_op(Op op, const Node::Attr& attr, const std::vector<const Tensor*>& in,
               bool check_finite) {
  Tensor out;
  switch (op) {
    case Op::kMatmul: out = t_matmul(*in[0], *in[1]); break;
    case Op::kAdd: out = t_add(*in[0], *in[1]); break;
    case Op::kSub: out = t_sub(*in[0], *in[1]); break;
    case Op::kMul: out = t_mul(*in[0], *in[1]); break;
    case Op::kConcat: out = t_concat(in, attr.axis); break;
    case Op::kSlice: out = t_slice(*in[0], attr.axis, attr.offset, attr.extent); break;
    case Op::kTranspose: out = t_transpose(*in[0]); break;
    case Op::kSigmoid: out = t_sigmoid(*in[0]); break;
    case Op::kSoftmax: out = t_softmax(*in[0]); break;
    case Op::kSum: out = t_sum(*in[0]); break;
    case Op::kMean: out = t_mean(*in[0]); break;
    case Op::kLog: out = t_log(*in[0]); break;
    case Op::kReciprocal: out = t_reciprocal(*in[0]); break;
    case Op::kScale: out = t_scale(*in[0], attr.c0); break;
    case Op::kClamp: out = t_clamp(*in[0], attr.c0, attr.c1); break;
    case Op::kInput: throw Error("eval_op called on a leaf node");
  }
  if (check_finite && !out.all_finite())
    throw NumericError(std::string("non-finite value produced by op '") + op_name(op) + "'");
  return out;
}

namespace {

NodePtr make(Op op, std::vector<NodePtr> parents, Node::Attr attr = {}) {
  std::vector<const Tensor*> ins;
  ins.reserve(parents.size());
  for (const NodePtr& p : parents) {
    if (!p) throw Error(std::string("null operand passed to op '") + op_name(op) + "'");
    ins.push_back(&p->value());
  }
  Tensor value = eval_op(op, attr, ins);
  return std::make_shared<const Node>(op, std::move(parents), std::move(value), attr, false,
                                      std::string());
}

NodePtr make_leaf(Tensor value, bool requires_grad, std::string name) {
  if (!value.all_finite())
    throw NumericError("non-finite value in leaf node" + (name.empty() ? "" : " '" + name + "'"));
  return std::make_shared<const Node>(Op::kInput, std::vector<NodePtr>{}, std::move(value),
                                      Node::Attr{}, requires_grad, std::move(name));
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kTranspose: return "transpose";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftmax: return "softmax";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kLog: return "log";
    case Op::kReciprocal: return "reciprocal";
    case Op::kScale: return "scale";
    case Op::kClamp: return "clamp";
  }
  return "?";
}

Node::Node(Op op, std::vector<NodePtr> parents, Tensor value, Attr attr, bool requires_grad,
           std::string name)
    : id_(g_next_id.fetch_add(1, std::memory_order_relaxed)),
      op_(op),
      parents_(std::move(parents)),
      value_(std::move(value)),
      attr_(attr),
      requires_grad_(requires_grad),
      name_(std::move(name)) {
  g_live_nodes.fetch_add(1, std::memory_order_relaxed);
}

Node::~Node() { g_live_nodes.fetch_sub(1, std::memory_order_relaxed); }

int64_t live_node_count() { return g_live_nodes.load(std::memory_order_relaxed); }

NodePtr input(Tensor value, std::string name) { return make_leaf(std::move(value), true, std::move(name)); }

NodePtr constant(Tensor value, std::string name) {
  return make_leaf(std::move(value), false, std::move(name));
}

NodePtr constant_scalar(double value) { return constant(Tensor::scalar(value)); }

NodePtr matmul(const NodePtr& a, const NodePtr& b) { return make(Op::kMatmul, {a, b}); }
NodePtr add(const NodePtr& a, const NodePtr& b) { return make(Op::kAdd, {a, b}); }
NodePtr sub(const NodePtr& a, const NodePtr& b) { return make(Op::kSub, {a, b}); }
NodePtr mul(const NodePtr& a, const NodePtr& b) { return make(Op::kMul, {a, b}); }

NodePtr concat(const std::vector<NodePtr>& parts, int axis) {
  Node::Attr attr;
  attr.axis = axis;
  return make(Op::kConcat, parts, attr);
}

NodePtr slice(const NodePtr& a, int axis, int64_t offset, int64_t extent) {
  Node::Attr attr;
  attr.axis = axis;
  attr.offset = offset;
  attr.extent = extent;
  return make(Op::kSlice, {a}, attr);
}

NodePtr transpose(const NodePtr& a) { return make(Op::kTranspose, {a}); }
NodePtr sigmoid(const NodePtr& a) { return make(Op::kSigmoid, {a}); }
NodePtr softmax(const NodePtr& a) { return make(Op::kSoftmax, {a}); }
NodePtr sum(const NodePtr& a) { return make(Op::kSum, {a}); }
NodePtr mean(const NodePtr& a) { return make(Op::kMean, {a}); }
NodePtr log(const NodePtr& a) { return make(Op::kLog, {a}); }
NodePtr reciprocal(const NodePtr& a) { return make(Op::kReciprocal, {a}); }

NodePtr scale(const NodePtr& a, double c) {
  Node::Attr attr;
  attr.c0 = c;
  return make(Op::kScale, {a}, attr);
}

NodePtr clamp(const NodePtr& a, double lo, double hi) {
  if (lo > hi) throw Error("clamp requires lo <= hi");
  Node::Attr attr;
  attr.c0 = lo;
  attr.c1 = hi;
  return make(Op::kClamp, {a}, attr);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

namespace {

// Reachable subgraph of `root` in descending-id (reverse topological) order,
// plus an activity mask: a node is active when a requested parameter lies
// among its ancestors, i.e. when its adjoint can flow into some requested
// gradient. Branches that only terminate in other leaves are skipped: their
// adjoints would be discarded, and skipping them cannot change surviving
// adjoints because every contribution a pruned node makes lands on another
// pruned node (an operand with a path to a requested parameter would have
// made it active).
struct Collected {
  std::vector<NodePtr> order;  // descending id
  std::unordered_map<const Node*, size_t> index;
  std::vector<uint8_t> active;

  bool is_active(const Node* n) const {
    auto it = index.find(n);
    return it != index.end() && active[it->second] != 0;
  }
};

Collected collect(const NodePtr& root, const std::vector<NodePtr>& wrt) {
  Collected c;
  std::unordered_set<const Node*> seen;
  std::vector<NodePtr> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    NodePtr n = std::move(stack.back());
    stack.pop_back();
    for (const NodePtr& p : n->parents())
      if (seen.insert(p.get()).second) stack.push_back(p);
    c.order.push_back(std::move(n));
  }
  std::sort(c.order.begin(), c.order.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->id() > b->id(); });
  c.index.reserve(c.order.size() * 2);
  for (size_t i = 0; i < c.order.size(); ++i) c.index.emplace(c.order[i].get(), i);

  std::unordered_set<const Node*> wrt_set;
  for (const NodePtr& w : wrt)
    if (w) wrt_set.insert(w.get());

  c.active.assign(c.order.size(), 0);
  // Ascending-id pass: parents precede children, and they sit at larger
  // indices of the descending-id order.
  for (size_t i = c.order.size(); i-- > 0;) {
    const Node* n = c.order[i].get();
    bool a = wrt_set.count(n) != 0;
    if (!a)
      for (const NodePtr& p : n->parents())
        if (c.active[c.index.at(p.get())]) {
          a = true;
          break;
        }
    c.active[i] = a ? 1 : 0;
  }
  return c;
}

// Adjoint algebra over plain tensors: fast first-order path, no graph growth.
struct TensorAlg {
  using V = Tensor;
  static const Tensor& lift(const NodePtr& n) { return n->value(); }
  static V make_const(Tensor t) { return t; }
  static V add(const V& a, const V& b) { return t_add(a, b); }
  static V sub(const V& a, const V& b) { return t_sub(a, b); }
  static V mul(const V& a, const V& b) { return t_mul(a, b); }
  static V matmul(const V& a, const V& b) { return t_matmul(a, b); }
  static V transpose(const V& a) { return t_transpose(a); }
  static V reciprocal(const V& a) { return t_reciprocal(a); }
  static V scale(const V& a, double c) { return t_scale(a, c); }
  static V sum(const V& a) { return t_sum(a); }
  static V slice(const V& a, int axis, int64_t off, int64_t ext) {
    return t_slice(a, axis, off, ext);
  }
  static V concat(const std::vector<V>& parts, int axis) {
    std::vector<const Tensor*> ps;
    ps.reserve(parts.size());
    for (const V& p : parts) ps.push_back(&p);
    return t_concat(ps, axis);
  }
};

// Adjoint algebra over graph nodes: gradients become differentiable nodes.
struct NodeAlg {
  using V = NodePtr;
  static const NodePtr& lift(const NodePtr& n) { return n; }
  static V make_const(Tensor t) { return metawrap::constant(std::move(t)); }
  static V add(const V& a, const V& b) { return metawrap::add(a, b); }
  static V sub(const V& a, const V& b) { return metawrap::sub(a, b); }
  static V mul(const V& a, const V& b) { return metawrap::mul(a, b); }
  static V matmul(const V& a, const V& b) { return metawrap::matmul(a, b); }
  static V transpose(const V& a) { return metawrap::transpose(a); }
  static V reciprocal(const V& a) { return metawrap::reciprocal(a); }
  static V scale(const V& a, double c) { return metawrap::scale(a, c); }
  static V sum(const V& a) { return metawrap::sum(a); }
  static V slice(const V& a, int axis, int64_t off, int64_t ext) {
    return metawrap::slice(a, axis, off, ext);
  }
  static V concat(const std::vector<V>& parts, int axis) { return metawrap::concat(parts, axis); }
};

bool same_shape(const NodePtr& a, const NodePtr& b) {
  return a->value().same_shape(b->value());
}

// Vector-Jacobian rules, shared by both adjoint algebras so the two backward
// modes cannot drift apart. `g` is the adjoint of `n`; contributions are
// handed to `put(parent, contrib)` for every active parent.
template <class Alg, class ActiveFn, class PutFn>
void vjp_node(const NodePtr& n, const typename Alg::V& g, ActiveFn&& is_active, PutFn&& put) {
  using V = typename Alg::V;
  const auto& ps = n->parents();
  switch (n->op()) {
    case Op::kInput:
      break;
    case Op::kMatmul: {
      if (is_active(ps[0].get()))
        put(ps[0], Alg::matmul(g, Alg::transpose(Alg::lift(ps[1]))));
      if (is_active(ps[1].get()))
        put(ps[1], Alg::matmul(Alg::transpose(Alg::lift(ps[0])), g));
      break;
    }
    case Op::kAdd: {
      for (int i = 0; i < 2; ++i)
        if (is_active(ps[i].get()))
          put(ps[i], same_shape(ps[i], n) ? V(g) : Alg::sum(g));
      break;
    }
    case Op::kSub: {
      if (is_active(ps[0].get())) put(ps[0], same_shape(ps[0], n) ? V(g) : Alg::sum(g));
      if (is_active(ps[1].get()))
        put(ps[1], Alg::scale(same_shape(ps[1], n) ? V(g) : Alg::sum(g), -1.0));
      break;
    }
    case Op::kMul: {
      for (int i = 0; i < 2; ++i) {
        if (!is_active(ps[i].get())) continue;
        V c = Alg::mul(g, Alg::lift(ps[1 - i]));
        if (!same_shape(ps[i], n)) c = Alg::sum(c);
        put(ps[i], std::move(c));
      }
      break;
    }
    case Op::kConcat: {
      const int axis = n->attr().axis;
      int64_t off = 0;
      for (const NodePtr& p : ps) {
        const int64_t ext = p->value().dim(axis);
        if (is_active(p.get())) put(p, Alg::slice(g, axis, off, ext));
        off += ext;
      }
      break;
    }
    case Op::kSlice: {
      if (!is_active(ps[0].get())) break;
      const auto& attr = n->attr();
      const auto& pshape = ps[0]->value().shape();
      const int axis = attr.axis;
      std::vector<V> parts;
      if (attr.offset > 0) {
        std::vector<int64_t> s = pshape;
        s[static_cast<size_t>(axis)] = attr.offset;
        parts.push_back(Alg::make_const(Tensor::zeros(s)));
      }
      parts.push_back(V(g));
      const int64_t after = pshape[static_cast<size_t>(axis)] - attr.offset - attr.extent;
      if (after > 0) {
        std::vector<int64_t> s = pshape;
        s[static_cast<size_t>(axis)] = after;
        parts.push_back(Alg::make_const(Tensor::zeros(s)));
      }
      put(ps[0], parts.size() == 1 ? std::move(parts[0]) : Alg::concat(parts, axis));
      break;
    }
    case Op::kTranspose: {
      if (is_active(ps[0].get())) put(ps[0], Alg::transpose(g));
      break;
    }
    case Op::kSigmoid: {
      if (!is_active(ps[0].get())) break;
      const auto& s = Alg::lift(n);  // reuse the computed output
      V ds = Alg::mul(s, Alg::sub(Alg::make_const(Tensor::scalar(1.0)), s));
      put(ps[0], Alg::mul(std::move(ds), g));
      break;
    }
    case Op::kSoftmax: {
      if (!is_active(ps[0].get())) break;
      const auto& p = Alg::lift(n);
      V dot = Alg::sum(Alg::mul(p, g));
      put(ps[0], Alg::mul(p, Alg::sub(g, dot)));
      break;
    }
    case Op::kSum: {
      if (is_active(ps[0].get()))
        put(ps[0], Alg::mul(Alg::make_const(Tensor::ones(ps[0]->value().shape())), g));
      break;
    }
    case Op::kMean: {
      if (is_active(ps[0].get())) {
        const double inv = 1.0 / static_cast<double>(ps[0]->value().numel());
        put(ps[0], Alg::mul(Alg::make_const(Tensor::ones(ps[0]->value().shape())),
                            Alg::scale(g, inv)));
      }
      break;
    }
    case Op::kLog: {
      if (is_active(ps[0].get()))
        put(ps[0], Alg::mul(g, Alg::reciprocal(Alg::lift(ps[0]))));
      break;
    }
    case Op::kReciprocal: {
      if (!is_active(ps[0].get())) break;
      const auto& r = Alg::lift(n);
      put(ps[0], Alg::scale(Alg::mul(Alg::mul(r, r), g), -1.0));
      break;
    }
    case Op::kScale: {
      if (is_active(ps[0].get())) put(ps[0], Alg::scale(g, n->attr().c0));
      break;
    }
    case Op::kClamp: {
      if (is_active(ps[0].get())) {
        Tensor mask = t_clamp_mask(ps[0]->value(), n->attr().c0, n->attr().c1);
        put(ps[0], Alg::mul(g, Alg::make_const(std::move(mask))));
      }
      break;
    }
  }
}

template <class Alg>
std::vector<std::optional<typename Alg::V>> sweep(const Collected& c, const NodePtr& root) {
  using V = typename Alg::V;
  std::vector<std::optional<V>> adj(c.order.size());
  const size_t root_slot = c.index.at(root.get());
  if (c.active[root_slot]) adj[root_slot] = Alg::make_const(Tensor::ones(root->value().shape()));
  for (size_t i = 0; i < c.order.size(); ++i) {
    if (!adj[i].has_value()) continue;
    const NodePtr& n = c.order[i];
    auto is_active = [&](const Node* p) { return c.is_active(p); };
    auto put = [&](const NodePtr& p, V contrib) {
      const size_t j = c.index.at(p.get());
      if (adj[j].has_value())
        adj[j] = Alg::add(*adj[j], contrib);
      else
        adj[j] = std::move(contrib);
    };
    vjp_node<Alg>(n, *adj[i], is_active, put);
  }
  return adj;
}

}  // namespace

GradMap::GradMap(std::vector<NodePtr> wrt, std::vector<NodePtr> grads,
                 std::vector<uint8_t> has_path)
    : wrt_(std::move(wrt)), grads_(std::move(grads)), has_path_(std::move(has_path)) {
  index_.reserve(wrt_.size() * 2);
  for (size_t i = 0; i < wrt_.size(); ++i) index_.emplace(wrt_[i].get(), i);
}

bool GradMap::all_paths() const {
  for (uint8_t h : has_path_)
    if (!h) return false;
  return true;
}

size_t GradMap::index_of(const NodePtr& param) const {
  auto it = index_.find(param.get());
  if (it == index_.end()) throw Error("parameter not present in GradMap");
  return it->second;
}

GradMap gradient(const NodePtr& scalar_root, const std::vector<NodePtr>& wrt, bool create_graph) {
  if (!scalar_root) throw Error("gradient requires a non-null root");
  if (scalar_root->value().numel() != 1)
    throw ShapeError("gradient requires a scalar root, got shape " +
                     scalar_root->value().shape_str());
  for (const NodePtr& w : wrt)
    if (!w) throw Error("gradient: null parameter in wrt list");

  Collected c = collect(scalar_root, wrt);

  std::vector<NodePtr> grads(wrt.size());
  std::vector<uint8_t> has_path(wrt.size(), 0);

  auto finish = [&](auto&& grad_at) {
    for (size_t i = 0; i < wrt.size(); ++i) {
      NodePtr g = grad_at(wrt[i]);
      if (g) {
        grads[i] = std::move(g);
        has_path[i] = 1;
      } else {
        grads[i] = constant(Tensor::zeros(wrt[i]->value().shape()));
      }
    }
  };

  if (create_graph) {
    auto adj = sweep<NodeAlg>(c, scalar_root);
    finish([&](const NodePtr& w) -> NodePtr {
      auto it = c.index.find(w.get());
      if (it == c.index.end() || !adj[it->second].has_value()) return nullptr;
      return *adj[it->second];
    });
  } else {
    auto adj = sweep<TensorAlg>(c, scalar_root);
    finish([&](const NodePtr& w) -> NodePtr {
      auto it = c.index.find(w.get());
      if (it == c.index.end() || !adj[it->second].has_value()) return nullptr;
      return constant(std::move(*adj[it->second]));
    });
  }
  return GradMap(wrt, std::move(grads), std::move(has_path));
}

GradMap hvp(const NodePtr& scalar_root, const std::vector<NodePtr>& grad_wrt,
            const std::vector<Tensor>& v, const std::vector<NodePtr>& wrt) {
  if (grad_wrt.empty()) throw Error("hvp requires at least one gradient parameter");
  if (grad_wrt.size() != v.size())
    throw Error("hvp: vector count " + std::to_string(v.size()) + " does not match parameter count " +
                std::to_string(grad_wrt.size()));
  for (size_t i = 0; i < v.size(); ++i)
    if (!v[i].same_shape(grad_wrt[i]->value()))
      throw ShapeError("hvp: vector " + std::to_string(i) + " has shape " + v[i].shape_str() +
                       ", parameter has " + grad_wrt[i]->value().shape_str());

  GradMap g = gradient(scalar_root, grad_wrt, /*create_graph=*/true);
  NodePtr acc;
  for (size_t i = 0; i < grad_wrt.size(); ++i) {
    NodePtr term = sum(mul(g.node(i), constant(v[i])));
    acc = acc ? add(acc, term) : term;
  }
  return gradient(acc, wrt, /*create_graph=*/false);
}

Tensor forward(const NodePtr& root, const BindMap& bindings) {
  if (!root) throw Error("forward requires a non-null root");
  for (const auto& [node, value] : bindings) {
    if (node->op() != Op::kInput)
      throw Error("forward: bindings may only target leaf nodes");
    if (!value.same_shape(node->value()))
      throw ShapeError("forward: binding shape " + value.shape_str() +
                       " does not match leaf shape " + node->value().shape_str());
  }

  std::unordered_map<const Node*, Tensor> memo;
  std::vector<std::pair<const Node*, bool>> stack{{root.get(), false}};
  while (!stack.empty()) {
    auto [n, expanded] = stack.back();
    stack.pop_back();
    if (memo.count(n)) continue;
    if (!expanded) {
      stack.emplace_back(n, true);
      for (const NodePtr& p : n->parents())
        if (!memo.count(p.get())) stack.emplace_back(p.get(), false);
      continue;
    }
    if (n->op() == Op::kInput) {
      auto it = bindings.find(n);
      Tensor v = (it != bindings.end()) ? it->second : n->value();
      if (!v.all_finite()) throw NumericError("non-finite value bound to leaf node");
      memo.emplace(n, std::move(v));
    } else {
      std::vector<const Tensor*> ins;
      ins.reserve(n->parents().size());
      for (const NodePtr& p : n->parents()) ins.push_back(&memo.at(p.get()));
      memo.emplace(n, eval_op(n->op(), n->attr(), ins));
    }
  }
  return memo.at(root.get());
}

}  // namespace metawrap
