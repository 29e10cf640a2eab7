#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "metawrap/tensor.hpp"

namespace metawrap {

// Reverse-mode automatic differentiation over an eagerly evaluated,
// immutable DAG of tensor operations.
//
// Key properties:
//  * Values are computed at node construction (define-by-run); every op
//    checks its result for NaN/Inf and throws NumericError otherwise.
//  * Node ids are globally monotone, so ascending id order is a topological
//    order of any graph — backward is a single reverse-id sweep.
//  * gradient(..., create_graph=true) emits the adjoints as new graph nodes
//    built from the same op vocabulary, which makes gradients themselves
//    differentiable (double backprop, Hessian-vector products).
//  * gradient(..., create_graph=false) runs the identical accumulation rules
//    directly on tensors and returns detached results — same arithmetic,
//    no graph growth.

enum class Op {
  kInput,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kConcat,
  kSlice,
  kTranspose,
  kSigmoid,
  kSoftmax,
  kSum,
  kMean,
  kLog,
  kReciprocal,
  kScale,
  kClamp,
};

const char* op_name(Op op);

class Node;
using NodePtr = std::shared_ptr<const Node>;

class Node {
public:
  // Per-op attributes; which fields are meaningful depends on the op.
  struct Attr {
    int axis = 0;        // concat, slice
    int64_t offset = 0;  // slice
    int64_t extent = 0;  // slice
    double c0 = 0.0;     // scale factor / clamp lo
    double c1 = 0.0;     // clamp hi
  };

  Node(Op op, std::vector<NodePtr> parents, Tensor value, Attr attr, bool requires_grad,
       std::string name);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  uint64_t id() const { return id_; }
  Op op() const { return op_; }
  const std::vector<NodePtr>& parents() const { return parents_; }
  const Tensor& value() const { return value_; }
  const Attr& attr() const { return attr_; }
  // True only for kInput leaves created via input(); constants are leaves
  // with requires_grad() == false.
  bool requires_grad() const { return requires_grad_; }
  const std::string& name() const { return name_; }
  const std::vector<int64_t>& shape() const { return value_.shape(); }

private:
  uint64_t id_;
  Op op_;
  std::vector<NodePtr> parents_;
  Tensor value_;
  Attr attr_;
  bool requires_grad_;
  std::string name_;
};

// ---- leaf construction ----
NodePtr input(Tensor value, std::string name = "");     // differentiable leaf
NodePtr constant(Tensor value, std::string name = "");  // non-differentiable leaf
NodePtr constant_scalar(double value);

// ---- operations (values computed eagerly) ----
NodePtr matmul(const NodePtr& a, const NodePtr& b);
// Binary elementwise ops accept equal shapes or a scalar on either side.
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr concat(const std::vector<NodePtr>& parts, int axis);
NodePtr slice(const NodePtr& a, int axis, int64_t offset, int64_t extent);
NodePtr transpose(const NodePtr& a);
NodePtr sigmoid(const NodePtr& a);
NodePtr softmax(const NodePtr& a);  // over all elements
NodePtr sum(const NodePtr& a);      // -> {1}
NodePtr mean(const NodePtr& a);     // -> {1}
NodePtr log(const NodePtr& a);
NodePtr reciprocal(const NodePtr& a);
NodePtr scale(const NodePtr& a, double c);
NodePtr clamp(const NodePtr& a, double lo, double hi);

// Gradients of `scalar_root` with respect to a list of nodes, aligned by
// index. Parameters with no differentiable path from the root get a zero
// gradient and has_path() == false (a diagnostic, not an error).
class GradMap {
public:
  GradMap() = default;
  GradMap(std::vector<NodePtr> wrt, std::vector<NodePtr> grads, std::vector<uint8_t> has_path);

  size_t size() const { return grads_.size(); }
  const NodePtr& node(size_t i) const { return grads_.at(i); }
  const Tensor& tensor(size_t i) const { return grads_.at(i)->value(); }
  bool has_path(size_t i) const { return has_path_.at(i) != 0; }
  bool all_paths() const;

  // Lookup by the parameter node passed to gradient().
  const NodePtr& node(const NodePtr& param) const { return grads_.at(index_of(param)); }
  const Tensor& tensor(const NodePtr& param) const { return grads_.at(index_of(param))->value(); }
  bool has_path(const NodePtr& param) const { return has_path_.at(index_of(param)) != 0; }

private:
  size_t index_of(const NodePtr& param) const;
  std::vector<NodePtr> wrt_;
  std::vector<NodePtr> grads_;
  std::vector<uint8_t> has_path_;
  std::unordered_map<const Node*, size_t> index_;
};

// Reverse-mode gradient of a scalar-valued root.
//  * create_graph=false: adjoints are accumulated as plain tensors and the
//    results are detached constants (fast path, no graph growth).
//  * create_graph=true: adjoints are built as graph nodes, so the returned
//    gradients can be differentiated again.
GradMap gradient(const NodePtr& scalar_root, const std::vector<NodePtr>& wrt,
                 bool create_graph = false);

// Hessian-vector product via double backprop: differentiates sum_i
// <grad_i(scalar_root, grad_wrt), v_i> with respect to `wrt`. Cost is a
// small constant multiple of one gradient pass; no Hessian is materialized.
GradMap hvp(const NodePtr& scalar_root, const std::vector<NodePtr>& grad_wrt,
            const std::vector<Tensor>& v, const std::vector<NodePtr>& wrt);

// Pure re-evaluation of the graph under `root` with some leaves rebound to
// new values. No node is mutated; the graph can be replayed any number of
// times. Bound leaves must keep their original shapes.
using BindMap = std::unordered_map<const Node*, Tensor>;
Tensor forward(const NodePtr& root, const BindMap& bindings);

// Applies one operation to already-computed operand values — the exact kernel
// dispatch used both at node construction and inside forward(). Calling it on
// a leaf op is an error. `check_finite=false` skips the NaN/Inf guard on the
// result (the arithmetic is unchanged); bulk re-evaluation loops use it and
// rely on their own result checks.
Tensor eval_op(Op op, const Node::Attr& attr, const std::vector<const Tensor*>& in,
               bool check_finite = true);

// Number of Node objects currently alive (observability for tests/benchmarks).
int64_t live_node_count();

}  // namespace metawrap
