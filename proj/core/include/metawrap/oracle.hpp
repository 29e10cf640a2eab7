#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "metawrap/graph.hpp"
#include "metawrap/tensor.hpp"

namespace metawrap {

// Independent reference implementations used to check the production code.
// Nothing here goes through the graph engine's backward pass: derivatives
// come from finite differences and closed forms, AUC from brute-force pair
// counting. Deliberately simple and slow.

using ScalarFn = std::function<double(const std::vector<Tensor>&)>;

// Central-difference gradient of f at `at`, one coordinate at a time.
std::vector<Tensor> fd_gradient(const ScalarFn& f, const std::vector<Tensor>& at,
                                double eps = 1e-5);

// Hessian-vector product by central differences of finite-difference
// gradients: (grad f(x + eps v) - grad f(x - eps v)) / (2 eps).
std::vector<Tensor> fd_hvp(const ScalarFn& f, const std::vector<Tensor>& at,
                           const std::vector<Tensor>& v, double eps = 1e-4);

// Brute-force AUC over all positive/negative score pairs; ties count 1/2.
// Throws MetricError (see metrics.hpp) if either side is empty.
double brute_auc(const std::vector<double>& pos, const std::vector<double>& neg);

// Relative error with an absolute floor: |a - b| / max(|a|, |b|, 1).
double rel_err(double a, double b);
// Maximum rel_err over aligned elements.
double max_rel_err(const Tensor& a, const Tensor& b);

// A tiny quadratic bilevel instance with an analytically known hypergradient.
//
//   inner(theta, phi) = 1/2 (theta - a(phi))' A (theta - a(phi)),  a(phi) = a0 + P phi
//   outer(theta, phi) = 1/2 (theta - b)' B (theta - b) + c' theta + lambda/2 |phi|^2
//
// Gradient descent on the inner loss from theta0 with step beta has the
// closed form theta_N = a + (I - beta A)^N (theta0 - a), so the gradient of
// outer(theta_N(phi), phi) with respect to phi is available exactly:
//
//   hyper = P' (I - (I - beta A)^N)' (B (theta_N - b) + c) + lambda phi.
//
// With B = 0 the outer objective is linear in theta, which makes the
// first-order expansion of outer around theta0 exact — useful for checking
// the surrogate-decomposition identity with zero residual.
struct StubProblem {
  Tensor A;       // {d,d} symmetric positive definite
  Tensor a0;      // {d,1}
  Tensor P;       // {d,q}
  Tensor B;       // {d,d} symmetric positive semidefinite (zero => linear outer)
  Tensor b;       // {d,1}
  Tensor c;       // {d,1}
  double lambda = 0.0;
  Tensor theta0;  // {d,1} evaluation point
  Tensor phi;     // {q,1} evaluation point

  static StubProblem random(int64_t d, int64_t q, uint64_t seed, bool linear_outer = false);

  // Graph builders (the objects under test are built from these).
  NodePtr inner_loss(const NodePtr& theta, const NodePtr& phi) const;
  NodePtr outer_loss(const NodePtr& theta, const NodePtr& phi) const;

  // Closed forms (plain tensor arithmetic, no graphs).
  Tensor theta_after(const Tensor& theta0, const Tensor& phi, double beta, int n_steps) const;
  Tensor inner_grad_theta(const Tensor& theta, const Tensor& phi) const;
  Tensor inner_grad_phi(const Tensor& theta, const Tensor& phi) const;
  Tensor outer_grad_theta(const Tensor& theta) const;
  Tensor hypergradient(const Tensor& theta0, const Tensor& phi, double beta, int n_steps) const;
  // N -> infinity limit, valid for 0 < beta < 2 / lambda_max(A):
  // P' (B (a - b) + c) + lambda phi.
  Tensor hypergradient_limit(const Tensor& phi) const;

  double inner_value(const Tensor& theta, const Tensor& phi) const;
  double outer_value(const Tensor& theta, const Tensor& phi) const;
};

// Closed-form gradient of outer(theta_N(phi), phi) at the stub's own
// (theta0, phi) evaluation point.
Tensor stub_hypergradient(const StubProblem& stub, double beta, int n_steps);

// Randomly composed scalar-valued graph over a handful of differentiable
// leaves, drawing from the full op vocabulary while keeping values tame and
// the function twice differentiable at the evaluation point (clamp bounds
// far from the values, log/reciprocal fed positive inputs). Used to
// cross-check backward passes against finite differences.
struct RandomGraph {
  NodePtr root;
  std::vector<NodePtr> params;
  std::vector<Tensor> values;  // leaf values, aligned with params
};
RandomGraph make_random_graph(uint64_t seed);

// Black-box view of a graph for the finite-difference routines: evaluates
// `root` with the leaves in `params` rebound to the supplied values.
ScalarFn graph_scalar_fn(NodePtr root, std::vector<NodePtr> params);

// Precompiled repeated evaluation of a fixed scalar-rooted graph. The
// topological order and operand wiring are resolved once at construction, so
// each evaluation is a flat indexed walk; eval_one() additionally recomputes
// only the nodes downstream of the one changed leaf. That makes central
// differencing over every coordinate of a large graph affordable while still
// evaluating the graph's own arithmetic (the shared eval_op kernels).
//
// A leaf passed in `leaves` that does not occur in the graph is legal: its
// value is stored but changing it never affects the root (derivative zero).
class Replay {
public:
  Replay(const NodePtr& root, const std::vector<NodePtr>& leaves);

  size_t leaf_count() const { return leaf_values_.size(); }

  // Full evaluation with every leaf set to `leaf_values` (aligned with the
  // constructor's `leaves`). Returns the scalar root value.
  double eval_all(const std::vector<Tensor>& leaf_values);

  // Re-evaluation after changing only leaf `i`. Every node not downstream of
  // that leaf keeps the value it had after the previous call, so a sweep that
  // perturbs several leaves in turn must restore leaf `i` to its base value
  // (one more eval_one) before moving on to the next leaf.
  double eval_one(size_t i, const Tensor& leaf_value);

private:
  struct Step {
    Op op;
    Node::Attr attr;
    std::vector<uint32_t> args;  // operand slots
    uint32_t out;                // output slot
  };
  void run_step(const Step& st);

  std::vector<Step> steps_;                        // topological order
  std::vector<Tensor> slot_;                       // current node values
  std::vector<Tensor> leaf_values_;                // expected leaf shapes / unused-leaf storage
  std::vector<uint32_t> leaf_slot_;                // kNoSlot when leaf unused
  std::vector<std::vector<uint32_t>> downstream_;  // step indices per leaf
  std::vector<const Tensor*> scratch_;             // operand pointers, reused
  uint32_t root_slot_ = 0;
  static constexpr uint32_t kNoSlot = UINT32_MAX;
};

// Central-difference gradient over every leaf coordinate of a precompiled
// graph. Equivalent to the ScalarFn overload but shares all subgraph values
// a perturbation cannot reach. Leaves the replay restored to `at`.
std::vector<Tensor> fd_gradient(Replay& r, const std::vector<Tensor>& at, double eps = 1e-5);

}  // namespace metawrap
