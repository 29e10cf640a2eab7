#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "metawrap/graph.hpp"
#include "metawrap/model.hpp"

namespace metawrap {

// Differentiable wrapping: unroll N steps of gradient descent on an inner
// objective as graph operations, so an outer objective evaluated at the
// unrolled iterate can be differentiated end to end — including the
// curvature terms that couple the selector parameters to the adapted
// predictor parameters (products of mixed second derivatives with the outer
// gradient, obtained here by double backprop rather than by materializing
// any Hessian).

// Builds the scalar loss graph for a given assignment of named parameter
// nodes. Called repeatedly with different iterates; must route every theta /
// phi dependence through the supplied maps.
using LossBuilder = std::function<NodePtr(const NodeMap& theta, const NodeMap& phi)>;

struct InnerTrace {
  std::vector<NodeMap> theta;       // iterates theta[0..N]
  std::vector<NodePtr> inner_loss;  // inner loss at theta[j], j = 0..N-1
  double beta = 0.0;
};

// N-step unrolled gradient descent on inner_loss starting from theta0 (the
// caller detaches by passing fresh leaves). Functional: no input is mutated;
// parameters without a gradient path pass through unchanged. The returned
// iterates remain differentiable w.r.t. theta0 and phi.
InnerTrace inner_update(const LossBuilder& inner_loss, const NodeMap& theta0, const NodeMap& phi,
                        double beta, int n_steps);

struct JointLoss {
  NodePtr total;   // inner + mu * outer(theta_N)
  NodePtr inner;   // inner loss at theta0
  NodePtr outer;   // outer loss at theta_N (null when mu == 0)
  InnerTrace trace;
};

// Joint objective: inner(theta0, phi) + mu * outer(theta_N(phi), phi).
// With mu == 0 the outer term (and the unroll) is dropped entirely and
// `total` is exactly the inner loss node.
JointLoss joint_loss(const LossBuilder& inner, const LossBuilder& outer, const NodeMap& theta0,
                     const NodeMap& phi, double mu, double beta, int n_steps);

struct MetaGradient {
  std::map<std::string, Tensor> theta;  // d total / d theta0
  std::map<std::string, Tensor> phi;    // d total / d phi
  double joint_value = 0.0;
  double inner_value = 0.0;
  double outer_value = 0.0;  // NaN when mu == 0
};

// One backward pass over the joint graph. The phi gradient carries both the
// direct outer dependence and the unrolled chain through every inner step;
// the theta gradient combines the inner-loss gradient with the path through
// theta0 into the unroll.
MetaGradient meta_gradient(const LossBuilder& inner, const LossBuilder& outer,
                           const NodeMap& theta0, const NodeMap& phi, double mu, double beta,
                           int n_steps);

struct SurrogateTerms {
  double outer_at_theta0 = 0.0;  // zeroth-order term of the expansion
  double delta = 0.0;            // -beta * sum_j <grad_in(theta_j), grad_out(theta_j)>
};

// First-order decomposition of outer(theta_N): outer(theta0) plus the
// alignment term accumulated along the descent path. For an outer objective
// linear in theta the decomposition is exact.
SurrogateTerms ablation_terms(const LossBuilder& inner, const LossBuilder& outer,
                              const NodeMap& theta0, const NodeMap& phi, double beta, int n_steps);

struct LrSpec {
  enum class Kind { kConstant, kExponential, kInvSqrt };
  Kind kind = Kind::kExponential;
  double gamma0 = 0.1;
  double decay = 0.9;  // exponential only
};

// Step size at a global step index (1-based) and epoch index (0-based):
// constant, gamma0 * decay^epoch, or gamma0 / sqrt(step).
double lr_schedule(int64_t step, int64_t epoch, const LrSpec& spec);

}  // namespace metawrap
