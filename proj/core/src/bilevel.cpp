#include "metawrap/bilevel.hpp"

#include <cmath>
#include <limits>

namespace metawrap {

namespace {

std::vector<NodePtr> map_values(const NodeMap& m) {
  std::vector<NodePtr> out;
  out.reserve(m.size());
  for (const auto& [name, node] : m) out.push_back(node);
  return out;
}

}  // namespace

InnerTrace inner_update(const LossBuilder& inner_loss, const NodeMap& theta0, const NodeMap& phi,
                        double beta, int n_steps) {
  if (n_steps < 0) throw ConfigError("inner_update: step count must be non-negative");
  if (theta0.empty()) throw ConfigError("inner_update: empty parameter set");
  InnerTrace trace;
  trace.beta = beta;
  trace.theta.push_back(theta0);
  for (int j = 1; j <= n_steps; ++j) {
    const NodeMap& prev = trace.theta.back();
    NodePtr loss;
    try {
      loss = inner_loss(prev, phi);
    } catch (const NumericError& e) {
      throw NumericError("inner step " + std::to_string(j) + ": " + e.what());
    }
    if (loss->value().numel() != 1)
      throw ShapeError("inner loss must be scalar, got " + loss->value().shape_str());
    trace.inner_loss.push_back(loss);

    const std::vector<NodePtr> wrt = map_values(prev);
    GradMap grads;
    try {
      grads = gradient(loss, wrt, /*create_graph=*/true);
    } catch (const NumericError& e) {
      throw NumericError("inner step " + std::to_string(j) + " gradient: " + e.what());
    }
    NodeMap next;
    size_t i = 0;
    for (const auto& [name, node] : prev) {
      // Parameters the inner batch never touches keep their node: the update
      // would subtract an exact zero and only bloat the graph.
      next[name] = grads.has_path(i) ? sub(node, scale(grads.node(i), beta)) : node;
      ++i;
    }
    trace.theta.push_back(std::move(next));
  }
  return trace;
}

JointLoss joint_loss(const LossBuilder& inner, const LossBuilder& outer, const NodeMap& theta0,
                     const NodeMap& phi, double mu, double beta, int n_steps) {
  if (mu < 0.0 || mu > 1.0) throw ConfigError("joint_loss: mu must lie in [0, 1]");
  JointLoss out;
  if (mu == 0.0) {
    // Degenerate single-level case: the objective is the inner loss alone.
    out.trace.beta = beta;
    out.trace.theta.push_back(theta0);
    out.inner = inner(theta0, phi);
    out.total = out.inner;
    return out;
  }
  out.trace = inner_update(inner, theta0, phi, beta, n_steps);
  out.inner = out.trace.inner_loss.empty() ? inner(theta0, phi) : out.trace.inner_loss.front();
  out.outer = outer(out.trace.theta.back(), phi);
  if (out.outer->value().numel() != 1)
    throw ShapeError("outer loss must be scalar, got " + out.outer->value().shape_str());
  out.total = add(out.inner, scale(out.outer, mu));
  return out;
}

MetaGradient meta_gradient(const LossBuilder& inner, const LossBuilder& outer,
                           const NodeMap& theta0, const NodeMap& phi, double mu, double beta,
                           int n_steps) {
  const JointLoss jl = joint_loss(inner, outer, theta0, phi, mu, beta, n_steps);

  std::vector<NodePtr> wrt = map_values(theta0);
  const size_t n_theta = wrt.size();
  const std::vector<NodePtr> phi_nodes = map_values(phi);
  wrt.insert(wrt.end(), phi_nodes.begin(), phi_nodes.end());

  const GradMap grads = gradient(jl.total, wrt, /*create_graph=*/false);

  MetaGradient out;
  size_t i = 0;
  for (const auto& [name, node] : theta0) out.theta[name] = grads.tensor(i++);
  for (const auto& [name, node] : phi) out.phi[name] = grads.tensor(i++);
  out.joint_value = jl.total->value().value();
  out.inner_value = jl.inner->value().value();
  out.outer_value = jl.outer ? jl.outer->value().value() : std::numeric_limits<double>::quiet_NaN();
  return out;
}

SurrogateTerms ablation_terms(const LossBuilder& inner, const LossBuilder& outer,
                              const NodeMap& theta0, const NodeMap& phi, double beta,
                              int n_steps) {
  if (n_steps < 1) throw ConfigError("ablation_terms: need at least one inner step");
  const InnerTrace trace = inner_update(inner, theta0, phi, beta, n_steps);

  SurrogateTerms out;
  out.outer_at_theta0 = outer(theta0, phi)->value().value();
  for (int j = 0; j < n_steps; ++j) {
    const NodeMap& th = trace.theta[static_cast<size_t>(j)];
    const std::vector<NodePtr> wrt = map_values(th);
    const GradMap g_in = gradient(trace.inner_loss[static_cast<size_t>(j)], wrt, false);
    const GradMap g_out = gradient(outer(th, phi), wrt, false);
    double dot = 0.0;
    for (size_t i = 0; i < wrt.size(); ++i) {
      if (!g_in.has_path(i) || !g_out.has_path(i)) continue;
      dot += t_dot(g_in.tensor(i), g_out.tensor(i));
    }
    out.delta -= beta * dot;
  }
  return out;
}

double lr_schedule(int64_t step, int64_t epoch, const LrSpec& spec) {
  if (spec.gamma0 <= 0.0) throw ConfigError("lr_schedule: gamma0 must be positive");
  switch (spec.kind) {
    case LrSpec::Kind::kConstant:
      return spec.gamma0;
    case LrSpec::Kind::kExponential: {
      if (epoch < 0) throw ConfigError("lr_schedule: epoch must be non-negative");
      if (spec.decay <= 0.0 || spec.decay > 1.0)
        throw ConfigError("lr_schedule: exponential decay must lie in (0, 1]");
      return spec.gamma0 * std::pow(spec.decay, static_cast<double>(epoch));
    }
    case LrSpec::Kind::kInvSqrt: {
      if (step < 1) throw ConfigError("lr_schedule: inverse-sqrt schedule needs step >= 1");
      return spec.gamma0 / std::sqrt(static_cast<double>(step));
    }
  }
  throw ConfigError("lr_schedule: unknown schedule kind");
}

}  // namespace metawrap
