#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "metawrap/bilevel.hpp"
#include "metawrap/oracle.hpp"
#include "metawrap/train.hpp"

using namespace metawrap;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

struct StubSetup {
  StubProblem stub;
  NodeMap theta0, phi;
  LossBuilder inner, outer;

  explicit StubSetup(uint64_t seed, bool linear_outer = false)
      : stub(StubProblem::random(4, 3, seed, linear_outer)) {
    theta0["theta"] = input(stub.theta0, "theta");
    phi["phi"] = input(stub.phi, "phi");
    inner = [this](const NodeMap& th, const NodeMap& ph) {
      return stub.inner_loss(th.at("theta"), ph.at("phi"));
    };
    outer = [this](const NodeMap& th, const NodeMap& ph) {
      return stub.outer_loss(th.at("theta"), ph.at("phi"));
    };
  }
};

SyntheticData tiny_synthetic(uint64_t seed) {
  SyntheticConfig cfg;
  cfg.n_users = 12;
  cfg.n_items = 60;
  cfg.n_groups = 4;
  cfg.pos_per_user = 6;
  cfg.neg_per_user = 6;
  cfg.test_fraction = 0.15;
  cfg.max_seq_len = 20;
  cfg.seed = seed;
  return generate_synthetic(cfg);
}

TrainConfig tiny_config(Method method) {
  TrainConfig cfg;
  cfg.method = method;
  cfg.mu = 0.5;
  cfg.beta = 0.05;
  cfg.n_inner = 1;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.in_ratio = 0.8;
  cfg.lr.kind = LrSpec::Kind::kConstant;
  cfg.lr.gamma0 = 0.05;
  cfg.seed = 9;
  cfg.k = 4;
  return cfg;
}

bool params_equal(const ParamSet& a, const ParamSet& b) {
  return bitwise_equal(a.embedding, b.embedding) &&
         bitwise_equal(a.predictor.w1, b.predictor.w1) &&
         bitwise_equal(a.predictor.b1, b.predictor.b1) &&
         bitwise_equal(a.predictor.w2, b.predictor.w2) &&
         bitwise_equal(a.predictor.b2, b.predictor.b2) &&
         bitwise_equal(a.predictor.w3, b.predictor.w3) &&
         bitwise_equal(a.predictor.b3, b.predictor.b3) &&
         bitwise_equal(a.selector.w1, b.selector.w1) &&
         bitwise_equal(a.selector.b1, b.selector.b1) &&
         bitwise_equal(a.selector.w2, b.selector.w2) &&
         bitwise_equal(a.selector.b2, b.selector.b2) &&
         bitwise_equal(a.selector.w3, b.selector.w3) &&
         bitwise_equal(a.selector.b3, b.selector.b3);
}

}  // namespace

TEST_CASE("unrolled descent matches the closed-form iterates") {
  StubSetup s(31);
  const double beta = 0.1;
  const int n = 4;
  const InnerTrace tr = inner_update(s.inner, s.theta0, s.phi, beta, n);

  REQUIRE(tr.theta.size() == static_cast<size_t>(n + 1));
  REQUIRE(tr.inner_loss.size() == static_cast<size_t>(n));
  CHECK(tr.beta == beta);

  for (int j = 0; j <= n; ++j) {
    const Tensor expect = s.stub.theta_after(s.stub.theta0, s.stub.phi, beta, j);
    CHECK(max_rel_err(tr.theta[static_cast<size_t>(j)].at("theta")->value(), expect) < 1e-12);
  }
  for (int j = 0; j < n; ++j) {
    const double expect =
        s.stub.inner_value(tr.theta[static_cast<size_t>(j)].at("theta")->value(), s.stub.phi);
    CHECK(rel_err(tr.inner_loss[static_cast<size_t>(j)]->value().value(), expect) < 1e-12);
  }

  // The starting iterate is the caller's leaf map, untouched.
  CHECK(tr.theta[0].at("theta").get() == s.theta0.at("theta").get());
  CHECK(bitwise_equal(s.theta0.at("theta")->value(), s.stub.theta0));
}

TEST_CASE("a zero-step unroll returns the starting iterate unchanged") {
  StubSetup s(32);
  const InnerTrace tr = inner_update(s.inner, s.theta0, s.phi, 0.1, 0);
  REQUIRE(tr.theta.size() == 1);
  CHECK(tr.inner_loss.empty());
  CHECK(tr.theta[0].at("theta").get() == s.theta0.at("theta").get());
}

TEST_CASE("parameters without a gradient path ride through the unroll") {
  StubSetup s(33);
  // An extra leaf the loss never touches must come back as the same node.
  s.theta0["spare"] = input(Tensor::scalar(1.5), "spare");
  const InnerTrace tr = inner_update(s.inner, s.theta0, s.phi, 0.1, 3);
  for (const NodeMap& iter : tr.theta)
    CHECK(iter.at("spare").get() == s.theta0.at("spare").get());
}

TEST_CASE("the joint objective degenerates exactly at mu zero") {
  StubSetup s(34);
  const JointLoss jl = joint_loss(s.inner, s.outer, s.theta0, s.phi, 0.0, 0.1, 3);
  CHECK(jl.total.get() == jl.inner.get());
  CHECK(jl.outer == nullptr);
  CHECK(jl.trace.theta.size() == 1);

  const MetaGradient mg = meta_gradient(s.inner, s.outer, s.theta0, s.phi, 0.0, 0.1, 3);
  CHECK(std::isnan(mg.outer_value));
  CHECK(rel_err(mg.joint_value, mg.inner_value) == 0.0);
  CHECK(max_rel_err(mg.theta.at("theta"), s.stub.inner_grad_theta(s.stub.theta0, s.stub.phi)) <
        1e-10);
  CHECK(max_rel_err(mg.phi.at("phi"), s.stub.inner_grad_phi(s.stub.theta0, s.stub.phi)) < 1e-10);
}

TEST_CASE("joint value composes inner and weighted outer") {
  StubSetup s(35);
  const double mu = 0.7, beta = 0.1;
  const int n = 2;
  const JointLoss jl = joint_loss(s.inner, s.outer, s.theta0, s.phi, mu, beta, n);
  REQUIRE(jl.outer != nullptr);
  CHECK(jl.trace.theta.size() == static_cast<size_t>(n + 1));
  CHECK(rel_err(jl.total->value().value(),
                jl.inner->value().value() + mu * jl.outer->value().value()) < 1e-15);
  // The outer loss is evaluated at the adapted iterate.
  const Tensor thN = s.stub.theta_after(s.stub.theta0, s.stub.phi, beta, n);
  CHECK(rel_err(jl.outer->value().value(), s.stub.outer_value(thN, s.stub.phi)) < 1e-12);
}

TEST_CASE("meta gradient matches finite differences of the closed-form objective") {
  for (uint64_t seed : {5u, 6u}) {
    for (const bool linear : {false, true}) {
      StubSetup s(seed, linear);
      for (const int n : {1, 2, 5}) {
        const double mu = 0.6, beta = 0.1;
        const MetaGradient mg = meta_gradient(s.inner, s.outer, s.theta0, s.phi, mu, beta, n);

        const ScalarFn objective = [&](const std::vector<Tensor>& v) {
          const Tensor thn = s.stub.theta_after(v[0], v[1], beta, n);
          return s.stub.inner_value(v[0], v[1]) + mu * s.stub.outer_value(thn, v[1]);
        };
        const auto ref = fd_gradient(objective, {s.stub.theta0, s.stub.phi});
        CHECK(max_rel_err(mg.theta.at("theta"), ref[0]) < 1e-7);
        CHECK(max_rel_err(mg.phi.at("phi"), ref[1]) < 1e-7);
      }
    }
  }
}

TEST_CASE("selector gradient carries the exact hypergradient chain") {
  // d total / d phi = d inner / d phi + mu * hypergradient, so subtracting
  // the direct inner term must reproduce the closed form.
  for (uint64_t seed : {11u, 12u}) {
    const bool linear = seed == 12u;
    StubSetup s(seed, linear);
    const double beta = 0.1;
    for (const int n : {1, 3}) {
      const MetaGradient mg = meta_gradient(s.inner, s.outer, s.theta0, s.phi, 1.0, beta, n);
      const Tensor chain =
          t_sub(mg.phi.at("phi"), s.stub.inner_grad_phi(s.stub.theta0, s.stub.phi));
      CHECK(max_rel_err(chain, stub_hypergradient(s.stub, beta, n)) < 1e-8);
    }
  }
}

TEST_CASE("first-order expansion is exact for a linear outer objective") {
  StubSetup s(12, /*linear_outer=*/true);
  const double beta = 0.1;
  const int n = 3;
  const SurrogateTerms terms = ablation_terms(s.inner, s.outer, s.theta0, s.phi, beta, n);
  const JointLoss jl = joint_loss(s.inner, s.outer, s.theta0, s.phi, 1.0, beta, n);
  const double residual =
      std::fabs(jl.outer->value().value() - terms.outer_at_theta0 - terms.delta);
  CHECK(residual <= 1e-12);
  CHECK(rel_err(terms.outer_at_theta0, s.stub.outer_value(s.stub.theta0, s.stub.phi)) < 1e-12);
}

TEST_CASE("expansion residual shrinks quadratically in the step size") {
  StubSetup s(11);  // curved outer objective
  const int n = 2;
  std::vector<double> residuals;
  for (const double beta : {0.2, 0.1, 0.05}) {
    const SurrogateTerms terms = ablation_terms(s.inner, s.outer, s.theta0, s.phi, beta, n);
    const JointLoss jl = joint_loss(s.inner, s.outer, s.theta0, s.phi, 1.0, beta, n);
    residuals.push_back(std::fabs(jl.outer->value().value() - terms.outer_at_theta0 - terms.delta));
  }
  for (size_t i = 0; i + 1 < residuals.size(); ++i) {
    REQUIRE(residuals[i + 1] > 0.0);
    const double slope = std::log2(residuals[i] / residuals[i + 1]);
    CHECK(slope > 1.7);
    CHECK(slope < 2.3);
  }
}

TEST_CASE("step-size schedules") {
  LrSpec constant{LrSpec::Kind::kConstant, 0.3, 0.9};
  CHECK(lr_schedule(17, 4, constant) == 0.3);

  LrSpec expo{LrSpec::Kind::kExponential, 0.1, 0.9};
  CHECK(rel_err(lr_schedule(1, 0, expo), 0.1) == 0.0);
  CHECK(rel_err(lr_schedule(99, 2, expo), 0.081) < 1e-12);

  LrSpec inv{LrSpec::Kind::kInvSqrt, 1.0, 0.0};
  CHECK(lr_schedule(4, 0, inv) == 0.5);
  CHECK(lr_schedule(1, 7, inv) == 1.0);

  LrSpec bad = expo;
  bad.gamma0 = 0.0;
  CHECK_THROWS_AS(lr_schedule(1, 0, bad), ConfigError);
  bad = expo;
  bad.decay = 1.5;
  CHECK_THROWS_AS(lr_schedule(1, 0, bad), ConfigError);
  CHECK_THROWS_AS(lr_schedule(0, 0, inv), ConfigError);
}

TEST_CASE("training runs are deterministic in config and seed") {
  const SyntheticData synth = tiny_synthetic(2);
  const TrainConfig cfg = tiny_config(Method::kMetaWrapper);
  const TrainResult a = train(synth.split, cfg);
  const TrainResult b = train(synth.split, cfg);
  REQUIRE(a.metrics.epochs.size() == 2);
  CHECK(metrics_to_jsonl_stable(a.metrics) == metrics_to_jsonl_stable(b.metrics));
  CHECK(params_equal(a.params, b.params));
  // Full serialization additionally carries timing, which may differ.
  CHECK(metrics_to_jsonl(a.metrics).find("step_ms_mean") != std::string::npos);
  CHECK(metrics_to_jsonl_stable(a.metrics).find("step_ms_mean") == std::string::npos);
}

TEST_CASE("zero-weight outer loss reduces to selector-only training") {
  const SyntheticData synth = tiny_synthetic(3);
  TrainConfig mw = tiny_config(Method::kMetaWrapper);
  mw.mu = 0.0;
  TrainConfig ao = tiny_config(Method::kAttentionOnly);
  ao.mu = 0.0;
  const TrainResult a = train(synth.split, mw);
  const TrainResult b = train(synth.split, ao);
  CHECK(params_equal(a.params, b.params));
  CHECK(metrics_to_jsonl_stable(a.metrics) == metrics_to_jsonl_stable(b.metrics));
}

TEST_CASE("zero epochs return the initialization untouched") {
  const SyntheticData synth = tiny_synthetic(4);
  TrainConfig cfg = tiny_config(Method::kBase);
  cfg.epochs = 0;
  const TrainResult r = train(synth.split, cfg);
  CHECK(r.metrics.epochs.empty());
  const ParamSet fresh =
      init_params(cfg.k, synth.split.n_items, synth.split.n_cats, cfg.seed);
  CHECK(params_equal(r.params, fresh));
}

TEST_CASE("losses beyond the divergence threshold abort with context") {
  const SyntheticData synth = tiny_synthetic(5);
  TrainConfig cfg = tiny_config(Method::kMetaWrapper);
  cfg.divergence_threshold = 1e-9;  // any real loss exceeds this
  CHECK_THROWS_AS(train(synth.split, cfg), NumericError);
  try {
    train(synth.split, cfg);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("diverged at epoch 1") != std::string::npos);
  }
}

TEST_CASE("invalid training configurations are rejected") {
  const SyntheticData synth = tiny_synthetic(6);
  TrainConfig cfg = tiny_config(Method::kMetaWrapper);
  cfg.mu = 1.5;
  CHECK_THROWS_AS(train(synth.split, cfg), ConfigError);
  cfg = tiny_config(Method::kMetaWrapper);
  cfg.n_inner = 0;
  CHECK_THROWS_AS(train(synth.split, cfg), ConfigError);
  cfg = tiny_config(Method::kM2);
  cfg.n_inner = 0;  // fine for the zero-step method
  CHECK_NOTHROW(train(synth.split, cfg));
}

TEST_CASE("probe value, prebuilt graph and replay agree bit for bit") {
  const SyntheticData synth = tiny_synthetic(7);
  const ParamSet params = init_params(2, synth.split.n_items, synth.split.n_cats, 7);
  std::vector<const Instance*> d_in, d_out;
  for (size_t i = 0; i < 2; ++i) d_in.push_back(&synth.split.train[i]);
  for (size_t i = 2; i < 4; ++i) d_out.push_back(&synth.split.train[i]);

  for (const auto& [n, mu] : std::vector<std::pair<int, double>>{
           {0, 0.0}, {0, 0.7}, {1, 0.7}, {2, 0.7}}) {
    const JointProbe probe =
        make_joint_probe(params, d_in, d_out, mu, 0.05, n, Pooling::kWeightedSum);
    const double direct = probe.value(probe.at);
    const JointProbe::Graph jg = probe.graph();
    CHECK(jg.total->value().value() == direct);
    CHECK(jg.leaves.size() == probe.names.size());

    Replay replay(jg.total, jg.leaves);
    CHECK(replay.eval_all(probe.at) == direct);

    // Moving one leaf: the pure tensor path and the replayed graph stay
    // bit-identical away from the build point too.
    std::vector<Tensor> moved = probe.at;
    moved[0][0] += 1e-3;
    CHECK(replay.eval_one(0, moved[0]) == probe.value(moved));
  }
}

TEST_CASE("probe gradient matches finite differences of its own value") {
  const SyntheticData synth = tiny_synthetic(8);
  const ParamSet params = init_params(2, synth.split.n_items, synth.split.n_cats, 3);
  std::vector<const Instance*> d_in, d_out;
  for (size_t i = 0; i < 2; ++i) d_in.push_back(&synth.split.train[i]);
  for (size_t i = 2; i < 4; ++i) d_out.push_back(&synth.split.train[i]);

  const JointProbe probe =
      make_joint_probe(params, d_in, d_out, 0.7, 0.05, 1, Pooling::kWeightedSum);
  const std::vector<Tensor> got = probe.gradient(probe.at);

  const JointProbe::Graph jg = probe.graph();
  Replay replay(jg.total, jg.leaves);
  REQUIRE(replay.eval_all(probe.at) == probe.value(probe.at));
  const std::vector<Tensor> ref = fd_gradient(replay, probe.at);

  REQUIRE(got.size() == ref.size());
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) worst = std::max(worst, max_rel_err(got[i], ref[i]));
  CHECK(worst < 1e-4);
}

TEST_CASE("benchmark helpers time real work") {
  const SyntheticData synth = tiny_synthetic(9);
  const TrainConfig cfg = tiny_config(Method::kMetaWrapper);
  const std::vector<double> steps = bench_train_steps(synth.split, cfg, 5, 2);
  REQUIRE(steps.size() == 5);
  for (const double ms : steps) CHECK(ms > 0.0);

  const ParamSet params = init_params(4, synth.split.n_items, synth.split.n_cats, 1);
  const std::vector<double> infer = bench_inference(synth.split.train, params,
                                                    ModelVariant::kSelector,
                                                    Pooling::kWeightedSum, 4, 16, 1);
  REQUIRE(infer.size() == 4);
  for (const double ms : infer) CHECK(ms > 0.0);
}
