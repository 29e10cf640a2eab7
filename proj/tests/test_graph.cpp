#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "metawrap/graph.hpp"
#include "metawrap/oracle.hpp"
#include "metawrap/rng.hpp"

using namespace metawrap;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("derivative of x squared") {
  const NodePtr x = input(Tensor::scalar(3.0), "x");
  const NodePtr y = mul(x, x);
  CHECK(y->value().value() == 9.0);
  const GradMap g = gradient(y, {x});
  CHECK(g.tensor(0).value() == 6.0);
}

TEST_CASE("gradient of a product splits into the cofactors") {
  const NodePtr x = input(Tensor::scalar(3.0), "x");
  const NodePtr y = input(Tensor::scalar(2.0), "y");
  const GradMap g = gradient(mul(x, y), {x, y});
  CHECK(g.tensor(0).value() == 2.0);
  CHECK(g.tensor(1).value() == 3.0);
}

TEST_CASE("sigmoid slope at zero is a quarter") {
  const NodePtr x = input(Tensor::scalar(0.0), "x");
  const GradMap g = gradient(sigmoid(x), {x});
  CHECK(g.tensor(0).value() == 0.25);
}

TEST_CASE("second derivative of x cubed via double backprop") {
  const NodePtr x = input(Tensor::scalar(2.0), "x");
  const NodePtr y = mul(x, mul(x, x));
  // d2/dx2 (x^3) = 6x = 12 at x = 2.
  const GradMap h = hvp(y, {x}, {Tensor::scalar(1.0)}, {x});
  CHECK(h.tensor(0).value() == 12.0);
  // A zero direction gives a zero product.
  const GradMap h0 = hvp(y, {x}, {Tensor::scalar(0.0)}, {x});
  CHECK(h0.tensor(0).value() == 0.0);
}

TEST_CASE("mixed second derivatives couple both parameters") {
  // f = theta^2 phi: d/dtheta = 2 theta phi; differentiating <that, 1>
  // again gives (2 phi, 2 theta).
  const NodePtr th = input(Tensor::scalar(3.0), "theta");
  const NodePtr ph = input(Tensor::scalar(5.0), "phi");
  const NodePtr f = mul(mul(th, th), ph);
  const GradMap g = gradient(f, {th, ph});
  CHECK(g.tensor(0).value() == 30.0);
  CHECK(g.tensor(1).value() == 9.0);
  const GradMap h = hvp(f, {th}, {Tensor::scalar(1.0)}, {th, ph});
  CHECK(h.tensor(0).value() == 10.0);  // 2 phi
  CHECK(h.tensor(1).value() == 6.0);   // 2 theta
}

TEST_CASE("fourth power's curvature chains two backward passes") {
  const NodePtr x = input(Tensor::scalar(1.5), "x");
  const NodePtr x2 = mul(x, x);
  const NodePtr y = mul(x2, x2);
  const GradMap h = hvp(y, {x}, {Tensor::scalar(1.0)}, {x});
  // 12 x^2 = 27 at 1.5; every intermediate is exactly representable.
  CHECK(h.tensor(0).value() == 27.0);
}

TEST_CASE("backward never mutates the graph") {
  const NodePtr x = input(Tensor::scalar(1.25), "x");
  const NodePtr y = mul(sigmoid(x), x);
  const double before = y->value().value();
  const GradMap g1 = gradient(y, {x});
  const GradMap g2 = gradient(y, {x});
  CHECK(y->value().value() == before);
  CHECK(g1.tensor(0).value() == g2.tensor(0).value());
  const GradMap gn = gradient(y, {x}, /*create_graph=*/true);
  CHECK(gn.tensor(0).value() == g1.tensor(0).value());
  CHECK(y->value().value() == before);
}

TEST_CASE("parameters outside the graph get zero gradients, flagged") {
  const NodePtr x = input(Tensor::scalar(2.0), "x");
  const NodePtr z = input(Tensor({2, 1}, 1.0), "z");
  const GradMap g = gradient(mul(x, x), {x, z});
  CHECK(g.has_path(0));
  CHECK_FALSE(g.has_path(1));
  CHECK_FALSE(g.all_paths());
  CHECK(g.tensor(1).same_shape(z->value()));
  CHECK(g.tensor(1)[0] == 0.0);
  CHECK(g.tensor(1)[1] == 0.0);
  // Lookup by node works too.
  CHECK(g.tensor(x).value() == 4.0);
  CHECK_FALSE(g.has_path(z));
}

TEST_CASE("constants do not receive gradients") {
  const NodePtr x = input(Tensor::scalar(2.0), "x");
  const NodePtr c = constant(Tensor::scalar(10.0));
  const NodePtr y = mul(x, c);
  const GradMap g = gradient(y, {x});
  CHECK(g.tensor(0).value() == 10.0);
}

TEST_CASE("broadcast binaries route adjoints to the scalar side by summation") {
  const NodePtr X = input(Tensor::from_rows({{1, 2}, {3, 4}}), "X");
  const NodePtr s = input(Tensor::scalar(2.0), "s");

  // d sum(X + s) / ds counts the elements.
  const GradMap g1 = gradient(sum(add(X, s)), {X, s});
  CHECK(g1.tensor(1).value() == 4.0);
  CHECK(g1.tensor(0).at(1, 1) == 1.0);

  // d mean(X * s) / ds is the mean of X; d/dX is s / numel.
  const GradMap g2 = gradient(mean(mul(X, s)), {X, s});
  CHECK(g2.tensor(1).value() == 2.5);
  CHECK(g2.tensor(0).at(0, 0) == 0.5);

  // Subtraction flips the sign on the right operand.
  const GradMap g3 = gradient(sum(sub(s, X)), {X, s});
  CHECK(g3.tensor(1).value() == 4.0);
  CHECK(g3.tensor(0).at(0, 0) == -1.0);
}

TEST_CASE("matmul backward maps to transposed cofactors") {
  const Tensor av = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor bv = Tensor::from_rows({{5, 6}, {7, 8}});
  const NodePtr A = input(av, "A");
  const NodePtr B = input(bv, "B");
  const GradMap g = gradient(sum(matmul(A, B)), {A, B});
  // d sum(AB)/dA = ones * B', d/dB = A' * ones.
  CHECK(g.tensor(0).at(0, 0) == 11.0);  // 5 + 6
  CHECK(g.tensor(0).at(0, 1) == 15.0);  // 7 + 8
  CHECK(g.tensor(1).at(0, 0) == 4.0);   // 1 + 3
  CHECK(g.tensor(1).at(1, 1) == 6.0);   // 2 + 4
}

TEST_CASE("transpose backward transposes the adjoint") {
  const NodePtr A = input(Tensor::from_rows({{1, 2, 3}, {4, 5, 6}}), "A");
  const NodePtr C = constant(Tensor::from_rows({{1, 0}, {0, 1}, {2, 2}}));
  const GradMap g = gradient(sum(mul(transpose(A), C)), {A});
  CHECK(g.tensor(0).at(0, 0) == 1.0);
  CHECK(g.tensor(0).at(1, 0) == 0.0);
  CHECK(g.tensor(0).at(0, 2) == 2.0);
  CHECK(g.tensor(0).at(1, 2) == 2.0);
}

TEST_CASE("concat splits the adjoint, slice embeds it") {
  const NodePtr a = input(Tensor::from_rows({{1, 2}}), "a");
  const NodePtr b = input(Tensor::from_rows({{3, 4}}), "b");
  const NodePtr cat = concat({a, b}, 0);  // {2,2}
  // Summing only the second row: a's adjoint is zero but a path exists.
  const GradMap g = gradient(sum(slice(cat, 0, 1, 1)), {a, b});
  CHECK(g.has_path(0));
  CHECK(g.tensor(0).at(0, 0) == 0.0);
  CHECK(g.tensor(0).at(0, 1) == 0.0);
  CHECK(g.tensor(1).at(0, 0) == 1.0);
  CHECK(g.tensor(1).at(0, 1) == 1.0);
}

TEST_CASE("clamp passes gradients only inside the active band") {
  const NodePtr x = input(Tensor::from_rows({{-0.5, 0.5, 2.0}}), "x");
  const GradMap g = gradient(sum(clamp(x, 0.0, 1.0)), {x});
  CHECK(g.tensor(0)[0] == 0.0);
  CHECK(g.tensor(0)[1] == 1.0);
  CHECK(g.tensor(0)[2] == 0.0);
}

TEST_CASE("log and reciprocal derivatives") {
  const NodePtr x = input(Tensor::scalar(2.0), "x");
  CHECK(gradient(log(x), {x}).tensor(0).value() == 0.5);
  CHECK(gradient(reciprocal(x), {x}).tensor(0).value() == -0.25);
  CHECK(gradient(scale(x, -3.0), {x}).tensor(0).value() == -3.0);
}

TEST_CASE("softmax gradient matches finite differences") {
  const NodePtr x = input(Tensor::from_rows({{0.2, -1.0, 0.7}}), "x");
  const NodePtr w = constant(Tensor::from_rows({{1.0, 2.0, -0.5}}));
  const NodePtr y = sum(mul(softmax(x), w));
  const GradMap g = gradient(y, {x});
  const auto ref = fd_gradient(graph_scalar_fn(y, {x}), {x->value()});
  CHECK(max_rel_err(g.tensor(0), ref[0]) < 1e-8);
}

TEST_CASE("non-finite values are rejected eagerly") {
  CHECK_THROWS_AS(input(Tensor::scalar(std::numeric_limits<double>::quiet_NaN())), NumericError);
  const NodePtr neg = input(Tensor::scalar(-1.0), "neg");
  CHECK_THROWS_AS(log(neg), NumericError);           // NaN result
  const NodePtr zero = input(Tensor::scalar(0.0), "zero");
  CHECK_THROWS_AS(reciprocal(zero), NumericError);   // Inf result
}

TEST_CASE("gradient requires a scalar root") {
  const NodePtr X = input(Tensor({2, 2}, 1.0), "X");
  CHECK_THROWS_AS(gradient(add(X, X), {X}), ShapeError);
}

TEST_CASE("forward replays with rebound leaves and mutates nothing") {
  const NodePtr x = input(Tensor::scalar(3.0), "x");
  const NodePtr y = input(Tensor::scalar(2.0), "y");
  const NodePtr f = add(mul(x, x), y);
  CHECK(f->value().value() == 11.0);

  BindMap binds;
  binds.emplace(x.get(), Tensor::scalar(5.0));
  CHECK(forward(f, binds).value() == 27.0);
  CHECK(f->value().value() == 11.0);  // untouched
  CHECK(x->value().value() == 3.0);

  // Binding a non-leaf is an error; so is a shape change.
  BindMap bad;
  bad.emplace(mul(x, x).get(), Tensor::scalar(1.0));
  CHECK_THROWS_AS(forward(f, bad), Error);
  BindMap badshape;
  badshape.emplace(x.get(), Tensor({2, 1}, 1.0));
  CHECK_THROWS_AS(forward(f, badshape), ShapeError);
}

TEST_CASE("node objects are reclaimed once released") {
  const int64_t before = live_node_count();
  {
    const NodePtr x = input(Tensor::scalar(1.0), "x");
    const NodePtr y = sigmoid(mul(x, x));
    const GradMap g = gradient(y, {x}, /*create_graph=*/true);
    CHECK(live_node_count() > before);
  }
  CHECK(live_node_count() == before);
}

TEST_CASE("both backward modes produce identical bits") {
  for (uint64_t seed = 1; seed <= 30; ++seed) {
    const RandomGraph g = make_random_graph(seed);
    const GradMap fast = gradient(g.root, g.params, /*create_graph=*/false);
    const GradMap graph = gradient(g.root, g.params, /*create_graph=*/true);
    for (size_t i = 0; i < g.params.size(); ++i) {
      CHECK(fast.has_path(i) == graph.has_path(i));
      CHECK(bitwise_equal(fast.tensor(i), graph.tensor(i)));
    }
  }
}

TEST_CASE("gradients match finite differences on random graphs") {
  double worst = 0.0;
  for (uint64_t seed = 101; seed <= 150; ++seed) {
    const RandomGraph g = make_random_graph(seed);
    const GradMap grads = gradient(g.root, g.params);
    const auto ref = fd_gradient(graph_scalar_fn(g.root, g.params), g.values);
    for (size_t i = 0; i < g.params.size(); ++i)
      worst = std::max(worst, max_rel_err(grads.tensor(i), ref[i]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("curvature products match differenced finite-difference gradients") {
  double worst = 0.0;
  for (uint64_t seed = 201; seed <= 220; ++seed) {
    const RandomGraph g = make_random_graph(seed);
    Rng vrng(seed * 31 + 7);
    std::vector<Tensor> v;
    for (const Tensor& t : g.values) {
      Tensor ti(t.shape());
      for (int64_t i = 0; i < ti.numel(); ++i) ti[i] = vrng.uniform(-1.0, 1.0);
      v.push_back(std::move(ti));
    }
    const GradMap got = hvp(g.root, g.params, v, g.params);
    const auto ref = fd_hvp(graph_scalar_fn(g.root, g.params), g.values, v);
    for (size_t i = 0; i < g.params.size(); ++i)
      worst = std::max(worst, max_rel_err(got.tensor(i), ref[i]));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("hvp validates its direction vectors") {
  const NodePtr x = input(Tensor::scalar(1.0), "x");
  const NodePtr y = mul(x, x);
  CHECK_THROWS_AS(hvp(y, {x}, {}, {x}), Error);  // arity mismatch
  CHECK_THROWS_AS(hvp(y, {x}, {Tensor({2, 1}, 1.0)}, {x}), ShapeError);
}
