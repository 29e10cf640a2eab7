#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "metawrap/rng.hpp"
#include "metawrap/tensor.hpp"

using namespace metawrap;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-2.0, 2.0);
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("construction and element access") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.rank() == 2);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.numel() == 6);
  CHECK_FALSE(t.is_scalar());
  CHECK(t.shape_str() == "{2,3}");

  t.at(1, 2) = 7.0;
  CHECK(t.at(1, 2) == 7.0);
  CHECK(t[5] == 7.0);  // row-major layout: (1,2) is the last element

  const Tensor s = Tensor::scalar(4.0);
  CHECK(s.is_scalar());
  CHECK(s.value() == 4.0);
  CHECK_THROWS_AS(t.value(), ShapeError);
  CHECK_THROWS_AS(s.at(0, 0), ShapeError);  // at(r,c) needs rank 2

  const Tensor z = Tensor::zeros({3, 1});
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(z[i] == 0.0);
  const Tensor o = Tensor::ones({2, 2});
  for (int64_t i = 0; i < o.numel(); ++i) CHECK(o[i] == 1.0);

  const Tensor r = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(r.at(0, 1) == 2.0);
  CHECK(r.at(1, 0) == 4.0);
  const Tensor c = Tensor::column({1, 2, 3});
  CHECK(c.dim(0) == 3);
  CHECK(c.dim(1) == 1);
  CHECK(c.at(2, 0) == 3.0);
}

TEST_CASE("all_finite flags NaN and infinity") {
  Tensor t({2, 1}, 1.0);
  CHECK(t.all_finite());
  t[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  t[0] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("elementwise binaries with scalar broadcast") {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{10, 20}, {30, 40}});
  const Tensor s = Tensor::scalar(2.0);

  const Tensor sum = t_add(a, b);
  CHECK(sum.at(1, 1) == 44.0);
  const Tensor diff = t_sub(b, a);
  CHECK(diff.at(0, 0) == 9.0);
  const Tensor prod = t_mul(a, b);
  CHECK(prod.at(1, 0) == 90.0);

  // Scalar on either side broadcasts; result keeps the tensor shape.
  CHECK(t_add(a, s).at(0, 1) == 4.0);
  CHECK(t_add(s, a).at(0, 1) == 4.0);
  CHECK(t_sub(s, a).at(1, 1) == -2.0);
  CHECK(t_sub(a, s).at(1, 1) == 2.0);
  CHECK(t_mul(s, a).at(1, 0) == 6.0);
  CHECK(t_add(a, s).same_shape(a));

  const Tensor wrong({3, 2}, 1.0);
  CHECK_THROWS_AS(t_add(a, wrong), ShapeError);
  CHECK_THROWS_AS(t_mul(wrong, a), ShapeError);
}

TEST_CASE("matmul on a known product") {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{5, 6}, {7, 8}});
  const Tensor p = t_matmul(a, b);
  CHECK(p.at(0, 0) == 19.0);
  CHECK(p.at(0, 1) == 22.0);
  CHECK(p.at(1, 0) == 43.0);
  CHECK(p.at(1, 1) == 50.0);

  const Tensor rect = Tensor::from_rows({{1, 0, 2}});  // {1,3}
  const Tensor col = Tensor::column({3, 5, 7});        // {3,1}
  CHECK(t_matmul(rect, col).value() == 17.0);

  CHECK_THROWS_AS(t_matmul(a, rect), ShapeError);  // inner dims differ
  CHECK_THROWS_AS(t_matmul(a, Tensor::scalar(1.0)), ShapeError);
}

TEST_CASE("matmul rows of zeros stay exactly zero") {
  Tensor a({2, 3}, 0.0);
  a.at(1, 0) = 1.0;
  const Tensor b = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}});
  const Tensor p = t_matmul(a, b);
  CHECK(p.at(0, 0) == 0.0);
  CHECK(p.at(0, 1) == 0.0);
  CHECK(p.at(1, 0) == 1.0);
  CHECK(p.at(1, 1) == 2.0);
}

TEST_CASE("transpose") {
  const Tensor a = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  const Tensor t = t_transpose(a);
  CHECK(t.dim(0) == 3);
  CHECK(t.dim(1) == 2);
  CHECK(t.at(0, 1) == 4.0);
  CHECK(t.at(2, 0) == 3.0);
  CHECK(bitwise_equal(t_transpose(t), a));
  CHECK_THROWS_AS(t_transpose(Tensor::scalar(1.0)), ShapeError);
}

TEST_CASE("sigmoid, softmax, reductions and unary maps") {
  CHECK(t_sigmoid(Tensor::scalar(0.0)).value() == 0.5);
  const double s1 = t_sigmoid(Tensor::scalar(1.0)).value();
  CHECK_THAT(s1, Catch::Matchers::WithinRel(1.0 / (1.0 + std::exp(-1.0)), 1e-15));

  const Tensor x = Tensor::from_rows({{1, 2, 3}});
  const Tensor sm = t_softmax(x);
  double total = 0.0;
  for (int64_t i = 0; i < sm.numel(); ++i) total += sm[i];
  CHECK_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-15));
  CHECK(sm[0] < sm[1]);
  CHECK(sm[1] < sm[2]);

  // Uniform inputs give exactly uniform outputs.
  const Tensor u = t_softmax(Tensor({1, 4}, 3.0));
  for (int64_t i = 0; i < 4; ++i) CHECK(u[i] == 0.25);

  // The max-shift makes softmax invariant to a constant offset, bit for bit.
  Tensor shifted = x;
  for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 100.0;
  CHECK(bitwise_equal(t_softmax(shifted), sm));

  CHECK(t_sum(Tensor::from_rows({{1, 2}, {3, 4}})).value() == 10.0);
  CHECK(t_mean(Tensor::from_rows({{1, 2}, {3, 4}})).value() == 2.5);
  CHECK(t_log(Tensor::scalar(std::exp(1.0))).value() == Catch::Approx(1.0).margin(1e-15));
  CHECK(t_reciprocal(Tensor::scalar(4.0)).value() == 0.25);
  CHECK(t_scale(Tensor::scalar(3.0), -2.0).value() == -6.0);
}

TEST_CASE("clamp and its derivative mask") {
  const Tensor x = Tensor::from_rows({{-0.5, 0.5, 2.0}});
  const Tensor c = t_clamp(x, 0.0, 1.0);
  CHECK(c[0] == 0.0);
  CHECK(c[1] == 0.5);
  CHECK(c[2] == 1.0);
  const Tensor m = t_clamp_mask(x, 0.0, 1.0);
  CHECK(m[0] == 0.0);
  CHECK(m[1] == 1.0);
  CHECK(m[2] == 0.0);
}

TEST_CASE("concat and slice") {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{5, 6}});

  const Tensor rows = t_concat({&a, &b}, 0);  // {3,2}
  CHECK(rows.dim(0) == 3);
  CHECK(rows.at(2, 1) == 6.0);

  const Tensor c = Tensor::from_rows({{7}, {8}});
  const Tensor cols = t_concat({&a, &c}, 1);  // {2,3}
  CHECK(cols.dim(1) == 3);
  CHECK(cols.at(1, 2) == 8.0);

  CHECK_THROWS_AS(t_concat({&a, &b}, 1), ShapeError);  // row counts differ
  CHECK_THROWS_AS(t_concat({&a, &c}, 0), ShapeError);  // column counts differ

  const Tensor back = t_slice(rows, 0, 2, 1);
  CHECK(bitwise_equal(back, b));
  const Tensor mid = t_slice(cols, 1, 1, 1);
  CHECK(mid.at(0, 0) == 2.0);
  CHECK(mid.at(1, 0) == 4.0);
  CHECK_THROWS_AS(t_slice(rows, 0, 2, 2), ShapeError);  // runs past the end
  CHECK_THROWS_AS(t_slice(rows, 0, -1, 1), ShapeError);
}

TEST_CASE("dot product and max absolute difference") {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{2, 0}, {1, 1}});
  CHECK(t_dot(a, b) == 9.0);
  CHECK(t_max_abs_diff(a, b) == 3.0);
}

TEST_CASE("raw-output kernel variants match the allocating forms bit for bit") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({3, 4}, rng);
    const Tensor m = random_tensor({4, 5}, rng);
    const Tensor s = Tensor::scalar(rng.uniform(-2.0, 2.0));

    auto check_binary = [&](auto&& into, auto&& alloc, const Tensor& x, const Tensor& y) {
      const Tensor want = alloc(x, y);
      Tensor got(want.shape(), -123.0);
      into(got.data(), x, y);
      CHECK(bitwise_equal(got, want));
    };
    check_binary(t_add_to, t_add, a, b);
    check_binary(t_add_to, t_add, a, s);
    check_binary(t_add_to, t_add, s, a);
    check_binary(t_sub_to, t_sub, a, b);
    check_binary(t_sub_to, t_sub, s, a);
    check_binary(t_mul_to, t_mul, a, b);
    check_binary(t_mul_to, t_mul, a, s);

    const Tensor mm = t_matmul(a, m);
    Tensor mm2(mm.shape(), -123.0);
    t_matmul_to(mm2.data(), a, m);
    CHECK(bitwise_equal(mm2, mm));

    const Tensor tr = t_transpose(a);
    Tensor tr2(tr.shape(), -123.0);
    t_transpose_to(tr2.data(), a);
    CHECK(bitwise_equal(tr2, tr));

    const Tensor sg = t_sigmoid(a);
    Tensor sg2(sg.shape(), -123.0);
    t_sigmoid_to(sg2.data(), a);
    CHECK(bitwise_equal(sg2, sg));

    const Tensor sc = t_scale(a, 1.7);
    Tensor sc2(sc.shape(), -123.0);
    t_scale_to(sc2.data(), a, 1.7);
    CHECK(bitwise_equal(sc2, sc));
  }
}
