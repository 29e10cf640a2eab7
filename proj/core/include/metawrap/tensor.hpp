#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace metawrap {

// Error hierarchy shared across the library. Every failure the library can
// raise derives from Error so callers can map failures to exit codes.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

// Raised when a forward evaluation produces NaN/Inf or a numeric routine
// cannot continue (divergence guard, non-finite gradient, ...).
class NumericError : public Error {
public:
  using Error::Error;
};

class ParseError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

// Raised when a checked quantity falls outside its declared tolerance
// (gradient checks, metric sanity checks).
class ToleranceError : public Error {
public:
  using Error::Error;
};

// Dense row-major tensor of doubles. Rank 1 is used for scalars (shape {1})
// and rank 2 for everything else; column vectors are shaped {n, 1}.
class Tensor {
public:
  Tensor() : shape_{1}, data_(1, 0.0) {}
  explicit Tensor(std::vector<int64_t> shape, double fill = 0.0);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(std::vector<int64_t> shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor column(const std::vector<double>& values);

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool is_scalar() const { return data_.size() == 1 && shape_.size() == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  // Rank-2 element access: row r, column c.
  double& at(int64_t r, int64_t c);
  double at(int64_t r, int64_t c) const;

  double value() const;  // scalar extraction; throws ShapeError if numel != 1
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

// Elementwise / linear-algebra kernels shared by the eager evaluator and both
// backward modes. Binary elementwise ops accept equal shapes or a scalar on
// either side (scalar broadcasts over the other operand).
Tensor t_add(const Tensor& a, const Tensor& b);
Tensor t_sub(const Tensor& a, const Tensor& b);
Tensor t_mul(const Tensor& a, const Tensor& b);
Tensor t_matmul(const Tensor& a, const Tensor& b);
Tensor t_transpose(const Tensor& a);
Tensor t_sigmoid(const Tensor& a);
Tensor t_softmax(const Tensor& a);  // over all elements
Tensor t_sum(const Tensor& a);      // -> scalar {1}
Tensor t_mean(const Tensor& a);     // -> scalar {1}
Tensor t_log(const Tensor& a);
Tensor t_reciprocal(const Tensor& a);
Tensor t_scale(const Tensor& a, double c);
Tensor t_clamp(const Tensor& a, double lo, double hi);
// 1 where lo <= x <= hi, else 0 (derivative mask of t_clamp).
Tensor t_clamp_mask(const Tensor& a, double lo, double hi);
Tensor t_concat(const std::vector<const Tensor*>& parts, int axis);
Tensor t_slice(const Tensor& a, int axis, int64_t offset, int64_t extent);

double t_dot(const Tensor& a, const Tensor& b);
double t_max_abs_diff(const Tensor& a, const Tensor& b);

// Raw-output variants of the hottest kernels: write the result into `out`,
// which must hold the result's element count and must not alias an operand.
// The allocating forms above delegate to these, so both compute identical
// bits; bulk re-evaluation loops use them to reuse output storage.
void t_add_to(double* out, const Tensor& a, const Tensor& b);
void t_sub_to(double* out, const Tensor& a, const Tensor& b);
void t_mul_to(double* out, const Tensor& a, const Tensor& b);
void t_matmul_to(double* out, const Tensor& a, const Tensor& b);
void t_transpose_to(double* out, const Tensor& a);
void t_sigmoid_to(double* out, const Tensor& a);
void t_scale_to(double* out, const Tensor& a, double c);

}  // namespace metawrap
