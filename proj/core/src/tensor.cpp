#include "metawrap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace metawrap {

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape, double fill) : shape_(std::move(shape)) {
  if (shape_.empty() || shape_.size() > 2)
    throw ShapeError("tensor rank must be 1 or 2, got rank " + std::to_string(shape_.size()));
  for (int64_t d : shape_)
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str());
  data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.data_[0] = v;
  return t;
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty() || rows[0].empty()) throw ShapeError("from_rows requires a non-empty matrix");
  const int64_t r = static_cast<int64_t>(rows.size());
  const int64_t c = static_cast<int64_t>(rows[0].size());
  Tensor t({r, c});
  for (int64_t i = 0; i < r; ++i) {
    if (static_cast<int64_t>(rows[static_cast<size_t>(i)].size()) != c)
      throw ShapeError("from_rows requires equal-length rows");
    for (int64_t j = 0; j < c; ++j) t.at(i, j) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
  }
  return t;
}

Tensor Tensor::column(const std::vector<double>& values) {
  if (values.empty()) throw ShapeError("column requires at least one value");
  Tensor t({static_cast<int64_t>(values.size()), 1});
  std::copy(values.begin(), values.end(), t.data());
  return t;
}

double& Tensor::at(int64_t r, int64_t c) {
  if (rank() != 2) throw ShapeError("at(r,c) requires rank 2, have " + shape_str());
  return data_[static_cast<size_t>(r * shape_[1] + c)];
}

double Tensor::at(int64_t r, int64_t c) const {
  if (rank() != 2) throw ShapeError("at(r,c) requires rank 2, have " + shape_str());
  return data_[static_cast<size_t>(r * shape_[1] + c)];
}

double Tensor::value() const {
  if (numel() != 1) throw ShapeError("value() requires a single element, have " + shape_str());
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "{";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << "}";
  return os.str();
}

namespace {

enum class BinKind { kEqual, kScalarLeft, kScalarRight };

BinKind bin_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return BinKind::kEqual;
  if (a.is_scalar()) return BinKind::kScalarLeft;
  if (b.is_scalar()) return BinKind::kScalarRight;
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() + " vs " + b.shape_str());
}

template <class F>
void binary_to(double* out, const Tensor& a, const Tensor& b, const char* name, F f) {
  switch (bin_kind(a, b, name)) {
    case BinKind::kEqual: {
      const double* pa = a.data();
      const double* pb = b.data();
      const int64_t n = a.numel();
      for (int64_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
      return;
    }
    case BinKind::kScalarLeft: {
      const double s = a[0];
      const double* pb = b.data();
      const int64_t n = b.numel();
      for (int64_t i = 0; i < n; ++i) out[i] = f(s, pb[i]);
      return;
    }
    case BinKind::kScalarRight:
    default: {
      const double s = b[0];
      const double* pa = a.data();
      const int64_t n = a.numel();
      for (int64_t i = 0; i < n; ++i) out[i] = f(pa[i], s);
      return;
    }
  }
}

template <class F>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f) {
  Tensor out(bin_kind(a, b, name) == BinKind::kScalarLeft ? b.shape() : a.shape());
  binary_to(out.data(), a, b, name, f);
  return out;
}

}  // namespace

Tensor t_add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor t_sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor t_mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "mul", [](double x, double y) { return x * y; });
}

void t_add_to(double* out, const Tensor& a, const Tensor& b) {
  binary_to(out, a, b, "add", [](double x, double y) { return x + y; });
}

void t_sub_to(double* out, const Tensor& a, const Tensor& b) {
  binary_to(out, a, b, "sub", [](double x, double y) { return x - y; });
}

void t_mul_to(double* out, const Tensor& a, const Tensor& b) {
  binary_to(out, a, b, "mul", [](double x, double y) { return x * y; });
}

void t_matmul_to(double* out, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul requires rank-2 operands, got " + a.shape_str() + " and " + b.shape_str());
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul inner dimensions differ: " + a.shape_str() + " vs " + b.shape_str());
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < m * n; ++i) out[i] = 0.0;
  // i-k-j loop order keeps the innermost walk contiguous in both B and OUT.
  for (int64_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = pa + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

Tensor t_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul requires rank-2 operands, got " + a.shape_str() + " and " + b.shape_str());
  Tensor out({a.dim(0), b.dim(1)});
  t_matmul_to(out.data(), a, b);
  return out;
}

void t_transpose_to(double* out, const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose requires rank 2, got " + a.shape_str());
  const int64_t r = a.dim(0), c = a.dim(1);
  const double* pa = a.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[j * r + i] = pa[i * c + j];
}

Tensor t_transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose requires rank 2, got " + a.shape_str());
  Tensor out({a.dim(1), a.dim(0)});
  t_transpose_to(out.data(), a);
  return out;
}

void t_sigmoid_to(double* out, const Tensor& a) {
  const double* pa = a.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-pa[i]));
}

Tensor t_sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  t_sigmoid_to(out.data(), a);
  return out;
}

Tensor t_softmax(const Tensor& a) {
  Tensor out = a;
  double mx = out[0];
  for (double v : out.vec()) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : out.vec()) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : out.vec()) v /= sum;
  return out;
}

Tensor t_sum(const Tensor& a) {
  return Tensor::scalar(std::accumulate(a.vec().begin(), a.vec().end(), 0.0));
}

Tensor t_mean(const Tensor& a) {
  return Tensor::scalar(std::accumulate(a.vec().begin(), a.vec().end(), 0.0) /
                        static_cast<double>(a.numel()));
}

Tensor t_log(const Tensor& a) {
  Tensor out = a;
  for (double& v : out.vec()) v = std::log(v);
  return out;
}

Tensor t_reciprocal(const Tensor& a) {
  Tensor out = a;
  for (double& v : out.vec()) v = 1.0 / v;
  return out;
}

void t_scale_to(double* out, const Tensor& a, double c) {
  const double* pa = a.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * c;
}

Tensor t_scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  t_scale_to(out.data(), a, c);
  return out;
}

Tensor t_clamp(const Tensor& a, double lo, double hi) {
  Tensor out = a;
  for (double& v : out.vec()) v = std::min(std::max(v, lo), hi);
  return out;
}

Tensor t_clamp_mask(const Tensor& a, double lo, double hi) {
  Tensor out = a;
  for (double& v : out.vec()) v = (v >= lo && v <= hi) ? 1.0 : 0.0;
  return out;
}

Tensor t_concat(const std::vector<const Tensor*>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat requires at least one part");
  if (axis != 0 && axis != 1) throw ShapeError("concat axis must be 0 or 1");
  for (const Tensor* p : parts)
    if (p->rank() != 2) throw ShapeError("concat requires rank-2 parts, got " + p->shape_str());
  const int keep = 1 - axis;
  const int64_t keep_dim = parts[0]->dim(keep);
  int64_t total = 0;
  for (const Tensor* p : parts) {
    if (p->dim(keep) != keep_dim)
      throw ShapeError("concat parts disagree on non-concat dimension: " + parts[0]->shape_str() +
                       " vs " + p->shape_str());
    total += p->dim(axis);
  }
  if (axis == 0) {
    Tensor out({total, keep_dim});
    double* po = out.data();
    for (const Tensor* p : parts) {
      std::copy(p->data(), p->data() + p->numel(), po);
      po += p->numel();
    }
    return out;
  }
  Tensor out({keep_dim, total});
  int64_t col = 0;
  for (const Tensor* p : parts) {
    const int64_t pc = p->dim(1);
    for (int64_t i = 0; i < keep_dim; ++i)
      for (int64_t j = 0; j < pc; ++j) out.at(i, col + j) = p->at(i, j);
    col += pc;
  }
  return out;
}

Tensor t_slice(const Tensor& a, int axis, int64_t offset, int64_t extent) {
  if (a.rank() != 2) throw ShapeError("slice requires rank 2, got " + a.shape_str());
  if (axis != 0 && axis != 1) throw ShapeError("slice axis must be 0 or 1");
  if (offset < 0 || extent <= 0 || offset + extent > a.dim(axis))
    throw ShapeError("slice range [" + std::to_string(offset) + "," +
                     std::to_string(offset + extent) + ") out of bounds for " + a.shape_str());
  if (axis == 0) {
    Tensor out({extent, a.dim(1)});
    std::copy(a.data() + offset * a.dim(1), a.data() + (offset + extent) * a.dim(1), out.data());
    return out;
  }
  Tensor out({a.dim(0), extent});
  for (int64_t i = 0; i < a.dim(0); ++i)
    for (int64_t j = 0; j < extent; ++j) out.at(i, j) = a.at(i, offset + j);
  return out;
}

double t_dot(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw ShapeError("dot requires equal shapes, got " + a.shape_str() + " vs " + b.shape_str());
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

double t_max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw ShapeError("max_abs_diff requires equal shapes, got " + a.shape_str() + " vs " +
                     b.shape_str());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace metawrap
