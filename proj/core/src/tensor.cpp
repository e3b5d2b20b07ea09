// SPDX-License-Identifier: Apache-2.0
#include "ver/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ver/error.hpp"

namespace ver {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(x.shape()));
  }
}

// outer x axis x inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  if (is_suffix(b.shape(), a.shape())) return a.shape();
  if (is_suffix(a.shape(), b.shape())) return b.shape();
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a.shape()) + " with " +
                       shape_string(b.shape()));
}

template <class Forward, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Forward f, DA da, DB db) {
  Shape shape = broadcast_shape(a, b, name);
  const std::size_t n = shape_numel(shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i % na], bv[i % nb]);
  return make_result(std::move(shape), std::move(out), {a, b}, [a, b, da, db](const detail::TensorImpl& o) {
    const std::size_t n = o.data.size();
    const std::size_t na = a.numel();
    const std::size_t nb = b.numel();
    auto av = a.data();
    auto bv = b.data();
    if (a.requires_grad()) {
      std::vector<double> g(na, 0.0);
      for (std::size_t i = 0; i < n; ++i) g[i % na] += o.grad[i] * da(av[i % na], bv[i % nb], o.data[i]);
      accumulate_grad(a, g);
    }
    if (b.requires_grad()) {
      std::vector<double> g(nb, 0.0);
      for (std::size_t i = 0; i < n; ++i) g[i % nb] += o.grad[i] * db(av[i % na], bv[i % nb], o.data[i]);
      accumulate_grad(b, g);
    }
  });
}

// `d` receives (input, output) and returns d output / d input.
template <class Forward, class Deriv>
Tensor unary_op(const Tensor& x, Forward f, Deriv d) {
  auto xv = x.data();
  std::vector<double> out(xv.size());
  std::transform(xv.begin(), xv.end(), out.begin(), f);
  return make_result(x.shape(), std::move(out), {x}, [x, d](const detail::TensorImpl& o) {
    auto xv = x.data();
    std::vector<double> g(xv.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * d(xv[i], o.data[i]);
    accumulate_grad(x, g);
  });
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Plain row-major product used by matmul forward and backward.
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m, std::size_t k,
          std::size_t n, bool transpose_a, bool transpose_b) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMajor>;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Eigen::Map<RowMajor> out(c.data(), ei(m), ei(n));
  const ConstMap am = transpose_a ? ConstMap(a.data(), ei(k), ei(m)) : ConstMap(a.data(), ei(m), ei(k));
  const ConstMap bm = transpose_b ? ConstMap(b.data(), ei(n), ei(k)) : ConstMap(b.data(), ei(k), ei(n));
  if (transpose_a && transpose_b) {
    out.noalias() += am.transpose() * bm.transpose();
  } else if (transpose_a) {
    out.noalias() += am.transpose() * bm;
  } else if (transpose_b) {
    out.noalias() += am * bm.transpose();
  } else {
    out.noalias() += am * bm;
  }
}

std::size_t row_size(const Tensor& x) {
  if (x.rank() == 0 || x.dim(0) == 0) return 0;
  return x.numel() / x.dim(0);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

Tensor Tensor::vec(std::initializer_list<double> values) { return Tensor({values.size()}, std::vector<double>(values)); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

const Shape& Tensor::shape() const {
  static const Shape empty;
  return impl_ ? impl_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return impl_->shape[1];
}

std::span<const double> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

double Tensor::at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

// ---------------------------------------------------------------------------
// Tape

void Tape::record(const Tensor& out, BackwardFn fn) {
  out.impl()->producer = this;
  out.impl()->epoch = epoch_;
  entries_.push_back({out.impl(), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
  }
  if (loss.impl()->producer != this || loss.impl()->epoch != epoch_) {
    throw ContractError("backward(): loss was not produced on this tape since its last clear()");
  }
  if (consumed_) throw ContractError("backward() called twice without clearing the tape");
  consumed_ = true;
  const double seed = 1.0;
  accumulate_grad(loss, std::span<const double>(&seed, 1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.empty()) continue;
    it->fn(*it->out);
  }
}

void Tape::clear() {
  entries_.clear();
  ++epoch_;
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   Tape::BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  out.impl()->requires_grad = true;
  tape->record(out, std::move(backward));
  return out;
}

void accumulate_grad(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto& buf = t.impl()->grad;
  if (buf.empty()) {
    buf.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw NumericError("div: division by zero");
  }
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor negate(const Tensor& x) {
  return unary_op(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  }
  return unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) throw NumericError("sqrt: negative input");
  }
  return unary_op(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary_op(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor silu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v * sigmoid(v); },
      [](double v, double) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return sigmoid(v); });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary_op(
      x, [lo](double v) { return std::max(v, lo); }, [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& x) { return negate(x); }
Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
Tensor operator*(double s, const Tensor& a) { return mul(a, Tensor::scalar(s)); }
Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }

// ---------------------------------------------------------------------------
// Linear algebra and shape

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm(a.data(), b.data(), out, m, k, n, false, false);
  return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](const detail::TensorImpl& o) {
    if (a.requires_grad()) {
      std::vector<double> g(m * k, 0.0);
      gemm(o.grad, b.data(), g, m, n, k, false, true);
      accumulate_grad(a, g);
    }
    if (b.requires_grad()) {
      std::vector<double> g(k * n, 0.0);
      gemm(a.data(), o.grad, g, k, m, n, true, false);
      accumulate_grad(b, g);
    }
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& scale) {
  require_rank2(x, "scale_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (scale.numel() != r) {
    throw DimensionError("scale_rows: " + shape_string(x.shape()) + " with scale " + shape_string(scale.shape()));
  }
  auto xv = x.data();
  auto sv = scale.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * sv[i];
  return make_result({r, c}, std::move(out), {x, scale}, [x, scale, r, c](const detail::TensorImpl& o) {
    auto xv = x.data();
    auto sv = scale.data();
    if (x.requires_grad()) {
      std::vector<double> g(r * c);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] = o.grad[i * c + j] * sv[i];
      accumulate_grad(x, g);
    }
    if (scale.requires_grad()) {
      std::vector<double> g(r, 0.0);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i] += o.grad[i * c + j] * xv[i * c + j];
      accumulate_grad(scale, g);
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto xv = x.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return make_result({c, r}, std::move(out), {x}, [x, r, c](const detail::TensorImpl& o) {
    std::vector<double> g(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] = o.grad[j * r + i];
    accumulate_grad(x, g);
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> v(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(v), {x}, [x](const detail::TensorImpl& o) { accumulate_grad(x, o.grad); });
}

Tensor softmax(const Tensor& x, int axis) {
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= total;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [x, s](const detail::TensorImpl& o) {
    std::vector<double> g(o.data.size());
    for (std::size_t oi = 0; oi < s.outer; ++oi) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = oi * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) dot += o.grad[base + j * s.inner] * o.data[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t idx = base + j * s.inner;
          g[idx] = o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
    accumulate_grad(x, g);
  });
}

Tensor sum(const Tensor& x) {
  auto xv = x.data();
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return make_result({}, {total}, {x}, [x](const detail::TensorImpl& o) {
    std::vector<double> g(x.numel(), o.grad[0]);
    accumulate_grad(x, g);
  });
}

Tensor sum(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  auto xv = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.extent; ++j)
      for (std::size_t in = 0; in < s.inner; ++in) out[o * s.inner + in] += xv[(o * s.extent + j) * s.inner + in];
  return make_result(std::move(shape), std::move(out), {x}, [x, s](const detail::TensorImpl& o) {
    std::vector<double> g(x.numel());
    for (std::size_t oi = 0; oi < s.outer; ++oi)
      for (std::size_t j = 0; j < s.extent; ++j)
        for (std::size_t in = 0; in < s.inner; ++in) g[(oi * s.extent + j) * s.inner + in] = o.grad[oi * s.inner + in];
    accumulate_grad(x, g);
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return sum(x) * (1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  if (x.dim(ax) == 0) throw DimensionError("mean over empty axis");
  return sum(x, axis) * (1.0 / static_cast<double>(x.dim(ax)));
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) {
    throw IndexError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                     shape_string(x.shape()));
  }
  const std::size_t rs = row_size(x);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> v(x.data().begin() + static_cast<std::ptrdiff_t>(begin * rs),
                        x.data().begin() + static_cast<std::ptrdiff_t>(end * rs));
  return make_result(std::move(shape), std::move(v), {x}, [x, begin, rs](const detail::TensorImpl& o) {
    std::vector<double> g(x.numel(), 0.0);
    std::copy(o.grad.begin(), o.grad.end(), g.begin() + static_cast<std::ptrdiff_t>(begin * rs));
    accumulate_grad(x, g);
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (begin > end || end > c) {
    throw IndexError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                     shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  auto xv = x.data();
  std::vector<double> v(r * w);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(i * c + begin), w, v.begin() + static_cast<std::ptrdiff_t>(i * w));
  return make_result({r, w}, std::move(v), {x}, [x, r, c, begin, w](const detail::TensorImpl& o) {
    std::vector<double> g(r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(o.grad.begin() + static_cast<std::ptrdiff_t>(i * w), w, g.begin() + static_cast<std::ptrdiff_t>(i * c + begin));
    accumulate_grad(x, g);
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Shape shape = parts[0].shape();
  if (shape.empty()) throw DimensionError("concat_rows of scalars");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: " + shape_string(shape) + " vs " + shape_string(p.shape()));
    }
    rows += p.dim(0);
  }
  shape[0] = rows;
  std::vector<double> v;
  v.reserve(shape_numel(shape));
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());

  Tensor out(std::move(shape), std::move(v));
  Tape* tape = active_tape();
  const bool needs = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (tape && needs) {
    out.impl()->requires_grad = true;
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape->record(out, [inputs](const detail::TensorImpl& o) {
      std::size_t offset = 0;
      for (const auto& p : inputs) {
        const std::size_t n = p.numel();
        accumulate_grad(p, std::span<const double>(o.grad).subspan(offset, n));
        offset += n;
      }
    });
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  for (const auto& p : parts) require_rank2(p, "concat_cols");
  const std::size_t r = parts[0].dim(0);
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != r) {
      throw DimensionError("concat_cols: " + shape_string(parts[0].shape()) + " vs " + shape_string(p.shape()));
    }
    c += p.dim(1);
  }
  std::vector<double> v(r * c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(i * w), w, v.begin() + static_cast<std::ptrdiff_t>(i * c + off));
    off += w;
  }
  Tensor out({r, c}, std::move(v));
  Tape* tape = active_tape();
  const bool needs = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (tape && needs) {
    out.impl()->requires_grad = true;
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape->record(out, [inputs, r, c](const detail::TensorImpl& o) {
      std::size_t off = 0;
      for (const auto& p : inputs) {
        const std::size_t w = p.dim(1);
        if (p.requires_grad()) {
          std::vector<double> g(r * w);
          for (std::size_t i = 0; i < r; ++i)
            std::copy_n(o.grad.begin() + static_cast<std::ptrdiff_t>(i * c + off), w, g.begin() + static_cast<std::ptrdiff_t>(i * w));
          accumulate_grad(p, g);
        }
        off += w;
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  if (x.rank() == 0) throw DimensionError("gather_rows on a scalar");
  const std::size_t n = x.dim(0);
  const std::size_t rs = row_size(x);
  for (std::size_t idx : indices) {
    if (idx >= n) throw IndexError("gather_rows: index " + std::to_string(idx) + " out of range for " + std::to_string(n) + " rows");
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  std::vector<double> v(indices.size() * rs);
  auto xv = x.data();
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(indices[k] * rs), rs, v.begin() + static_cast<std::ptrdiff_t>(k * rs));
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(std::move(shape), std::move(v), {x}, [x, idx, rs](const detail::TensorImpl& o) {
    std::vector<double> g(x.numel(), 0.0);
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < rs; ++j) g[idx[k] * rs + j] += o.grad[k * rs + j];
    accumulate_grad(x, g);
  });
}

Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> indices, std::size_t out_rows) {
  if (x.rank() == 0 || x.dim(0) != indices.size()) {
    throw DimensionError("scatter_add_rows: " + std::to_string(indices.size()) + " indices for " + shape_string(x.shape()));
  }
  for (std::size_t idx : indices) {
    if (idx >= out_rows) throw IndexError("scatter_add_rows: index " + std::to_string(idx) + " out of range for " + std::to_string(out_rows) + " rows");
  }
  const std::size_t rs = row_size(x);
  Shape shape = x.shape();
  shape[0] = out_rows;
  std::vector<double> v(out_rows * rs, 0.0);
  auto xv = x.data();
  for (std::size_t k = 0; k < indices.size(); ++k)
    for (std::size_t j = 0; j < rs; ++j) v[indices[k] * rs + j] += xv[k * rs + j];
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(std::move(shape), std::move(v), {x}, [x, idx, rs](const detail::TensorImpl& o) {
    std::vector<double> g(x.numel());
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy_n(o.grad.begin() + static_cast<std::ptrdiff_t>(idx[k] * rs), rs, g.begin() + static_cast<std::ptrdiff_t>(k * rs));
    accumulate_grad(x, g);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on a scalar");
  const std::size_t d = x.shape().back();
  if (d == 0 || gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: " + shape_string(x.shape()) + " with gain " + shape_string(gain.shape()) +
                         " and bias " + shape_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [x, gain, bias, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const detail::TensorImpl& o) {
                       auto gv = gain.data();
                       if (x.requires_grad()) {
                         std::vector<double> g(x.numel());
                         for (std::size_t r = 0; r < rows; ++r) {
                           double mean_g = 0.0, mean_gx = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double gh = o.grad[r * d + j] * gv[j];
                             mean_g += gh;
                             mean_gx += gh * xhat[r * d + j];
                           }
                           mean_g /= static_cast<double>(d);
                           mean_gx /= static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                             const double gh = o.grad[r * d + j] * gv[j];
                             g[r * d + j] = inv_std[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
                           }
                         }
                         accumulate_grad(x, g);
                       }
                       if (gain.requires_grad() || bias.requires_grad()) {
                         std::vector<double> gg(d, 0.0), gb(d, 0.0);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) {
                             gg[j] += o.grad[r * d + j] * xhat[r * d + j];
                             gb[j] += o.grad[r * d + j];
                           }
                         accumulate_grad(gain, gg);
                         accumulate_grad(bias, gb);
                       }
                     });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout rate must be in [0, 1)");
  if (!train || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(x.numel());
  const double scale = 1.0 / (1.0 - p);
  for (auto& m : mask) m = keep(rng) ? scale : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor straight_through(const Tensor& soft, const Tensor& hard) {
  if (soft.shape() != hard.shape()) {
    throw DimensionError("straight_through: " + shape_string(soft.shape()) + " vs " + shape_string(hard.shape()));
  }
  std::vector<double> v(hard.data().begin(), hard.data().end());
  return make_result(soft.shape(), std::move(v), {soft}, [soft](const detail::TensorImpl& o) { accumulate_grad(soft, o.grad); });
}

}  // namespace ver
