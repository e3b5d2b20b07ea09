// SPDX-License-Identifier: Apache-2.0
//
// Dense fp64 tensors with define-by-run reverse-mode differentiation.
//
// Every operation that has at least one gradient-requiring input records a
// backward closure on the thread's active Tape (see TapeScope). Without an
// active tape the result is a plain value and nothing is recorded, which is how
// evaluation-mode code runs.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ver {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const Tape* producer = nullptr;
  std::uint64_t epoch = 0;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor identity(std::size_t n);
  static Tensor vec(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  /// Direct write access. Meant for optimizer updates and finite-difference
  /// probes on leaf tensors; writing into a recorded intermediate corrupts backward.
  std::span<double> mutable_data();
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Copy of the values with no link to the tape.
  Tensor detach() const;
  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations. Replayed in reverse by backward().
class Tape {
 public:
  /// Receives the finished output (values and accumulated gradient) and must
  /// push gradient into its inputs with accumulate_grad().
  using BackwardFn = std::function<void(const detail::TensorImpl& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  /// Drops every recorded entry. Tensors recorded before the clear can no longer
  /// be differentiated through this tape.
  void clear();

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  void record(const Tensor& out, BackwardFn fn);

 private:
  struct Entry {
    std::shared_ptr<detail::TensorImpl> out;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::uint64_t epoch_ = 1;
  bool consumed_ = false;
};

/// Makes `tape` the active tape of the calling thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Extension point for primitives defined outside this header.
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   Tape::BackwardFn backward);
/// Adds `g` into t's gradient buffer if t requires gradients.
void accumulate_grad(const Tensor& t, std::span<const double> g);

// Elementwise binary ops. Operands must have equal shapes, or one of them is a
// single element, or one shape is a trailing suffix of the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor negate(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor clamp_min(const Tensor& x, double lo);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& x);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);
Tensor operator+(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);
/// out[i, j] = x[i, j] * scale[i] for x [n x c] and scale holding n values.
Tensor scale_rows(const Tensor& x, const Tensor& scale);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

/// Softmax along `axis` (negative counts from the back), max-subtracted.
Tensor softmax(const Tensor& x, int axis = -1);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis);

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

/// Rows are the slices along axis 0.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> indices, std::size_t out_rows);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Inverted dropout. Identity when !train or p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool train);

/// Forward value `hard`, gradient routed unchanged into `soft`.
Tensor straight_through(const Tensor& soft, const Tensor& hard);

}  // namespace ver
