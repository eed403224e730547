#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmal {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

/// Raised on any shape disagreement between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward op produces NaN or Inf.
struct NonFiniteError : std::domain_error {
  using std::domain_error::domain_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;

  double* ensure_grad();
};

/// Dense fp64 row-major value with an optional gradient buffer.
///
/// Tensor is a cheap handle: copies share storage. Use clone() for a deep
/// copy and detach() for a copy that is cut off from the tape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> grad() { return impl_->grad; }
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of executed differentiable ops.
///
/// Ops are appended in execution order, so inputs always precede their
/// consumers. backward() walks the record once in reverse and then marks the
/// tape consumed; a second call throws.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { ops_.push_back(std::move(fn)); }
  void backward(const Tensor& loss);
  std::size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<BackwardFn> ops_;
  bool consumed_ = false;
};

/// Installs a tape as the thread's recording target for its lifetime.
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

// Differentiable ops. Inputs that require grad and an active tape cause the
// op to be recorded; otherwise the op runs as plain arithmetic.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Same-shape add, or bias-add when b is 1-D and matches a's last axis.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Rows of `table` selected by `ids`; result is ids.size() x table.cols().
Tensor embedding_gather(const Tensor& table, std::span<const std::int32_t> ids);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
/// x[r, index[r]] for each row r of a 2-D tensor.
Tensor pick(const Tensor& x, std::span<const std::int32_t> index);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Column-wise mean of a 2-D tensor, shape 1 x cols.
Tensor mean_rows(const Tensor& x);
/// Inverted dropout. The sampled mask is captured for the backward pass.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

/// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
/// using central differences (f(x+h) - f(x-h)) / 2h. `f` must return a scalar
/// and is re-evaluated without a tape for the numeric side.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5);

}  // namespace cmal
