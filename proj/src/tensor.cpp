#include "cmal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cmal {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("non-finite value produced by ") + op);
    }
  }
}

void require_2d(const Tensor& t, const char* op) {
  if (t.dim() != 2) {
    throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
  }
}

std::size_t normalize_axis(int axis, std::size_t ndim, const char* op) {
  const int n = static_cast<int>(ndim);
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) {
    throw std::out_of_range(std::string(op) + ": invalid axis " + std::to_string(axis) +
                            " for rank " + std::to_string(ndim));
  }
  return static_cast<std::size_t>(a);
}

// Strides for iterating one axis: outer blocks, axis length, inner stride.
struct AxisView {
  std::size_t outer, length, inner;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

// Output tensor that participates in the tape.
Tensor make_output(Shape shape, std::vector<double> data, bool tracked) {
  return Tensor(std::move(shape), std::move(data), tracked);
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

double* TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  if (product(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::move(data), requires_grad);
}

std::size_t Tensor::rows() const {
  require_2d(*this, "rows");
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  require_2d(*this, "cols");
  return impl_->shape[1];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward called twice on the same tape");
  if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  consumed_ = true;
  loss.impl()->ensure_grad()[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  const bool tracked = wants_grad({&a, &b});
  Tensor c = make_output({m, n}, std::move(out), tracked);
  check_finite(c, "matmul");
  if (tracked) {
    g_active_tape->record([a = a.handle(), b = b.handle(), c = c.handle(), m, k, n] {
      if (c->grad.empty()) return;
      const double* dC = c->grad.data();
      if (a->requires_grad) {
        double* dA = a->ensure_grad();
        const double* B = b->data.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* brow = B + p * n;
            const double* crow = dC + i * n;
            for (std::size_t j = 0; j < n; ++j) s += crow[j] * brow[j];
            dA[i * k + p] += s;
          }
      }
      if (b->requires_grad) {
        double* dB = b->ensure_grad();
        const double* A = a->data.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* crow = dC + i * n;
            double* brow = dB + p * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += av * crow[j];
          }
      }
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  const bool tracked = wants_grad({&a});
  Tensor t = make_output({n, m}, std::move(out), tracked);
  if (tracked) {
    g_active_tape->record([a = a.handle(), t = t.handle(), m, n] {
      if (t->grad.empty()) return;
      double* dA = a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += t->grad[j * m + i];
    });
  }
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = b.dim() == 1 && a.shape() != b.shape();
  if (bias) {
    if (a.shape().back() != b.numel()) {
      throw ShapeError("add: bias " + shape_str(b.shape()) + " does not match last axis of " +
                       shape_str(a.shape()));
    }
  } else if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel(), w = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < n; ++i) out[i] += b.data()[bias ? i % w : i];
  const bool tracked = wants_grad({&a, &b});
  Tensor c = make_output(a.shape(), std::move(out), tracked);
  check_finite(c, "add");
  if (tracked) {
    g_active_tape->record([a = a.handle(), b = b.handle(), c = c.handle(), bias, n, w] {
      if (c->grad.empty()) return;
      if (a->requires_grad) {
        double* dA = a->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) dA[i] += c->grad[i];
      }
      if (b->requires_grad) {
        double* dB = b->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) dB[bias ? i % w : i] += c->grad[i];
      }
    });
  }
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return add(a, scale(b, -1.0));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
  const bool tracked = wants_grad({&a, &b});
  Tensor c = make_output(a.shape(), std::move(out), tracked);
  check_finite(c, "mul");
  if (tracked) {
    g_active_tape->record([a = a.handle(), b = b.handle(), c = c.handle(), n] {
      if (c->grad.empty()) return;
      if (a->requires_grad) {
        double* dA = a->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) dA[i] += c->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        double* dB = b->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) dB[i] += c->grad[i] * a->data[i];
      }
    });
  }
  return c;
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  const bool tracked = wants_grad({&a});
  Tensor c = make_output(a.shape(), std::move(out), tracked);
  check_finite(c, "scale");
  if (tracked) {
    g_active_tape->record([a = a.handle(), c = c.handle(), factor] {
      if (c->grad.empty()) return;
      double* dA = a->ensure_grad();
      for (std::size_t i = 0; i < c->grad.size(); ++i) dA[i] += factor * c->grad[i];
    });
  }
  return c;
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  const bool tracked = wants_grad({&a});
  Tensor c = make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    g_active_tape->record([a = a.handle(), c = c.handle()] {
      if (c->grad.empty()) return;
      double* dA = a->ensure_grad();
      for (std::size_t i = 0; i < c->grad.size(); ++i)
        if (a->data[i] > 0.0) dA[i] += c->grad[i];
    });
  }
  return c;
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = std::log(v);
  const bool tracked = wants_grad({&a});
  Tensor c = make_output(a.shape(), std::move(out), tracked);
  check_finite(c, "log");
  if (tracked) {
    g_active_tape->record([a = a.handle(), c = c.handle()] {
      if (c->grad.empty()) return;
      double* dA = a->ensure_grad();
      for (std::size_t i = 0; i < c->grad.size(); ++i) dA[i] += c->grad[i] / a->data[i];
    });
  }
  return c;
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = std::exp(v);
  const bool tracked = wants_grad({&a});
  Tensor c = make_output(a.shape(), std::move(out), tracked);
  check_finite(c, "exp");
  if (tracked) {
    g_active_tape->record([a = a.handle(), c = c.handle()] {
      if (c->grad.empty()) return;
      double* dA = a->ensure_grad();
      for (std::size_t i = 0; i < c->grad.size(); ++i) dA[i] += c->grad[i] * c->data[i];
    });
  }
  return c;
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.dim(), "softmax");
  const AxisView v = axis_view(x.shape(), ax);
  std::vector<double> out(x.numel());
  const double* in = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t r = 0; r < v.inner; ++r) {
      const std::size_t base = o * v.length * v.inner + r;
      double mx = in[base];
      for (std::size_t i = 1; i < v.length; ++i) mx = std::max(mx, in[base + i * v.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < v.length; ++i) {
        const double e = std::exp(in[base + i * v.inner] - mx);
        out[base + i * v.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < v.length; ++i) out[base + i * v.inner] /= z;
    }
  const bool tracked = wants_grad({&x});
  Tensor y = make_output(x.shape(), std::move(out), tracked);
  check_finite(y, "softmax");
  if (tracked) {
    g_active_tape->record([x = x.handle(), y = y.handle(), v] {
      if (y->grad.empty()) return;
      double* dX = x->ensure_grad();
      const double* Y = y->data.data();
      const double* dY = y->grad.data();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t r = 0; r < v.inner; ++r) {
          const std::size_t base = o * v.length * v.inner + r;
          double dot = 0.0;
          for (std::size_t i = 0; i < v.length; ++i) dot += dY[base + i * v.inner] * Y[base + i * v.inner];
          for (std::size_t i = 0; i < v.length; ++i) {
            const std::size_t idx = base + i * v.inner;
            dX[idx] += Y[idx] * (dY[idx] - dot);
          }
        }
    });
  }
  return y;
}

Tensor log_softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.dim(), "log_softmax");
  const AxisView v = axis_view(x.shape(), ax);
  std::vector<double> out(x.numel());
  const double* in = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t r = 0; r < v.inner; ++r) {
      const std::size_t base = o * v.length * v.inner + r;
      double mx = in[base];
      for (std::size_t i = 1; i < v.length; ++i) mx = std::max(mx, in[base + i * v.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < v.length; ++i) z += std::exp(in[base + i * v.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t i = 0; i < v.length; ++i) out[base + i * v.inner] = in[base + i * v.inner] - lz;
    }
  const bool tracked = wants_grad({&x});
  Tensor y = make_output(x.shape(), std::move(out), tracked);
  check_finite(y, "log_softmax");
  if (tracked) {
    g_active_tape->record([x = x.handle(), y = y.handle(), v] {
      if (y->grad.empty()) return;
      double* dX = x->ensure_grad();
      const double* Y = y->data.data();
      const double* dY = y->grad.data();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t r = 0; r < v.inner; ++r) {
          const std::size_t base = o * v.length * v.inner + r;
          double total = 0.0;
          for (std::size_t i = 0; i < v.length; ++i) total += dY[base + i * v.inner];
          for (std::size_t i = 0; i < v.length; ++i) {
            const std::size_t idx = base + i * v.inner;
            dX[idx] += dY[idx] - std::exp(Y[idx]) * total;
          }
        }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const double* X = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = X + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gain.data()[j] + bias.data()[j];
    }
  }
  const bool tracked = wants_grad({&x, &gain, &bias});
  Tensor y = make_output(x.shape(), std::move(out), tracked);
  check_finite(y, "layer_norm");
  if (tracked) {
    g_active_tape->record([x = x.handle(), g = gain.handle(), b = bias.handle(), y = y.handle(),
                           xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
      if (y->grad.empty()) return;
      const double* dY = y->grad.data();
      if (g->requires_grad) {
        double* dG = g->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) dG[j] += dY[r * d + j] * xhat[r * d + j];
      }
      if (b->requires_grad) {
        double* dB = b->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) dB[j] += dY[r * d + j];
      }
      if (x->requires_grad) {
        double* dX = x->ensure_grad();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gx = dY[r * d + j] * g->data[j];
            s1 += gx;
            s2 += gx * xhat[r * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double gx = dY[r * d + j] * g->data[j];
            dX[r * d + j] += inv_std[r] * (gx - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
          }
        }
      }
    });
  }
  return y;
}

Tensor embedding_gather(const Tensor& table, std::span<const std::int32_t> ids) {
  require_2d(table, "embedding_gather");
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding_gather: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const bool tracked = wants_grad({&table});
  Tensor y = make_output({ids.size(), d}, std::move(out), tracked);
  if (tracked) {
    g_active_tape->record([t = table.handle(), y = y.handle(),
                           ids = std::vector<std::int32_t>(ids.begin(), ids.end()), d] {
      if (y->grad.empty()) return;
      double* dT = t->ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          dT[static_cast<std::size_t>(ids[i]) * d + j] += y->grad[i * d + j];
    });
  }
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const Tensor& p : parts) {
    if (p.dim() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != ax && p.shape()[i] != first[i]) {
        throw ShapeError("concat: shapes " + shape_str(first) + " and " + shape_str(p.shape()) +
                         " differ off the concat axis");
      }
    out_shape[ax] += p.shape()[ax];
  }
  const AxisView v = axis_view(out_shape, ax);
  std::vector<double> out(product(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[ax];
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(p.data().data() + o * len * v.inner, len * v.inner,
                  out.data() + (o * v.length + offset) * v.inner);
    offset += len;
  }
  bool tracked = false;
  if (g_active_tape != nullptr)
    for (const Tensor& p : parts) tracked = tracked || p.requires_grad();
  Tensor y = make_output(out_shape, std::move(out), tracked);
  if (tracked) {
    std::vector<std::shared_ptr<TensorImpl>> handles;
    for (const Tensor& p : parts) handles.push_back(p.handle());
    g_active_tape->record([handles = std::move(handles), offsets = std::move(offsets), y = y.handle(), v,
                           ax] {
      if (y->grad.empty()) return;
      for (std::size_t k = 0; k < handles.size(); ++k) {
        auto& p = handles[k];
        if (!p->requires_grad) continue;
        double* dP = p->ensure_grad();
        const std::size_t len = p->shape[ax];
        for (std::size_t o = 0; o < v.outer; ++o) {
          const double* src = y->grad.data() + (o * v.length + offsets[k]) * v.inner;
          double* dst = dP + o * len * v.inner;
          for (std::size_t i = 0; i < len * v.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.dim(), "slice");
  if (start + length > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds axis of " + shape_str(x.shape()));
  }
  const AxisView v = axis_view(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<double> out(product(out_shape));
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(x.data().data() + (o * v.length + start) * v.inner, length * v.inner,
                out.data() + o * length * v.inner);
  const bool tracked = wants_grad({&x});
  Tensor y = make_output(out_shape, std::move(out), tracked);
  if (tracked) {
    g_active_tape->record([x = x.handle(), y = y.handle(), v, start, length] {
      if (y->grad.empty()) return;
      double* dX = x->ensure_grad();
      for (std::size_t o = 0; o < v.outer; ++o) {
        const double* src = y->grad.data() + o * length * v.inner;
        double* dst = dX + (o * v.length + start) * v.inner;
        for (std::size_t i = 0; i < length * v.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

Tensor pick(const Tensor& x, std::span<const std::int32_t> index) {
  require_2d(x, "pick");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (index.size() != rows) {
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for " + shape_str(x.shape()));
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= cols) {
      throw std::out_of_range("pick: index " + std::to_string(index[r]) + " out of range");
    }
    out[r] = x.data()[r * cols + static_cast<std::size_t>(index[r])];
  }
  const bool tracked = wants_grad({&x});
  Tensor y = make_output({rows}, std::move(out), tracked);
  if (tracked) {
    g_active_tape->record([x = x.handle(), y = y.handle(),
                           index = std::vector<std::int32_t>(index.begin(), index.end()), cols] {
      if (y->grad.empty()) return;
      double* dX = x->ensure_grad();
      for (std::size_t r = 0; r < index.size(); ++r)
        dX[r * cols + static_cast<std::size_t>(index[r])] += y->grad[r];
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const bool tracked = wants_grad({&x});
  Tensor y = make_output({1}, {s}, tracked);
  check_finite(y, "sum");
  if (tracked) {
    g_active_tape->record([x = x.handle(), y = y.handle()] {
      if (y->grad.empty()) return;
      double* dX = x->ensure_grad();
      for (std::size_t i = 0; i < x->data.size(); ++i) dX[i] += y->grad[0];
    });
  }
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_rows(const Tensor& x) {
  require_2d(x, "mean_rows");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (rows == 0) throw ShapeError("mean_rows: empty input");
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += x.data()[r * cols + c];
  for (double& v : out) v /= static_cast<double>(rows);
  const bool tracked = wants_grad({&x});
  Tensor y = make_output({1, cols}, std::move(out), tracked);
  if (tracked) {
    g_active_tape->record([x = x.handle(), y = y.handle(), rows, cols] {
      if (y->grad.empty()) return;
      double* dX = x->ensure_grad();
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dX[r * cols + c] += y->grad[c] * inv;
    });
  }
  return y;
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  if (!x.requires_grad()) throw std::invalid_argument("grad_check: x must require grad");
  x.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(x);
    if (y.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
    tape.backward(y);
  }
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  double worst = 0.0;
  auto values = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double fp = f(x).item();
    values[i] = saved - h;
    const double fm = f(x).item();
    values[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace cmal
