#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tally/rng.hpp"

namespace tally {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) {
      grad.assign(data.size(), 0.0);
    }
  }
};

}  // namespace detail

class Tensor;

// Reverse-mode tape. Ops append one node per primitive in execution order, so
// walking the list back-to-front is a reverse topological traversal that
// touches each node exactly once; fan-out is handled by additive accumulation
// into the shared gradient buffers. The tape is rebuilt every forward pass.
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    used_ = false;
  }

  void backward(const Tensor& loss);

  // Active tape for the current thread; ops record here when non-null.
  static Tape*& current() {
    thread_local Tape* active = nullptr;
    return active;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool used_ = false;
};

// RAII activation of a tape on the calling thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(Tape::current()) {
    Tape::current() = &tape;
  }
  ~TapeScope() { Tape::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Dense row-major f64 tensor. Value-semantic handle: copies share the buffer,
// which is what the tape needs to route gradients back to leaves.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(shape_numel(t.impl_->shape), value);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw std::invalid_argument("Tensor::from: data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor random_uniform(Shape shape, Rng& rng, double lo = -1.0,
                               double hi = 1.0, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.impl_->data) {
      v = rng.uniform(lo, hi);
    }
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }

  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& operator[](std::size_t i) { return impl_->data[i]; }

  double value() const {
    if (numel() != 1) {
      throw std::invalid_argument("Tensor::value: tensor is not scalar");
    }
    return impl_->data[0];
  }

  bool has_grad() const { return !impl_->grad.empty(); }

  std::vector<double>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }

  const std::vector<double>& grad() const {
    if (impl_->grad.empty()) {
      throw std::runtime_error("Tensor::grad: no gradient accumulated");
    }
    return impl_->grad;
  }

  void zero_grad() {
    if (!impl_->grad.empty()) {
      std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }
  }

  // Value copy cut loose from any graph.
  Tensor detach() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = false;
    return t;
  }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

inline void Tape::backward(const Tensor& loss) {
  if (used_) {
    throw std::runtime_error("Tape::backward: called twice without reset");
  }
  if (loss.numel() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  }
  used_ = true;
  auto impl = loss.impl();
  impl->ensure_grad();
  impl->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    (*it)();
  }
}

namespace detail {

inline bool grad_needed(std::initializer_list<const Tensor*> inputs) {
  if (Tape::current() == nullptr) {
    return false;
  }
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) {
      return true;
    }
  }
  return false;
}

inline void debug_check_finite(const Tensor& t) {
#ifndef NDEBUG
  for (double v : t.data()) {
    assert(std::isfinite(v) && "non-finite value produced by tensor op");
  }
#else
  (void)t;
#endif
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] + b[i];
  }
  if (detail::grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi, n]() {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i];
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] - b[i];
  }
  if (detail::grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi, n]() {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) bi->grad[i] -= oi->grad[i];
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] * b[i];
  }
  if (detail::grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi, n]() {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          ai->grad[i] += oi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          bi->grad[i] += oi->grad[i] * ai->data[i];
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] / b[i];
  }
  if (detail::grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi, n]() {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          ai->grad[i] += oi->grad[i] / bi->data[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          bi->grad[i] -=
              oi->grad[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] + c;
  }
  if (detail::grad_needed({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, n]() {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] * c;
  }
  if (detail::grad_needed({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, n, c]() {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * c;
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor sqrt(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::sqrt(a[i]);
  }
  if (detail::grad_needed({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, n]() {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        ai->grad[i] += oi->grad[i] * 0.5 / oi->data[i];
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor recip(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = 1.0 / a[i];
  }
  if (detail::grad_needed({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, n]() {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        ai->grad[i] -= oi->grad[i] * oi->data[i] * oi->data[i];
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] > 0.0 ? a[i] : 0.0;
  }
  if (detail::grad_needed({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, n]() {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (ai->data[i] > 0.0) ai->grad[i] += oi->grad[i];
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    total += a[i];
  }
  Tensor out = Tensor::scalar(total);
  if (detail::grad_needed({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi]() {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      const double g = oi->grad[0];
      for (double& v : ai->grad) v += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: expects rank-2 tensors, got " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], p = b.shape()[1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, p});
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ad[i * k + kk];
      for (std::size_t j = 0; j < p; ++j) {
        od[i * p + j] += av * bd[kk * p + j];
      }
    }
  }
  if (detail::grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi, m, k, p]() {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < p; ++j) {
            const double g = oi->grad[i * p + j];
            for (std::size_t kk = 0; kk < k; ++kk) {
              ai->grad[i * k + kk] += g * bi->data[kk * p + j];
            }
          }
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = ai->data[i * k + kk];
            for (std::size_t j = 0; j < p; ++j) {
              bi->grad[kk * p + j] += av * oi->grad[i * p + j];
            }
          }
        }
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

// ---------------------------------------------------------------------------
// convolution (3x3, stride 1, zero padding 1: spatial extent preserved)
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 4) {
    throw std::invalid_argument("conv2d: input must be [N,C,H,W], got " +
                                shape_str(x.shape()));
  }
  if (kernel.rank() != 4 || kernel.shape()[2] != 3 || kernel.shape()[3] != 3) {
    throw std::invalid_argument("conv2d: kernel must be [Cout,Cin,3,3], got " +
                                shape_str(kernel.shape()));
  }
  const std::size_t n = x.shape()[0], cin = x.shape()[1];
  const std::size_t h = x.shape()[2], w = x.shape()[3];
  const std::size_t cout = kernel.shape()[0];
  if (kernel.shape()[1] != cin) {
    throw std::invalid_argument(
        "conv2d: channel mismatch, input has " + std::to_string(cin) +
        " channels, kernel expects " + std::to_string(kernel.shape()[1]));
  }
  Tensor out = Tensor::zeros({n, cout, h, w});
  const auto& xd = x.data();
  const auto& kd = kernel.data();
  auto& od = out.data();
  const std::size_t xplane = h * w;

  // For each tap (ky,kx): out[:, oy, ox] += k * x[:, oy+ky-1, ox+kx-1]
  // over the rows/cols where the shifted index stays in range.
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* op = od.data() + (img * cout + co) * xplane;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xp = xd.data() + (img * cin + ci) * xplane;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - 1;
          const std::size_t oy_lo = dy < 0 ? 1 : 0;
          const std::size_t oy_hi = dy > 0 ? h - 1 : h;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - 1;
            const std::size_t ox_lo = dx < 0 ? 1 : 0;
            const std::size_t ox_hi = dx > 0 ? w - 1 : w;
            const double kv = kd[((co * cin + ci) * 3 + ky) * 3 + kx];
            if (kv == 0.0) continue;
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const std::size_t iy = static_cast<std::size_t>(
                  static_cast<std::ptrdiff_t>(oy) + dy);
              double* orow = op + oy * w;
              const double* xrow = xp + iy * w;
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                orow[ox] += kv * xrow[static_cast<std::size_t>(
                                     static_cast<std::ptrdiff_t>(ox) + dx)];
              }
            }
          }
        }
      }
    }
  }

  if (detail::grad_needed({&x, &kernel})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), ki = kernel.impl(), oi = out.impl();
    Tape::current()->record([xi, ki, oi, n, cin, cout, h, w, xplane]() {
      if (oi->grad.empty()) return;
      const bool need_x = xi->requires_grad;
      const bool need_k = ki->requires_grad;
      if (need_x) xi->ensure_grad();
      if (need_k) ki->ensure_grad();
      for (std::size_t img = 0; img < n; ++img) {
        for (std::size_t co = 0; co < cout; ++co) {
          const double* gp = oi->grad.data() + (img * cout + co) * xplane;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xp = xi->data.data() + (img * cin + ci) * xplane;
            double* xgp =
                need_x ? xi->grad.data() + (img * cin + ci) * xplane : nullptr;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - 1;
              const std::size_t oy_lo = dy < 0 ? 1 : 0;
              const std::size_t oy_hi = dy > 0 ? h - 1 : h;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - 1;
                const std::size_t ox_lo = dx < 0 ? 1 : 0;
                const std::size_t ox_hi = dx > 0 ? w - 1 : w;
                const std::size_t kidx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                const double kv = ki->data[kidx];
                double ksum = 0.0;
                for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                  const std::size_t iy = static_cast<std::size_t>(
                      static_cast<std::ptrdiff_t>(oy) + dy);
                  const double* grow = gp + oy * w;
                  const double* xrow = xp + iy * w;
                  double* xgrow = need_x ? xgp + iy * w : nullptr;
                  for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                    const std::size_t ix = static_cast<std::size_t>(
                        static_cast<std::ptrdiff_t>(ox) + dx);
                    const double g = grow[ox];
                    if (need_x) xgrow[ix] += g * kv;
                    ksum += g * xrow[ix];
                  }
                }
                if (need_k) ki->grad[kidx] += ksum;
              }
            }
          }
        }
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

// Per-channel bias over [N,C,H,W].
inline Tensor conv_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 4 || b.rank() != 1 || b.shape()[0] != x.shape()[1]) {
    throw std::invalid_argument("conv_bias: want [N,C,H,W] + [C], got " +
                                shape_str(x.shape()) + " + " +
                                shape_str(b.shape()));
  }
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t plane = x.shape()[2] * x.shape()[3];
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double bv = b[ch];
      const std::size_t base = (img * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        out[base + i] = x[base + i] + bv;
      }
    }
  }
  if (detail::grad_needed({&x, &b})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([xi, bi, oi, n, c, plane]() {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (std::size_t i = 0; i < oi->grad.size(); ++i) {
          xi->grad[i] += oi->grad[i];
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t img = 0; img < n; ++img) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (img * c + ch) * plane;
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) s += oi->grad[base + i];
            bi->grad[ch] += s;
          }
        }
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

// Row-wise bias over [N,K].
inline Tensor linear_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || b.shape()[0] != x.shape()[1]) {
    throw std::invalid_argument("linear_bias: want [N,K] + [K], got " +
                                shape_str(x.shape()) + " + " +
                                shape_str(b.shape()));
  }
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = x[i * k + j] + b[j];
    }
  }
  if (detail::grad_needed({&x, &b})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([xi, bi, oi, n, k]() {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (std::size_t i = 0; i < oi->grad.size(); ++i) {
          xi->grad[i] += oi->grad[i];
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            bi->grad[j] += oi->grad[i * k + j];
          }
        }
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) {
    throw std::invalid_argument("global_avg_pool: want [N,C,H,W], got " +
                                shape_str(x.shape()));
  }
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t plane = x.shape()[2] * x.shape()[3];
  Tensor out = Tensor::zeros({n, c});
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (img * c + ch) * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += x[base + i];
      out[img * c + ch] = s / static_cast<double>(plane);
    }
  }
  if (detail::grad_needed({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::current()->record([xi, oi, n, c, plane]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      const double inv = 1.0 / static_cast<double>(plane);
      for (std::size_t img = 0; img < n; ++img) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double g = oi->grad[img * c + ch] * inv;
          const std::size_t base = (img * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) xi->grad[base + i] += g;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// per-channel instance statistics over a single example [C,H,W]
// ---------------------------------------------------------------------------

inline Tensor channel_mean(const Tensor& x) {
  if (x.rank() != 3) {
    throw std::invalid_argument("channel_mean: want [C,H,W], got " +
                                shape_str(x.shape()));
  }
  const std::size_t c = x.shape()[0];
  const std::size_t plane = x.shape()[1] * x.shape()[2];
  Tensor out = Tensor::zeros({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += x[ch * plane + i];
    out[ch] = s / static_cast<double>(plane);
  }
  if (detail::grad_needed({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::current()->record([xi, oi, c, plane]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      const double inv = 1.0 / static_cast<double>(plane);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = oi->grad[ch] * inv;
        for (std::size_t i = 0; i < plane; ++i) xi->grad[ch * plane + i] += g;
      }
    });
  }
  return out;
}

inline Tensor scale_channels(const Tensor& x, const Tensor& s) {
  if (x.rank() != 3 || s.rank() != 1 || s.shape()[0] != x.shape()[0]) {
    throw std::invalid_argument("scale_channels: want [C,H,W] * [C], got " +
                                shape_str(x.shape()) + " * " +
                                shape_str(s.shape()));
  }
  const std::size_t c = x.shape()[0];
  const std::size_t plane = x.shape()[1] * x.shape()[2];
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double sv = s[ch];
    for (std::size_t i = 0; i < plane; ++i) {
      out[ch * plane + i] = x[ch * plane + i] * sv;
    }
  }
  if (detail::grad_needed({&x, &s})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), si = s.impl(), oi = out.impl();
    Tape::current()->record([xi, si, oi, c, plane]() {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double sv = si->data[ch];
          for (std::size_t i = 0; i < plane; ++i) {
            xi->grad[ch * plane + i] += oi->grad[ch * plane + i] * sv;
          }
        }
      }
      if (si->requires_grad) {
        si->ensure_grad();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double g = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            g += oi->grad[ch * plane + i] * xi->data[ch * plane + i];
          }
          si->grad[ch] += g;
        }
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

inline Tensor shift_channels(const Tensor& x, const Tensor& b) {
  if (x.rank() != 3 || b.rank() != 1 || b.shape()[0] != x.shape()[0]) {
    throw std::invalid_argument("shift_channels: want [C,H,W] + [C], got " +
                                shape_str(x.shape()) + " + " +
                                shape_str(b.shape()));
  }
  const std::size_t c = x.shape()[0];
  const std::size_t plane = x.shape()[1] * x.shape()[2];
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double bv = b[ch];
    for (std::size_t i = 0; i < plane; ++i) {
      out[ch * plane + i] = x[ch * plane + i] + bv;
    }
  }
  if (detail::grad_needed({&x, &b})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([xi, bi, oi, c, plane]() {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (std::size_t i = 0; i < oi->grad.size(); ++i) {
          xi->grad[i] += oi->grad[i];
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double g = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            g += oi->grad[ch * plane + i];
          }
          bi->grad[ch] += g;
        }
      }
    });
  }
  detail::debug_check_finite(out);
  return out;
}

// ---------------------------------------------------------------------------
// batch plumbing
// ---------------------------------------------------------------------------

inline Tensor select_example(const Tensor& x, std::size_t idx) {
  if (x.rank() != 4) {
    throw std::invalid_argument("select_example: want [N,C,H,W], got " +
                                shape_str(x.shape()));
  }
  if (idx >= x.shape()[0]) {
    throw std::invalid_argument("select_example: index " +
                                std::to_string(idx) + " out of range");
  }
  const std::size_t stride = x.shape()[1] * x.shape()[2] * x.shape()[3];
  Tensor out = Tensor::zeros({x.shape()[1], x.shape()[2], x.shape()[3]});
  const std::size_t base = idx * stride;
  for (std::size_t i = 0; i < stride; ++i) {
    out[i] = x[base + i];
  }
  if (detail::grad_needed({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::current()->record([xi, oi, base, stride]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < stride; ++i) {
        xi->grad[base + i] += oi->grad[i];
      }
    });
  }
  return out;
}

inline Tensor stack_examples(const std::vector<Tensor>& xs) {
  if (xs.empty()) {
    throw std::invalid_argument("stack_examples: empty batch");
  }
  const Shape& one = xs.front().shape();
  if (one.size() != 3) {
    throw std::invalid_argument("stack_examples: elements must be [C,H,W]");
  }
  for (const Tensor& t : xs) {
    if (t.shape() != one) {
      throw std::invalid_argument("stack_examples: inconsistent shapes " +
                                  shape_str(one) + " vs " +
                                  shape_str(t.shape()));
    }
  }
  const std::size_t stride = shape_numel(one);
  Tensor out = Tensor::zeros({xs.size(), one[0], one[1], one[2]});
  for (std::size_t n = 0; n < xs.size(); ++n) {
    const auto& src = xs[n].data();
    for (std::size_t i = 0; i < stride; ++i) {
      out[n * stride + i] = src[i];
    }
  }
  bool any_grad = false;
  for (const Tensor& t : xs) {
    any_grad = any_grad || t.requires_grad();
  }
  if (Tape::current() != nullptr && any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    impls.reserve(xs.size());
    for (const Tensor& t : xs) impls.push_back(t.impl());
    auto oi = out.impl();
    Tape::current()->record([impls, oi, stride]() {
      if (oi->grad.empty()) return;
      for (std::size_t n = 0; n < impls.size(); ++n) {
        auto& xi = impls[n];
        if (!xi->requires_grad) continue;
        xi->ensure_grad();
        for (std::size_t i = 0; i < stride; ++i) {
          xi->grad[i] += oi->grad[n * stride + i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// classification losses
// ---------------------------------------------------------------------------

namespace detail {

// Shared softmax--cross-entropy family. focal_gamma == 0 is plain
// cross-entropy; both run through the identical log-sum-exp path so the
// reduction case is exact, not approximate.
inline Tensor softmax_focal_impl(const Tensor& logits,
                                 const std::vector<std::size_t>& labels,
                                 double focal_gamma) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("cross_entropy: logits must be [N,K], got " +
                                shape_str(logits.shape()));
  }
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (n == 0) {
    throw std::invalid_argument("cross_entropy: empty batch");
  }
  if (labels.size() != n) {
    throw std::invalid_argument("cross_entropy: batch of " +
                                std::to_string(n) + " logits but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (std::size_t y : labels) {
    if (y >= k) {
      throw std::invalid_argument("cross_entropy: invalid class index " +
                                  std::to_string(y) + " for " +
                                  std::to_string(k) + " classes");
    }
  }
  std::vector<double> probs(n * k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - lse);
    }
    const double ce = lse - row[labels[i]];  // == -log p_y
    const double py = probs[i * k + labels[i]];
    total += std::pow(1.0 - py, focal_gamma) * ce;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));

  if (detail::grad_needed({&logits})) {
    out.set_requires_grad(true);
    auto li = logits.impl(), oi = out.impl();
    Tape::current()->record(
        [li, oi, labels, probs = std::move(probs), n, k, focal_gamma]() {
          if (oi->grad.empty() || !li->requires_grad) return;
          li->ensure_grad();
          const double g = oi->grad[0] / static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t y = labels[i];
            const double py = std::max(probs[i * k + y], 1e-300);
            const double q = 1.0 - py;
            // d/dp of -(1-p)^gamma log p, with the p->1 limit made explicit
            double fprime;
            if (focal_gamma == 0.0) {
              fprime = -1.0 / py;
            } else {
              const double t1 = q > 0.0 ? focal_gamma *
                                              std::pow(q, focal_gamma - 1.0) *
                                              std::log(py)
                                        : 0.0;
              const double t2 = -std::pow(q, focal_gamma) / py;
              fprime = t1 + t2;
            }
            for (std::size_t j = 0; j < k; ++j) {
              const double dpy_dzj =
                  py * ((j == y ? 1.0 : 0.0) - probs[i * k + j]);
              li->grad[i * k + j] += g * fprime * dpy_dzj;
            }
          }
        });
  }
  return out;
}

}  // namespace detail

// Mean cross-entropy with log-sum-exp stabilisation; labels are class ids.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<std::size_t>& labels) {
  return detail::softmax_focal_impl(logits, labels, 0.0);
}

// Row-wise softmax probabilities, plain math (no tape).
inline std::vector<double> softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("softmax_rows: want [N,K]");
  }
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  std::vector<double> probs(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx) / z;
    }
  }
  return probs;
}

}  // namespace tally
