// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense float64 tensors with define-by-run reverse-mode autodiff.
//
// Every op returns a fresh Tensor. When grad mode is on and at least one input
// requires a gradient, the result remembers its parents and a closure that
// pushes the result's gradient back into them. Tensor::backward() runs those
// closures in reverse topological order. Gradients accumulate by sum.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cpfm/errors.hpp"

namespace cpfm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_enabled; }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel_of(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  /// Size of `axis`; negative axes count from the end.
  std::size_t dim(int axis) const { return node_->shape[normalize_axis(axis)]; }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                           std::to_string(r));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  const std::vector<double>& vec() const { return node_->value; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor with " + std::to_string(numel()) + " values");
    return node_->value[0];
  }

  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient values, or an empty span when nothing has flowed in yet.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Copy without graph history.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  /// Reverse-mode sweep from a scalar loss.
  void backward() const;

  // Internal access for op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_mode_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor* t : inputs) node->parents.push_back(t->node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

inline bool wants_grad(const std::shared_ptr<Node>& n) { return n->requires_grad; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// True when b's shape equals the trailing dims of a's shape.
inline bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

}  // namespace detail

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The second operand may broadcast when its shape is a
// suffix of the first operand's shape (bias vectors, position tables).

namespace detail {

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(name) + ": cannot broadcast " + shape_str(b.shape()) +
                         " onto " + shape_str(a.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t m = b.numel();
  std::vector<double> out(n);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % m]);
  auto an = a.node();
  auto bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn, n, m, da, db](Node& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(an->value[i], bn->value[i % m]);
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gb[i % m] += g[i] * db(an->value[i], bn->value[i % m]);
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const auto& xv = x.vec();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xv[i]);
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {&x}, [xn, n, deriv](Node& self) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[i] * deriv(xn->value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_op(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

/// log(x + eps), elementwise.
inline Tensor log_eps(const Tensor& x, double eps) {
  return detail::unary_op(
      x, [eps](double v) { return std::log(v + eps); },
      [eps](double v, double) { return 1.0 / (v + eps); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping.

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto xn = x.node();
  return detail::make_result(Shape{}, {s}, {&x}, [xn](detail::Node& self) {
    auto& gx = xn->grad_buffer();
    const double g = self.grad[0];
    for (double& v : gx) v += g;
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Mean over one axis; that axis is removed from the result shape.
inline Tensor mean_axis(const Tensor& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  const Shape& s = x.shape();
  const std::size_t outer = numel_of(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(ax)));
  const std::size_t len = s[ax];
  const std::size_t inner = numel_of(Shape(s.begin() + static_cast<std::ptrdiff_t>(ax) + 1, s.end()));
  if (len == 0) throw ContractError("mean_axis over empty axis");
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<double> out(outer * inner, 0.0);
  const auto& xv = x.vec();
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + l) * inner + i];
  for (double& v : out) v *= inv;
  auto xn = x.node();
  return detail::make_result(std::move(out_shape), std::move(out), {&x},
                             [xn, outer, len, inner, inv](detail::Node& self) {
                               auto& gx = xn->grad_buffer();
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t l = 0; l < len; ++l)
                                   for (std::size_t i = 0; i < inner; ++i)
                                     gx[(o * len + l) * inner + i] += self.grad[o * inner + i] * inv;
                             });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto xn = x.node();
  return detail::make_result(std::move(shape), x.vec(), {&x}, [xn](detail::Node& self) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

namespace detail {

/// y[rows, n] += x[rows, k] * w[k, n], four rows at a time. Each output
/// element accumulates over k in order, so blocking does not change results.
inline void gemm_acc(const double* __restrict x, const double* __restrict w, double* __restrict y, std::size_t rows,
                     std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= rows; i += 4) {
    double* y0 = y + i * n;
    double* y1 = y0 + n;
    double* y2 = y1 + n;
    double* y3 = y2 + n;
    const double* x0 = x + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = x0[p], a1 = x0[k + p], a2 = x0[2 * k + p], a3 = x0[3 * k + p];
      const double* wp = w + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        y0[j] += a0 * wp[j];
        y1[j] += a1 * wp[j];
        y2[j] += a2 * wp[j];
        y3[j] += a3 * wp[j];
      }
    }
  }
  for (; i < rows; ++i) {
    double* yi = y + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = x[i * k + p];
      const double* wp = w + p * n;
      for (std::size_t j = 0; j < n; ++j) yi[j] += a * wp[j];
    }
  }
}

inline std::vector<double> transpose2d(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

}  // namespace detail

/// x[..., k] times w[k, n] -> [..., n]. Covers plain 2-D matmul and batched linear maps.
inline Tensor matmul(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0)) {
    throw DimensionError("matmul: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0);
  const std::size_t n = w.dim(1);
  const std::size_t rows = k == 0 ? 0 : x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<double> out(rows * n, 0.0);
  detail::gemm_acc(x.vec().data(), w.vec().data(), out.data(), rows, k, n);
  auto xn = x.node();
  auto wn = w.node();
  return detail::make_result(std::move(out_shape), std::move(out), {&x, &w},
                             [xn, wn, rows, k, n](detail::Node& self) {
                               const double* g = self.grad.data();
                               if (xn->requires_grad) {
                                 const auto wt = detail::transpose2d(wn->value.data(), k, n);
                                 detail::gemm_acc(g, wt.data(), xn->grad_buffer().data(), rows, n, k);
                               }
                               if (wn->requires_grad) {
                                 const auto xt = detail::transpose2d(xn->value.data(), rows, k);
                                 detail::gemm_acc(xt.data(), g, wn->grad_buffer().data(), k, rows, n);
                               }
                             });
}

/// Subtract-max softmax along `axis`.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const std::size_t ax = x.normalize_axis(axis);
  const Shape& s = x.shape();
  const std::size_t outer = numel_of(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(ax)));
  const std::size_t len = s[ax];
  const std::size_t inner = numel_of(Shape(s.begin() + static_cast<std::ptrdiff_t>(ax) + 1, s.end()));
  std::vector<double> out(x.numel());
  const auto& xv = x.vec();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -INFINITY;
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(xv[base + l * inner] - mx);
        out[base + l * inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= z;
    }
  auto xn = x.node();
  return detail::make_result(s, std::move(out), {&x}, [xn, outer, len, inner](detail::Node& self) {
    auto& gx = xn->grad_buffer();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Layer norm over the last axis with a multiplicative gain and no additive bias.
/// Uses population variance; eps guards constant rows.
inline Tensor layernorm_nobias(const Tensor& x, const Tensor& gain) {
  if (gain.rank() != 1 || x.rank() < 1 || x.dim(-1) != gain.dim(0)) {
    throw DimensionError("layernorm_nobias: " + shape_str(x.shape()) + " with gain " +
                         shape_str(gain.shape()));
  }
  const std::size_t d = gain.dim(0);
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto& xv = x.vec();
  const auto& gv = gain.vec();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * is;
      out[r * d + j] = xhat[r * d + j] * gv[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gain},
      [xn, gn, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& g = self.grad;
        if (gn->requires_grad) {
          auto& gg = gn->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (xn->requires_grad) {
          auto& gx = xn->grad_buffer();
          const auto& gv = gn->value;
          const double invd = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0;
            double m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[r * d + j] * gv[j];
              m1 += dxh;
              m2 += dxh * xhat[r * d + j];
            }
            m1 *= invd;
            m2 *= invd;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[r * d + j] * gv[j];
              gx[r * d + j] += inv_std[r] * (dxh - m1 - xhat[r * d + j] * m2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Sequence ops. The sequence axis is the second-to-last one.

/// Prepends the rows of `p` to `h` along the sequence axis. `p` is either the
/// same rank as `h` (leading dims must agree) or rank 2, in which case the same
/// rows are prepended to every batch entry and its gradient is summed over the batch.
inline Tensor concat_seq(const Tensor& p, const Tensor& h) {
  if (p.rank() < 2 || h.rank() < 2 || p.dim(-1) != h.dim(-1)) {
    throw DimensionError("concat_seq: trailing dims differ " + shape_str(p.shape()) + " vs " +
                         shape_str(h.shape()));
  }
  const bool broadcast = p.rank() == 2 && h.rank() > 2;
  if (!broadcast) {
    if (p.rank() != h.rank() ||
        !std::equal(p.shape().begin(), p.shape().end() - 2, h.shape().begin())) {
      throw DimensionError("concat_seq: leading dims differ " + shape_str(p.shape()) + " vs " +
                           shape_str(h.shape()));
    }
  }
  const std::size_t d = h.dim(-1);
  const std::size_t lp = p.dim(-2);
  const std::size_t l = h.dim(-2);
  const std::size_t bsz = numel_of(Shape(h.shape().begin(), h.shape().end() - 2));
  Shape out_shape = h.shape();
  out_shape[out_shape.size() - 2] = lp + l;
  std::vector<double> out(bsz * (lp + l) * d);
  const auto& pv = p.vec();
  const auto& hv = h.vec();
  for (std::size_t b = 0; b < bsz; ++b) {
    double* ob = out.data() + b * (lp + l) * d;
    const double* pb = pv.data() + (broadcast ? 0 : b * lp * d);
    std::copy(pb, pb + lp * d, ob);
    std::copy(hv.data() + b * l * d, hv.data() + (b + 1) * l * d, ob + lp * d);
  }
  auto pn = p.node();
  auto hn = h.node();
  return detail::make_result(std::move(out_shape), std::move(out), {&p, &h},
                             [pn, hn, bsz, lp, l, d, broadcast](detail::Node& self) {
                               const auto& g = self.grad;
                               for (std::size_t b = 0; b < bsz; ++b) {
                                 const double* gb = g.data() + b * (lp + l) * d;
                                 if (pn->requires_grad) {
                                   auto& gp = pn->grad_buffer();
                                   double* dst = gp.data() + (broadcast ? 0 : b * lp * d);
                                   for (std::size_t i = 0; i < lp * d; ++i) dst[i] += gb[i];
                                 }
                                 if (hn->requires_grad) {
                                   auto& gh = hn->grad_buffer();
                                   double* dst = gh.data() + b * l * d;
                                   for (std::size_t i = 0; i < l * d; ++i) dst[i] += gb[lp * d + i];
                                 }
                               }
                             });
}

/// Rows [start, start+count) of the sequence axis.
inline Tensor slice_seq(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() < 2 || start + count > x.dim(-2)) {
    throw DimensionError("slice_seq: rows [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") of " + shape_str(x.shape()));
  }
  const std::size_t d = x.dim(-1);
  const std::size_t l = x.dim(-2);
  const std::size_t bsz = numel_of(Shape(x.shape().begin(), x.shape().end() - 2));
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = count;
  std::vector<double> out(bsz * count * d);
  const auto& xv = x.vec();
  for (std::size_t b = 0; b < bsz; ++b)
    std::copy(xv.data() + (b * l + start) * d, xv.data() + (b * l + start + count) * d,
              out.data() + b * count * d);
  auto xn = x.node();
  return detail::make_result(std::move(out_shape), std::move(out), {&x},
                             [xn, bsz, l, d, start, count](detail::Node& self) {
                               auto& gx = xn->grad_buffer();
                               for (std::size_t b = 0; b < bsz; ++b)
                                 for (std::size_t i = 0; i < count * d; ++i)
                                   gx[(b * l + start) * d + i] += self.grad[b * count * d + i];
                             });
}

/// Replaces rows of `tokens` [..., N, d] whose mask entry is non-zero with the
/// vector `fill` [d]. `mask` has one entry per row (numel / d entries).
inline Tensor mask_rows(const Tensor& tokens, const Tensor& fill, std::span<const unsigned char> mask) {
  if (fill.rank() != 1 || tokens.rank() < 1 || tokens.dim(-1) != fill.dim(0)) {
    throw DimensionError("mask_rows: fill " + shape_str(fill.shape()) + " for tokens " +
                         shape_str(tokens.shape()));
  }
  const std::size_t d = fill.dim(0);
  const std::size_t rows = d == 0 ? 0 : tokens.numel() / d;
  if (mask.size() != rows) {
    throw DimensionError("mask_rows: mask has " + std::to_string(mask.size()) + " entries for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<double> out = tokens.vec();
  const auto& fv = fill.vec();
  std::vector<unsigned char> m(mask.begin(), mask.end());
  for (std::size_t r = 0; r < rows; ++r)
    if (m[r]) std::copy(fv.begin(), fv.end(), out.begin() + static_cast<std::ptrdiff_t>(r * d));
  auto tn = tokens.node();
  auto fn = fill.node();
  return detail::make_result(tokens.shape(), std::move(out), {&tokens, &fill},
                             [tn, fn, rows, d, m = std::move(m)](detail::Node& self) {
                               const auto& g = self.grad;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 if (m[r]) {
                                   if (fn->requires_grad) {
                                     auto& gf = fn->grad_buffer();
                                     for (std::size_t j = 0; j < d; ++j) gf[j] += g[r * d + j];
                                   }
                                 } else if (tn->requires_grad) {
                                   auto& gt = tn->grad_buffer();
                                   for (std::size_t j = 0; j < d; ++j) gt[r * d + j] += g[r * d + j];
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention.

/// q [B, Lq, d], k and v [B, Lk, d] -> [B, Lq, d]. Heads split the model dim into
/// contiguous slices of d / heads. Row-wise softmax over the Lk keys.
inline Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  std::size_t heads, std::vector<double>* weights_out = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() ||
      q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw DimensionError("multihead_attention: q " + shape_str(q.shape()) + " k " +
                         shape_str(k.shape()) + " v " + shape_str(v.shape()));
  }
  const std::size_t bsz = q.dim(0);
  const std::size_t lq = q.dim(1);
  const std::size_t lk = k.dim(1);
  const std::size_t d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("multihead_attention: model dim " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> attn(bsz * heads * lq * lk);
  std::vector<double> out(bsz * lq * d, 0.0);
  const auto& qv = q.vec();
  const auto& kv = k.vec();
  const auto& vv = v.vec();
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* a = attn.data() + ((b * heads + h) * lq) * lk;
      for (std::size_t i = 0; i < lq; ++i) {
        const double* qi = qv.data() + (b * lq + i) * d + h * dh;
        double* ai = a + i * lk;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < lk; ++j) {
          const double* kj = kv.data() + (b * lk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          ai[j] = s * sc;
          mx = std::max(mx, ai[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          ai[j] = std::exp(ai[j] - mx);
          z += ai[j];
        }
        double* oi = out.data() + (b * lq + i) * d + h * dh;
        for (std::size_t j = 0; j < lk; ++j) {
          ai[j] /= z;
          const double* vj = vv.data() + (b * lk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += ai[j] * vj[c];
        }
      }
    }
  if (weights_out) *weights_out = attn;
  auto qn = q.node();
  auto kn = k.node();
  auto vn = v.node();
  return detail::make_result(
      q.shape(), std::move(out), {&q, &k, &v},
      [qn, kn, vn, bsz, heads, lq, lk, d, dh, sc, attn = std::move(attn)](detail::Node& self) {
        const auto& g = self.grad;
        const auto& qv = qn->value;
        const auto& kv = kn->value;
        const auto& vv = vn->value;
        double* gq = qn->requires_grad ? qn->grad_buffer().data() : nullptr;
        double* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
        double* gv = vn->requires_grad ? vn->grad_buffer().data() : nullptr;
        std::vector<double> ds(lk);
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const double* a = attn.data() + ((b * heads + h) * lq) * lk;
            for (std::size_t i = 0; i < lq; ++i) {
              const double* gi = g.data() + (b * lq + i) * d + h * dh;
              const double* ai = a + i * lk;
              // dA_ij = gO_i . V_j ; dS = A * (dA - sum_j dA*A)
              double dot = 0.0;
              for (std::size_t j = 0; j < lk; ++j) {
                const double* vj = vv.data() + (b * lk + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                ds[j] = s;
                dot += s * ai[j];
                if (gv) {
                  double* gvj = gv + (b * lk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += ai[j] * gi[c];
                }
              }
              const double* qi = qv.data() + (b * lq + i) * d + h * dh;
              double* gqi = gq ? gq + (b * lq + i) * d + h * dh : nullptr;
              for (std::size_t j = 0; j < lk; ++j) {
                const double dsij = ai[j] * (ds[j] - dot) * sc;
                const double* kj = kv.data() + (b * lk + j) * d + h * dh;
                if (gqi)
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += dsij * kj[c];
                if (gk) {
                  double* gkj = gk + (b * lk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += dsij * qi[c];
                }
              }
            }
          }
      });
}

}  // namespace cpfm
