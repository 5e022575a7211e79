/*
 * Copyright 2026 The lbdt authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef LBDT_AUTODIFF_HPP
#define LBDT_AUTODIFF_HPP

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lbdt/tensor.hpp"

namespace lbdt {

namespace detail {

// C[m x n] += A[m x k] * B[k x n], row-major contiguous. Blocked over k so
// the active B slice stays cache-resident; the inner loop vectorizes.
template <typename T>
void mm_acc(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n) {
  constexpr int64_t kBlock = 64;
  for (int64_t k0 = 0; k0 < k; k0 += kBlock) {
    int64_t k1 = std::min(k0 + kBlock, k);
    for (int64_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      const T* arow = a + i * k;
      for (int64_t p = k0; p < k1; ++p) {
        T av = arow[p];
        const T* brow = b + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* a, int64_t rows, int64_t cols) {
  std::vector<T> out(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) out[static_cast<size_t>(j * rows + i)] = a[i * cols + j];
  return out;
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

inline void require(bool ok, const std::string& op, const std::string& detail) {
  if (!ok) shape_error(op, detail);
}

}  // namespace detail

// Debug default for the per-tape non-finite check on op outputs.
#ifdef NDEBUG
inline constexpr bool kCheckFiniteDefault = false;
#else
inline constexpr bool kCheckFiniteDefault = true;
#endif

template <typename T>
class Tape;

// Handle into a tape. Cheap to copy; the tape owns all storage.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
};

// Reverse-mode tape. Nodes append in execution order; backward() walks them
// once in reverse. Rebuilding a graph with identical inputs replays the same
// node sequence and arithmetic, so results are reproducible bit for bit.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };

  // Element nudge applied when a trainable leaf with this ordinal is created.
  // Drives finite-difference probes through graph replay.
  struct Perturbation {
    int leaf_ordinal = -1;
    int64_t element = 0;
    T delta = T(0);
  };

  bool check_finite = kCheckFiniteDefault;

  Var<T> leaf(Tensor<T> v, bool requires_grad) {
    if (requires_grad) {
      int ordinal = next_leaf_ordinal_++;
      if (perturbation_ && perturbation_->leaf_ordinal == ordinal) {
        if (perturbation_->element < 0 || perturbation_->element >= v.numel())
          detail::shape_error("leaf", "perturbation element out of range");
        v.data[static_cast<size_t>(perturbation_->element)] += perturbation_->delta;
      }
    }
    Var<T> out = emit("leaf", std::move(v), requires_grad);
    if (requires_grad) trainable_leaf_ids_.push_back(out.id);
    return out;
  }

  Var<T> constant(Tensor<T> v) { return emit("constant", std::move(v), false); }

  Var<T> emit(const char* op, Tensor<T> v, bool requires_grad) {
    if (check_finite && !v.all_finite())
      throw std::runtime_error(std::string(op) + ": produced non-finite values");
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, requires_grad, nullptr});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  void set_backward(int id, std::function<void(Tape&)> fn) {
    nodes_[static_cast<size_t>(id)].backward = std::move(fn);
  }

  const Tensor<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor<T>& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }
  const Tensor<T>& grad(const Var<T>& v) { return grad(v.id); }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  // Seeds d(out)/d(out) = 1 and propagates to every trainable node. The
  // output must be a single value.
  void backward(const Var<T>& out) {
    detail::require(out.valid() && out.tape == this, "backward", "output is not on this tape");
    Node& last = nodes_[static_cast<size_t>(out.id)];
    detail::require(last.value.numel() == 1, "backward",
                    "output must be scalar, got " + shape_str(last.value.shape));
    detail::require(last.requires_grad, "backward", "output does not require gradients");
    grad(out.id).data[0] = T(1);
    for (int id = out.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.requires_grad && n.backward && !n.grad.data.empty()) n.backward(*this);
    }
  }

  void set_perturbation(Perturbation p) { perturbation_ = p; }
  size_t size() const { return nodes_.size(); }
  int trainable_leaf_count() const { return next_leaf_ordinal_; }
  const std::vector<int>& trainable_leaf_ids() const { return trainable_leaf_ids_; }

 private:
  std::deque<Node> nodes_;
  std::optional<Perturbation> perturbation_;
  std::vector<int> trainable_leaf_ids_;
  int next_leaf_ordinal_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->val(id);
}

namespace detail {

template <typename T>
Tape<T>& same_tape(const char* op, const Var<T>& a, const Var<T>& b) {
  require(a.valid() && b.valid() && a.tape == b.tape, op, "operands live on different tapes");
  return *a.tape;
}

template <typename T>
bool any_grad(const Var<T>& a) {
  return a.tape->requires_grad(a.id);
}

template <typename T>
bool any_grad(const Var<T>& a, const Var<T>& b) {
  return a.tape->requires_grad(a.id) || b.tape->requires_grad(b.id);
}

// Shared scaffold for elementwise binaries.
template <typename T, typename Fwd, typename Bwd>
Var<T> ew_binary(const char* op, const Var<T>& a, const Var<T>& b, Fwd fwd, Bwd bwd) {
  Tape<T>& t = same_tape(op, a, b);
  const Tensor<T>& av = t.val(a.id);
  const Tensor<T>& bv = t.val(b.id);
  require(av.shape == bv.shape, op, "shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> y(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) y.data[i] = fwd(av.data[i], bv.data[i]);
  Var<T> out = t.emit(op, std::move(y), any_grad(a, b));
  if (t.requires_grad(out.id)) {
    int ai = a.id, bi = b.id, oi = out.id;
    t.set_backward(oi, [ai, bi, oi, bwd](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      const Tensor<T>& avv = tp.val(ai);
      const Tensor<T>& bvv = tp.val(bi);
      Tensor<T>* ga = tp.requires_grad(ai) ? &tp.grad(ai) : nullptr;
      Tensor<T>* gb = tp.requires_grad(bi) ? &tp.grad(bi) : nullptr;
      for (int64_t i = 0; i < g.numel(); ++i) {
        T da, db;
        bwd(avv.data[i], bvv.data[i], g.data[i], da, db);
        if (ga) ga->data[i] += da;
        if (gb) gb->data[i] += db;
      }
    });
  }
  return out;
}

// Shared scaffold for elementwise unaries whose backward needs input and output.
template <typename T, typename Fwd, typename Bwd>
Var<T> ew_unary(const char* op, const Var<T>& a, Fwd fwd, Bwd bwd) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.val(a.id);
  Tensor<T> y(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) y.data[i] = fwd(av.data[i]);
  Var<T> out = t.emit(op, std::move(y), any_grad(a));
  if (t.requires_grad(out.id)) {
    int ai = a.id, oi = out.id;
    t.set_backward(oi, [ai, oi, bwd](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      const Tensor<T>& avv = tp.val(ai);
      const Tensor<T>& yv = tp.val(oi);
      Tensor<T>& ga = tp.grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bwd(avv.data[i], yv.data[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::ew_binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = g;
      });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::ew_binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = -g;
      });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::ew_binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g * y;
        db = g * x;
      });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::ew_binary<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return detail::ew_unary<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return detail::ew_unary<T>(
      "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::ew_unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> abs_val(const Var<T>& a) {
  return detail::ew_unary<T>(
      "abs_val", a, [](T x) { return x < T(0) ? -x : x; },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::ew_unary<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh_val(const Var<T>& a) {
  return detail::ew_unary<T>(
      "tanh_val", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> log_val(const Var<T>& a) {
  const Tensor<T>& av = a.tape->val(a.id);
  for (T v : av.data)
    if (!(v > T(0))) detail::shape_error("log_val", "input must be strictly positive");
  return detail::ew_unary<T>(
      "log_val", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

// Elementwise clamp to [lo, hi]; gradient passes only strictly inside.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  detail::require(lo < hi, "clamp", "lo must be below hi");
  return detail::ew_unary<T>(
      "clamp", a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = detail::same_tape("matmul", a, b);
  const Tensor<T>& av = t.val(a.id);
  const Tensor<T>& bv = t.val(b.id);
  detail::require(av.rank() == 2 && bv.rank() == 2 && av.shape[1] == bv.shape[0], "matmul",
                  "incompatible shapes " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor<T> y({m, n});
  detail::mm_acc(y.ptr(), av.ptr(), bv.ptr(), m, k, n);
  Var<T> out = t.emit("matmul", std::move(y), detail::any_grad(a, b));
  if (t.requires_grad(out.id)) {
    int ai = a.id, bi = b.id, oi = out.id;
    t.set_backward(oi, [ai, bi, oi, m, k, n](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      if (tp.requires_grad(ai)) {
        auto bT = detail::transposed(tp.val(bi).ptr(), k, n);
        detail::mm_acc(tp.grad(ai).ptr(), g.ptr(), bT.data(), m, n, k);
      }
      if (tp.requires_grad(bi)) {
        auto aT = detail::transposed(tp.val(ai).ptr(), m, k);
        detail::mm_acc(tp.grad(bi).ptr(), aT.data(), g.ptr(), k, m, n);
      }
    });
  }
  return out;
}

// y = x * W^T + bias. x is (in) or (n x in), W is (out x in), bias is (out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Tape<T>& t = detail::same_tape("linear", x, w);
  detail::same_tape("linear", w, b);
  const Tensor<T>& xv = t.val(x.id);
  const Tensor<T>& wv = t.val(w.id);
  const Tensor<T>& bv = t.val(b.id);
  detail::require(wv.rank() == 2, "linear", "weight must be rank 2, got " + shape_str(wv.shape));
  int64_t out_dim = wv.shape[0], in_dim = wv.shape[1];
  detail::require(bv.shape == Shape{out_dim}, "linear",
                  "bias shape " + shape_str(bv.shape) + " does not match weight " + shape_str(wv.shape));
  bool vec = xv.rank() == 1;
  detail::require((vec && xv.shape[0] == in_dim) || (xv.rank() == 2 && xv.shape[1] == in_dim), "linear",
                  "input shape " + shape_str(xv.shape) + " does not match weight " + shape_str(wv.shape));
  int64_t rows = vec ? 1 : xv.shape[0];
  Tensor<T> y(vec ? Shape{out_dim} : Shape{rows, out_dim});
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t o = 0; o < out_dim; ++o) y.data[static_cast<size_t>(i * out_dim + o)] = bv.data[static_cast<size_t>(o)];
  auto wT = detail::transposed(wv.ptr(), out_dim, in_dim);
  detail::mm_acc(y.ptr(), xv.ptr(), wT.data(), rows, in_dim, out_dim);
  Var<T> out = t.emit("linear", std::move(y), detail::any_grad(x, w) || detail::any_grad(b));
  if (t.requires_grad(out.id)) {
    int xi = x.id, wi = w.id, bi = b.id, oi = out.id;
    t.set_backward(oi, [xi, wi, bi, oi, rows, in_dim, out_dim](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      if (tp.requires_grad(xi))
        detail::mm_acc(tp.grad(xi).ptr(), g.ptr(), tp.val(wi).ptr(), rows, out_dim, in_dim);
      if (tp.requires_grad(wi)) {
        auto gT = detail::transposed(g.ptr(), rows, out_dim);
        detail::mm_acc(tp.grad(wi).ptr(), gT.data(), tp.val(xi).ptr(), out_dim, rows, in_dim);
      }
      if (tp.requires_grad(bi)) {
        Tensor<T>& gb = tp.grad(bi);
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t o = 0; o < out_dim; ++o) gb.data[static_cast<size_t>(o)] += g.data[static_cast<size_t>(i * out_dim + o)];
      }
    });
  }
  return out;
}

namespace detail {

// Patch matrix layout: row = cin * 9 + ky * 3 + kx, column = output pixel.
template <typename T>
Tensor<T> im2col3x3(const Tensor<T>& x, int64_t stride, int64_t ho, int64_t wo) {
  int64_t cin = x.shape[0], h = x.shape[1], w = x.shape[2];
  Tensor<T> col({cin * 9, ho * wo});
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ky = 0; ky < 3; ++ky)
      for (int64_t kx = 0; kx < 3; ++kx) {
        T* dst = col.ptr() + (c * 9 + ky * 3 + kx) * ho * wo;
        const T* src = x.ptr() + c * h * w;
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) {
            for (int64_t ox = 0; ox < wo; ++ox) dst[oy * wo + ox] = T(0);
            continue;
          }
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride + kx - 1;
            dst[oy * wo + ox] = (ix < 0 || ix >= w) ? T(0) : src[iy * w + ix];
          }
        }
      }
  return col;
}

template <typename T>
void col2im3x3_acc(const Tensor<T>& col, int64_t stride, int64_t ho, int64_t wo, Tensor<T>& dx) {
  int64_t cin = dx.shape[0], h = dx.shape[1], w = dx.shape[2];
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ky = 0; ky < 3; ++ky)
      for (int64_t kx = 0; kx < 3; ++kx) {
        const T* src = col.ptr() + (c * 9 + ky * 3 + kx) * ho * wo;
        T* dst = dx.ptr() + c * h * w;
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < w) dst[iy * w + ix] += src[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

// 3x3 convolution, padding 1, stride 1 or 2. x: (cin x h x w),
// w: (cout x cin x 3 x 3), b: (cout). Output (cout x ho x wo) with
// ho = (h - 1) / stride + 1.
template <typename T>
Var<T> conv3x3(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride) {
  Tape<T>& t = detail::same_tape("conv3x3", x, w);
  detail::same_tape("conv3x3", w, b);
  const Tensor<T>& xv = t.val(x.id);
  const Tensor<T>& wv = t.val(w.id);
  const Tensor<T>& bv = t.val(b.id);
  detail::require(stride == 1 || stride == 2, "conv3x3", "stride must be 1 or 2");
  detail::require(xv.rank() == 3, "conv3x3", "input must be rank 3, got " + shape_str(xv.shape));
  detail::require(wv.rank() == 4 && wv.shape[2] == 3 && wv.shape[3] == 3, "conv3x3",
                  "kernel must be (cout x cin x 3 x 3), got " + shape_str(wv.shape));
  detail::require(wv.shape[1] == xv.shape[0], "conv3x3",
                  "kernel shape " + shape_str(wv.shape) + " does not match input " + shape_str(xv.shape));
  int64_t cout = wv.shape[0], cin = xv.shape[0], h = xv.shape[1], wd = xv.shape[2];
  detail::require(bv.shape == Shape{cout}, "conv3x3",
                  "bias shape " + shape_str(bv.shape) + " does not match kernel " + shape_str(wv.shape));
  int64_t ho = (h - 1) / stride + 1, wo = (wd - 1) / stride + 1;
  Var<T> col = t.constant(detail::im2col3x3(xv, stride, ho, wo));
  Tensor<T> y({cout, ho, wo});
  for (int64_t o = 0; o < cout; ++o) {
    T bias = bv.data[static_cast<size_t>(o)];
    T* row = y.ptr() + o * ho * wo;
    for (int64_t j = 0; j < ho * wo; ++j) row[j] = bias;
  }
  detail::mm_acc(y.ptr(), wv.ptr(), t.val(col.id).ptr(), cout, cin * 9, ho * wo);
  Var<T> out = t.emit("conv3x3", std::move(y), detail::any_grad(x, w) || detail::any_grad(b));
  if (t.requires_grad(out.id)) {
    int xi = x.id, wi = w.id, bi = b.id, ci = col.id, oi = out.id;
    t.set_backward(oi, [xi, wi, bi, ci, oi, stride, cout, cin, ho, wo](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      int64_t pixels = ho * wo, k9 = cin * 9;
      if (tp.requires_grad(bi)) {
        Tensor<T>& gb = tp.grad(bi);
        for (int64_t o = 0; o < cout; ++o) {
          T s = T(0);
          const T* row = g.ptr() + o * pixels;
          for (int64_t j = 0; j < pixels; ++j) s += row[j];
          gb.data[static_cast<size_t>(o)] += s;
        }
      }
      if (tp.requires_grad(wi)) {
        auto colT = detail::transposed(tp.val(ci).ptr(), k9, pixels);
        detail::mm_acc(tp.grad(wi).ptr(), g.ptr(), colT.data(), cout, pixels, k9);
      }
      if (tp.requires_grad(xi)) {
        auto wT = detail::transposed(tp.val(wi).ptr(), cout, k9);
        Tensor<T> dcol({k9, pixels});
        detail::mm_acc(dcol.ptr(), wT.data(), g.ptr(), k9, cout, pixels);
        detail::col2im3x3_acc(dcol, stride, ho, wo, tp.grad(xi));
      }
    });
  }
  return out;
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape new_shape) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.val(a.id);
  detail::require(shape_numel(new_shape) == av.numel(), "reshape",
                  "cannot view " + shape_str(av.shape) + " as " + shape_str(new_shape));
  Tensor<T> y(new_shape, av.data);
  Var<T> out = t.emit("reshape", std::move(y), detail::any_grad(a));
  if (t.requires_grad(out.id)) {
    int ai = a.id, oi = out.id;
    t.set_backward(oi, [ai, oi](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      Tensor<T>& ga = tp.grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    });
  }
  return out;
}

// Swaps the last two axes; leading axes batch.
template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.val(a.id);
  detail::require(av.rank() >= 2, "transpose_last2", "needs rank >= 2, got " + shape_str(av.shape));
  Shape ys = av.shape;
  std::swap(ys[ys.size() - 1], ys[ys.size() - 2]);
  int64_t rows = av.shape[av.rank() - 2], cols = av.shape[av.rank() - 1];
  int64_t batch = av.numel() / (rows * cols);
  Tensor<T> y(ys);
  for (int64_t bch = 0; bch < batch; ++bch) {
    const T* src = av.ptr() + bch * rows * cols;
    T* dst = y.ptr() + bch * rows * cols;
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
  Var<T> out = t.emit("transpose_last2", std::move(y), detail::any_grad(a));
  if (t.requires_grad(out.id)) {
    int ai = a.id, oi = out.id;
    t.set_backward(oi, [ai, oi, batch, rows, cols](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      Tensor<T>& ga = tp.grad(ai);
      for (int64_t bch = 0; bch < batch; ++bch) {
        const T* src = g.ptr() + bch * rows * cols;
        T* dst = ga.ptr() + bch * rows * cols;
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < cols; ++j) dst[i * cols + j] += src[j * rows + i];
      }
    });
  }
  return out;
}

// Concatenation along the first axis (the channel axis for feature maps).
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat", "needs at least one input");
  Tape<T>& t = *parts[0].tape;
  const Shape& first = t.val(parts[0].id).shape;
  Shape ys = first;
  bool req = false;
  int64_t total = 0;
  for (const auto& p : parts) {
    detail::same_tape("concat", parts[0], p);
    const Shape& s = t.val(p.id).shape;
    detail::require(s.size() == first.size(), "concat",
                    "rank mismatch " + shape_str(first) + " vs " + shape_str(s));
    for (size_t d = 1; d < s.size(); ++d)
      detail::require(s[d] == first[d], "concat",
                      "trailing dims differ: " + shape_str(first) + " vs " + shape_str(s));
    total += s[0];
    req = req || detail::any_grad(p);
  }
  ys[0] = total;
  Tensor<T> y(ys);
  int64_t offset = 0;
  for (const auto& p : parts) {
    const Tensor<T>& pv = t.val(p.id);
    std::copy(pv.data.begin(), pv.data.end(), y.data.begin() + offset);
    offset += pv.numel();
  }
  Var<T> out = t.emit("concat", std::move(y), req);
  if (t.requires_grad(out.id)) {
    std::vector<int> ids;
    for (const auto& p : parts) ids.push_back(p.id);
    int oi = out.id;
    t.set_backward(oi, [ids, oi](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      int64_t off = 0;
      for (int id : ids) {
        int64_t n = tp.val(id).numel();
        if (tp.requires_grad(id)) {
          Tensor<T>& gp = tp.grad(id);
          for (int64_t i = 0; i < n; ++i) gp.data[i] += g.data[off + i];
        }
        off += n;
      }
    });
  }
  return out;
}

template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b) {
  return concat(std::vector<Var<T>>{a, b});
}

// (c x h x w) -> (c), mean over all spatial positions per channel.
template <typename T>
Var<T> global_avg_pool(const Var<T>& a) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.val(a.id);
  detail::require(av.rank() == 3, "global_avg_pool", "input must be rank 3, got " + shape_str(av.shape));
  int64_t c = av.shape[0], hw = av.shape[1] * av.shape[2];
  Tensor<T> y({c});
  for (int64_t ch = 0; ch < c; ++ch) {
    T s = T(0);
    const T* row = av.ptr() + ch * hw;
    for (int64_t i = 0; i < hw; ++i) s += row[i];
    y.data[static_cast<size_t>(ch)] = s / static_cast<T>(hw);
  }
  Var<T> out = t.emit("global_avg_pool", std::move(y), detail::any_grad(a));
  if (t.requires_grad(out.id)) {
    int ai = a.id, oi = out.id;
    t.set_backward(oi, [ai, oi, c, hw](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      Tensor<T>& ga = tp.grad(ai);
      for (int64_t ch = 0; ch < c; ++ch) {
        T gv = g.data[static_cast<size_t>(ch)] / static_cast<T>(hw);
        T* row = ga.ptr() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) row[i] += gv;
      }
    });
  }
  return out;
}

// Bilinear resize with half-pixel centers, edges clamped. Covers the x2
// decoder steps and resizing to an arbitrary target.
template <typename T>
Var<T> upsample_bilinear(const Var<T>& a, int64_t ho, int64_t wo) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.val(a.id);
  detail::require(av.rank() == 3, "upsample_bilinear", "input must be rank 3, got " + shape_str(av.shape));
  detail::require(ho >= 1 && wo >= 1, "upsample_bilinear", "target size must be positive");
  int64_t c = av.shape[0], h = av.shape[1], w = av.shape[2];
  struct Mix {
    int64_t lo, hi;
    T frac;
  };
  auto axis_mix = [](int64_t in, int64_t out, int64_t o) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > static_cast<double>(in - 1)) src = static_cast<double>(in - 1);
    int64_t lo = static_cast<int64_t>(src);
    int64_t hi = std::min(lo + 1, in - 1);
    return Mix{lo, hi, static_cast<T>(src - static_cast<double>(lo))};
  };
  std::vector<Mix> ymix(static_cast<size_t>(ho)), xmix(static_cast<size_t>(wo));
  for (int64_t i = 0; i < ho; ++i) ymix[static_cast<size_t>(i)] = axis_mix(h, ho, i);
  for (int64_t i = 0; i < wo; ++i) xmix[static_cast<size_t>(i)] = axis_mix(w, wo, i);
  Tensor<T> y({c, ho, wo});
  for (int64_t ch = 0; ch < c; ++ch) {
    const T* src = av.ptr() + ch * h * w;
    T* dst = y.ptr() + ch * ho * wo;
    for (int64_t oy = 0; oy < ho; ++oy) {
      const Mix& my = ymix[static_cast<size_t>(oy)];
      for (int64_t ox = 0; ox < wo; ++ox) {
        const Mix& mx = xmix[static_cast<size_t>(ox)];
        T top = src[my.lo * w + mx.lo] * (T(1) - mx.frac) + src[my.lo * w + mx.hi] * mx.frac;
        T bot = src[my.hi * w + mx.lo] * (T(1) - mx.frac) + src[my.hi * w + mx.hi] * mx.frac;
        dst[oy * wo + ox] = top * (T(1) - my.frac) + bot * my.frac;
      }
    }
  }
  Var<T> out = t.emit("upsample_bilinear", std::move(y), detail::any_grad(a));
  if (t.requires_grad(out.id)) {
    int ai = a.id, oi = out.id;
    t.set_backward(oi, [ai, oi, c, h, w, ho, wo, ymix, xmix](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      Tensor<T>& ga = tp.grad(ai);
      for (int64_t ch = 0; ch < c; ++ch) {
        T* dst = ga.ptr() + ch * h * w;
        const T* src = g.ptr() + ch * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const auto& my = ymix[static_cast<size_t>(oy)];
          for (int64_t ox = 0; ox < wo; ++ox) {
            const auto& mx = xmix[static_cast<size_t>(ox)];
            T gv = src[oy * wo + ox];
            dst[my.lo * w + mx.lo] += gv * (T(1) - my.frac) * (T(1) - mx.frac);
            dst[my.lo * w + mx.hi] += gv * (T(1) - my.frac) * mx.frac;
            dst[my.hi * w + mx.lo] += gv * my.frac * (T(1) - mx.frac);
            dst[my.hi * w + mx.hi] += gv * my.frac * mx.frac;
          }
        }
      }
    });
  }
  return out;
}

// Row-wise softmax over the last axis of a matrix, with a shared column
// validity mask. Masked columns are exactly zero; every row sums to one over
// the valid columns. Rejects an all-masked mask.
template <typename T>
Var<T> masked_softmax(const Var<T>& a, const std::vector<uint8_t>& mask) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.val(a.id);
  detail::require(av.rank() == 2, "masked_softmax", "input must be rank 2, got " + shape_str(av.shape));
  int64_t rows = av.shape[0], cols = av.shape[1];
  detail::require(static_cast<int64_t>(mask.size()) == cols, "masked_softmax",
                  "mask length " + std::to_string(mask.size()) + " does not match columns " +
                      std::to_string(cols));
  bool any_valid = false;
  for (uint8_t m : mask) any_valid = any_valid || (m != 0);
  detail::require(any_valid, "masked_softmax", "mask excludes every column");
  Tensor<T> y({rows, cols});
  for (int64_t i = 0; i < rows; ++i) {
    const T* row = av.ptr() + i * cols;
    T* dst = y.ptr() + i * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < cols; ++j)
      if (mask[static_cast<size_t>(j)] && row[j] > mx) mx = row[j];
    T denom = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      if (mask[static_cast<size_t>(j)]) {
        dst[j] = std::exp(row[j] - mx);
        denom += dst[j];
      } else {
        dst[j] = T(0);
      }
    }
    for (int64_t j = 0; j < cols; ++j)
      if (mask[static_cast<size_t>(j)]) dst[j] /= denom;
  }
  Var<T> out = t.emit("masked_softmax", std::move(y), detail::any_grad(a));
  if (t.requires_grad(out.id)) {
    int ai = a.id, oi = out.id;
    t.set_backward(oi, [ai, oi, rows, cols, mask](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      const Tensor<T>& yv = tp.val(oi);
      Tensor<T>& ga = tp.grad(ai);
      for (int64_t i = 0; i < rows; ++i) {
        const T* grow = g.ptr() + i * cols;
        const T* yrow = yv.ptr() + i * cols;
        T dot = T(0);
        for (int64_t j = 0; j < cols; ++j)
          if (mask[static_cast<size_t>(j)]) dot += grow[j] * yrow[j];
        T* dst = ga.ptr() + i * cols;
        for (int64_t j = 0; j < cols; ++j)
          if (mask[static_cast<size_t>(j)]) dst[j] += yrow[j] * (grow[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  const Tensor<T>& av = a.tape->val(a.id);
  detail::require(av.rank() == 2, "softmax_rows", "input must be rank 2, got " + shape_str(av.shape));
  return masked_softmax(a, std::vector<uint8_t>(static_cast<size_t>(av.shape[1]), uint8_t(1)));
}

// Sums out one axis; the result drops that axis (scalar results keep shape (1)).
template <typename T>
Var<T> sum_axis(const Var<T>& a, int axis) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.val(a.id);
  detail::require(axis >= 0 && axis < av.rank(), "sum_axis",
                  "axis " + std::to_string(axis) + " out of range for " + shape_str(av.shape));
  int64_t outer = 1, inner = 1, n = av.shape[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= av.shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < av.rank(); ++i) inner *= av.shape[static_cast<size_t>(i)];
  Shape ys;
  for (int i = 0; i < av.rank(); ++i)
    if (i != axis) ys.push_back(av.shape[static_cast<size_t>(i)]);
  if (ys.empty()) ys.push_back(1);
  Tensor<T> y(ys);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k) {
      const T* src = av.ptr() + (o * n + k) * inner;
      T* dst = y.ptr() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  Var<T> out = t.emit("sum_axis", std::move(y), detail::any_grad(a));
  if (t.requires_grad(out.id)) {
    int ai = a.id, oi = out.id;
    t.set_backward(oi, [ai, oi, outer, inner, n](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      Tensor<T>& ga = tp.grad(ai);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < n; ++k) {
          T* dst = ga.ptr() + (o * n + k) * inner;
          const T* src = g.ptr() + o * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.val(a.id);
  T s = T(0);
  for (T v : av.data) s += v;
  Var<T> out = t.emit("sum_all", Tensor<T>::scalar(s), detail::any_grad(a));
  if (t.requires_grad(out.id)) {
    int ai = a.id, oi = out.id;
    t.set_backward(oi, [ai, oi](Tape<T>& tp) {
      T gv = tp.grad(oi).data[0];
      Tensor<T>& ga = tp.grad(ai);
      for (auto& v : ga.data) v += gv;
    });
  }
  return out;
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  int64_t n = a.tape->val(a.id).numel();
  return scale(sum_all(a), T(1) / static_cast<T>(n));
}

// Per-channel scaling of a feature map: y[c,h,w] = x[c,h,w] * s[c].
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& s) {
  Tape<T>& t = detail::same_tape("channel_scale", x, s);
  const Tensor<T>& xv = t.val(x.id);
  const Tensor<T>& sv = t.val(s.id);
  detail::require(xv.rank() == 3, "channel_scale", "feature map must be rank 3, got " + shape_str(xv.shape));
  detail::require(sv.shape == Shape{xv.shape[0]}, "channel_scale",
                  "scale shape " + shape_str(sv.shape) + " does not match map " + shape_str(xv.shape));
  int64_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
  Tensor<T> y(xv.shape);
  for (int64_t ch = 0; ch < c; ++ch) {
    T f = sv.data[static_cast<size_t>(ch)];
    const T* src = xv.ptr() + ch * hw;
    T* dst = y.ptr() + ch * hw;
    for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] * f;
  }
  Var<T> out = t.emit("channel_scale", std::move(y), detail::any_grad(x, s));
  if (t.requires_grad(out.id)) {
    int xi = x.id, si = s.id, oi = out.id;
    t.set_backward(oi, [xi, si, oi, c, hw](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(oi);
      const Tensor<T>& xvv = tp.val(xi);
      const Tensor<T>& svv = tp.val(si);
      if (tp.requires_grad(xi)) {
        Tensor<T>& gx = tp.grad(xi);
        for (int64_t ch = 0; ch < c; ++ch) {
          T f = svv.data[static_cast<size_t>(ch)];
          const T* src = g.ptr() + ch * hw;
          T* dst = gx.ptr() + ch * hw;
          for (int64_t i = 0; i < hw; ++i) dst[i] += src[i] * f;
        }
      }
      if (tp.requires_grad(si)) {
        Tensor<T>& gs = tp.grad(si);
        for (int64_t ch = 0; ch < c; ++ch) {
          T acc = T(0);
          const T* gr = g.ptr() + ch * hw;
          const T* xr = xvv.ptr() + ch * hw;
          for (int64_t i = 0; i < hw; ++i) acc += gr[i] * xr[i];
          gs.data[static_cast<size_t>(ch)] += acc;
        }
      }
    });
  }
  return out;
}

}  // namespace lbdt

#endif  // LBDT_AUTODIFF_HPP
