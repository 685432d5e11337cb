#pragma once

#include <cassert>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "funmatch/common.hpp"
#include "funmatch/linalg.hpp"

namespace funmatch {

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;     // allocated lazily, same length as value
  bool requires_grad = false;  // leaf parameter flag
  bool tracked = false;        // produced under an active tape
  // Reductions keep their double-precision accumulator here so scalar
  // readouts (losses, finite-difference oracles) do not lose it to the
  // float32 cast.
  double scalar_hint = 0.0;
  bool has_scalar_hint = false;

  float* ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.f);
    return grad.data();
  }
};

}  // namespace detail

class Tape;
namespace detail {
inline thread_local Tape* g_active_tape = nullptr;
}

/// Dense float32 tensor, row-major. Copying a Tensor copies a handle to the
/// same storage; completed tensors are treated as immutable values.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  explicit Tensor(Shape shape, float fill = 0.f) : Tensor() {
    node_->shape = std::move(shape);
    node_->value.assign(size_t(numel(node_->shape)), fill);
  }

  Tensor(Shape shape, std::vector<float> values) : Tensor() {
    if (int64_t(values.size()) != numel(shape))
      throw_error(ErrorKind::dimension, "tensor data length " + std::to_string(values.size()) +
                                            " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return int64_t(node_->value.size()); }
  int dim(int i) const { return node_->shape[size_t(i)]; }
  int rank() const { return int(node_->shape.size()); }

  float* data() { return node_->value.data(); }
  const float* data() const { return node_->value.data(); }

  float item() const {
    if (size() != 1) throw_error(ErrorKind::contract, "item() on tensor of size " + std::to_string(size()));
    return node_->value[0];
  }

  /// Scalar readout at the precision of the producing reduction.
  double item_double() const {
    if (size() != 1) throw_error(ErrorKind::contract, "item_double() on tensor of size " + std::to_string(size()));
    return node_->has_scalar_hint ? node_->scalar_hint : double(node_->value[0]);
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }
  bool tracked() const { return node_->tracked || node_->requires_grad; }

  /// Gradient buffer; allocates zeros on first access.
  std::span<const float> grad() const { return {node_->ensure_grad(), node_->value.size()}; }
  float* grad_data() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.f);
  }

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Record of executed primitives for one reverse sweep. The record owns the
/// backward closures; each closure holds the tensors it needs alive and is
/// released as soon as the sweep has consumed it. Single-owner: a record
/// must not be mutated from two contexts at once.
class Tape {
 public:
  Tape() : prev_(detail::g_active_tape) { detail::g_active_tape = this; }
  ~Tape() {
    assert(detail::g_active_tape == this);
    detail::g_active_tape = prev_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::g_active_tape; }

  void record(std::function<void()> backward) { steps_.push_back(std::move(backward)); }

  size_t op_count() const { return steps_.size(); }

  /// Reverse sweep from a scalar loss. Gradients accumulate into the grad
  /// buffers of every tensor reached; call zero_grad between steps to reset.
  void backward(const Tensor& loss) {
    if (loss.size() != 1)
      throw_error(ErrorKind::contract,
                  "backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (consumed_) throw_error(ErrorKind::contract, "backward called twice on one record");
    consumed_ = true;
    loss.node()->ensure_grad()[0] += 1.f;
    for (size_t i = steps_.size(); i-- > 0;) {
      steps_[i]();
      steps_[i] = nullptr;  // free saved intermediates eagerly
    }
    steps_.clear();
  }

 private:
  std::vector<std::function<void()>> steps_;
  Tape* prev_ = nullptr;
  bool consumed_ = false;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->tracked()) return true;
  return false;
}

inline void mark_output(Tensor& out) { out.node()->tracked = true; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Each op computes its value eagerly and, when a tape is active
// and an input is tracked, records a closure that routes output gradients to
// input gradients.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw_error(ErrorKind::dimension,
                "matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw_error(ErrorKind::dimension,
                "matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  gemm_nn(m, n, k, a.data(), b.data(), out.data());

  if (detail::recording({&a, &b})) {
    detail::mark_output(out);
    auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    Tape::active()->record([an, bn, on, m, k, n] {
      if (on->grad.empty()) return;
      const float* g = on->grad.data();
      if (an->tracked || an->requires_grad)
        gemm_nt(m, k, n, g, bn->value.data(), an->ensure_grad(), /*accumulate=*/true);
      if (bn->tracked || bn->requires_grad)
        gemm_tn(k, n, m, an->value.data(), g, bn->ensure_grad(), /*accumulate=*/true);
    });
  }
  return out;
}

/// Elementwise a + b; b may also be a rank-1 tensor broadcast over the last
/// dimension of a (bias add).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = (b.rank() == 1 && a.rank() > 1 && a.shape().back() == b.dim(0));
  if (!bias && a.shape() != b.shape())
    throw_error(ErrorKind::dimension,
                "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const int64_t n = a.size();
  const float* ap = a.data();
  const float* bp = b.data();
  float* op = out.data();
  if (bias) {
    const int c = b.dim(0);
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i % c];
  } else {
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  }

  if (detail::recording({&a, &b})) {
    detail::mark_output(out);
    auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    Tape::active()->record([an, bn, on, n, bias] {
      if (on->grad.empty()) return;
      const float* g = on->grad.data();
      if (an->tracked || an->requires_grad) {
        float* ga = an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn->tracked || bn->requires_grad) {
        float* gb = bn->ensure_grad();
        if (bias) {
          const int c = int(bn->value.size());
          for (int64_t i = 0; i < n; ++i) gb[i % c] += g[i];
        } else {
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        }
      }
    });
  }
  return out;
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw_error(ErrorKind::dimension,
                "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];

  if (detail::recording({&a, &b})) {
    detail::mark_output(out);
    auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    Tape::active()->record([an, bn, on, n] {
      if (on->grad.empty()) return;
      const float* g = on->grad.data();
      if (an->tracked || an->requires_grad) {
        float* ga = an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bn->value[i];
      }
      if (bn->tracked || bn->requires_grad) {
        float* gb = bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * an->value[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, float c) {
  Tensor out(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (a.node()->has_scalar_hint && n == 1) {
    out.node()->scalar_hint = a.node()->scalar_hint * double(c);
    out.node()->has_scalar_hint = true;
  }
  if (detail::recording({&a})) {
    detail::mark_output(out);
    auto an = a.node_ptr();
    auto on = out.node_ptr();
    Tape::active()->record([an, on, n, c] {
      if (on->grad.empty()) return;
      float* ga = an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ga[i] += on->grad[i] * c;
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, float c) {
  Tensor out(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
  if (a.node()->has_scalar_hint && n == 1) {
    out.node()->scalar_hint = a.node()->scalar_hint + double(c);
    out.node()->has_scalar_hint = true;
  }
  if (detail::recording({&a})) {
    detail::mark_output(out);
    auto an = a.node_ptr();
    auto on = out.node_ptr();
    Tape::active()->record([an, on, n] {
      if (on->grad.empty()) return;
      float* ga = an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ga[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.f ? a.data()[i] : 0.f;
  if (detail::recording({&a})) {
    detail::mark_output(out);
    auto an = a.node_ptr();
    auto on = out.node_ptr();
    Tape::active()->record([an, on, n] {
      if (on->grad.empty()) return;
      float* ga = an->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        if (an->value[i] > 0.f) ga[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (numel(new_shape) != a.size())
    throw_error(ErrorKind::dimension,
                "reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) + " changes element count");
  Tensor out(std::move(new_shape), std::vector<float>(a.data(), a.data() + a.size()));
  if (detail::recording({&a})) {
    detail::mark_output(out);
    auto an = a.node_ptr();
    auto on = out.node_ptr();
    const int64_t n = a.size();
    Tape::active()->record([an, on, n] {
      if (on->grad.empty()) return;
      float* ga = an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ga[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) s += a.data()[i];
  Tensor out = Tensor::scalar(float(s));
  out.node()->scalar_hint = s;
  out.node()->has_scalar_hint = true;
  if (detail::recording({&a})) {
    detail::mark_output(out);
    auto an = a.node_ptr();
    auto on = out.node_ptr();
    Tape::active()->record([an, on, n] {
      if (on->grad.empty()) return;
      const float g = on->grad[0];
      float* ga = an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

/// Numerically stable log-softmax over the last dimension.
inline Tensor log_softmax(const Tensor& a) {
  if (a.rank() < 1 || a.shape().back() < 2)
    throw_error(ErrorKind::dimension, "log_softmax needs a trailing class dimension >= 2, got " +
                                          shape_str(a.shape()));
  const int c = a.shape().back();
  const int64_t rows = a.size() / c;
  Tensor out(a.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = a.data() + r * c;
    float* y = out.data() + r * c;
    float mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(double(x[j]) - mx);
    const float lse = float(std::log(sum));
    for (int j = 0; j < c; ++j) y[j] = x[j] - mx - lse;
  }

  if (detail::recording({&a})) {
    detail::mark_output(out);
    auto an = a.node_ptr();
    auto on = out.node_ptr();
    Tape::active()->record([an, on, rows, c] {
      if (on->grad.empty()) return;
      float* ga = an->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const float* g = on->grad.data() + r * c;
        const float* y = on->value.data() + r * c;
        double gs = 0.0;
        for (int j = 0; j < c; ++j) gs += g[j];
        for (int j = 0; j < c; ++j) ga[r * c + j] += g[j] - std::exp(double(y[j])) * float(gs);
      }
    });
  }
  return out;
}

/// Mean over the spatial dimensions of an NHWC tensor -> [N, C].
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4)
    throw_error(ErrorKind::dimension, "global_avg_pool expects [N,H,W,C], got " + shape_str(x.shape()));
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int hw = h * w;
  Tensor out({n, c});
  for (int i = 0; i < n; ++i) {
    std::vector<double> acc(size_t(c), 0.0);
    const float* base = x.data() + size_t(i) * hw * c;
    for (int p = 0; p < hw; ++p)
      for (int j = 0; j < c; ++j) acc[j] += base[size_t(p) * c + j];
    for (int j = 0; j < c; ++j) out.data()[size_t(i) * c + j] = float(acc[j] / hw);
  }
  if (detail::recording({&x})) {
    detail::mark_output(out);
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    Tape::active()->record([xn, on, n, hw, c] {
      if (on->grad.empty()) return;
      float* gx = xn->ensure_grad();
      const float inv = 1.f / float(hw);
      for (int i = 0; i < n; ++i) {
        const float* g = on->grad.data() + size_t(i) * c;
        float* base = gx + size_t(i) * hw * c;
        for (int p = 0; p < hw; ++p)
          for (int j = 0; j < c; ++j) base[size_t(p) * c + j] += g[j] * inv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), NHWC, kernels [kh,kw,Cin,Cout].
// ---------------------------------------------------------------------------

enum class Padding { same, valid };

namespace detail {

struct ConvGeom {
  int n, h, w, ci, kh, kw, co, stride;
  int out_h, out_w;
  int pad_top, pad_left;
};

inline ConvGeom conv_geometry(const Tensor& x, const Tensor& kernel, Padding padding, int stride) {
  if (x.rank() != 4)
    throw_error(ErrorKind::dimension, "conv2d input must be [N,H,W,Cin], got " + shape_str(x.shape()));
  if (kernel.rank() != 4)
    throw_error(ErrorKind::dimension,
                "conv2d kernel must be [kh,kw,Cin,Cout], got " + shape_str(kernel.shape()));
  if (stride != 1 && stride != 2)
    throw_error(ErrorKind::contract, "conv2d stride must be 1 or 2, got " + std::to_string(stride));
  ConvGeom g;
  g.n = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.ci = x.dim(3);
  g.kh = kernel.dim(0);
  g.kw = kernel.dim(1);
  g.co = kernel.dim(3);
  g.stride = stride;
  if (kernel.dim(2) != g.ci)
    throw_error(ErrorKind::dimension, "conv2d channel mismatch: input " + shape_str(x.shape()) +
                                          " vs kernel " + shape_str(kernel.shape()));
  if (padding == Padding::same) {
    g.out_h = (g.h + stride - 1) / stride;
    g.out_w = (g.w + stride - 1) / stride;
    const int pad_h = std::max((g.out_h - 1) * stride + g.kh - g.h, 0);
    const int pad_w = std::max((g.out_w - 1) * stride + g.kw - g.w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  } else {
    if (g.kh > g.h || g.kw > g.w)
      throw_error(ErrorKind::dimension, "conv2d kernel " + shape_str(kernel.shape()) +
                                            " does not fit input " + shape_str(x.shape()) +
                                            " with valid padding");
    g.out_h = (g.h - g.kh) / stride + 1;
    g.out_w = (g.w - g.kw) / stride + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  }
  return g;
}

// One sample's patches as rows: [out_h*out_w, kh*kw*ci]
inline void im2col(const float* x, const ConvGeom& g, float* col) {
  const int patch = g.kh * g.kw * g.ci;
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      float* row = col + (size_t(oy) * g.out_w + ox) * patch;
      for (int ky = 0; ky < g.kh; ++ky) {
        const int iy = oy * g.stride - g.pad_top + ky;
        float* dst = row + size_t(ky) * g.kw * g.ci;
        if (iy < 0 || iy >= g.h) {
          std::memset(dst, 0, sizeof(float) * size_t(g.kw) * g.ci);
          continue;
        }
        for (int kx = 0; kx < g.kw; ++kx) {
          const int ix = ox * g.stride - g.pad_left + kx;
          if (ix < 0 || ix >= g.w) {
            std::memset(dst + size_t(kx) * g.ci, 0, sizeof(float) * size_t(g.ci));
          } else {
            std::memcpy(dst + size_t(kx) * g.ci, x + (size_t(iy) * g.w + ix) * g.ci,
                        sizeof(float) * size_t(g.ci));
          }
        }
      }
    }
  }
}

inline void col2im_add(const float* col, const ConvGeom& g, float* gx) {
  const int patch = g.kh * g.kw * g.ci;
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      const float* row = col + (size_t(oy) * g.out_w + ox) * patch;
      for (int ky = 0; ky < g.kh; ++ky) {
        const int iy = oy * g.stride - g.pad_top + ky;
        if (iy < 0 || iy >= g.h) continue;
        for (int kx = 0; kx < g.kw; ++kx) {
          const int ix = ox * g.stride - g.pad_left + kx;
          if (ix < 0 || ix >= g.w) continue;
          const float* src = row + (size_t(ky) * g.kw + kx) * g.ci;
          float* dst = gx + (size_t(iy) * g.w + ix) * g.ci;
          for (int ch = 0; ch < g.ci; ++ch) dst[ch] += src[ch];
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& kernel, Padding padding, int stride = 1) {
  const detail::ConvGeom g = detail::conv_geometry(x, kernel, padding, stride);
  const int patch = g.kh * g.kw * g.ci;
  const int opix = g.out_h * g.out_w;
  Tensor out({g.n, g.out_h, g.out_w, g.co});
  // One batched im2col + a single GEMM; per-sample GEMMs are overhead-bound
  // at desk resolutions.
  std::vector<float> col(size_t(g.n) * opix * patch);
  for (int i = 0; i < g.n; ++i)
    detail::im2col(x.data() + size_t(i) * g.h * g.w * g.ci, g, col.data() + size_t(i) * opix * patch);
  gemm_nn(g.n * opix, g.co, patch, col.data(), kernel.data(), out.data());

  if (detail::recording({&x, &kernel})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), kn = kernel.node_ptr(), on = out.node_ptr();
    Tape::active()->record([xn, kn, on, g, patch, opix] {
      if (on->grad.empty()) return;
      const bool need_x = xn->tracked || xn->requires_grad;
      const bool need_k = kn->tracked || kn->requires_grad;
      const float* gout = on->grad.data();
      if (need_k) {
        std::vector<float> col(size_t(g.n) * opix * patch);
        for (int i = 0; i < g.n; ++i)
          detail::im2col(xn->value.data() + size_t(i) * g.h * g.w * g.ci, g,
                         col.data() + size_t(i) * opix * patch);
        gemm_tn(patch, g.co, g.n * opix, col.data(), gout, kn->ensure_grad(), /*accumulate=*/true);
      }
      if (need_x) {
        float* gx = xn->ensure_grad();
        std::vector<float> dcol(size_t(g.n) * opix * patch);
        gemm_nt(g.n * opix, patch, g.co, gout, kn->value.data(), dcol.data());
        for (int i = 0; i < g.n; ++i)
          detail::col2im_add(dcol.data() + size_t(i) * opix * patch, g,
                             gx + size_t(i) * g.h * g.w * g.ci);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle.
// ---------------------------------------------------------------------------

/// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
/// using central differences with step h. `f` must be a pure scalar function.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-3) {
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tape tape;
    Tensor y = f(x);
    tape.backward(y);
  }
  std::vector<float> analytic(x.grad().begin(), x.grad().end());
  x.set_requires_grad(false);

  double worst = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    const float saved = x.data()[i];
    x.data()[i] = float(saved + h);
    const double fp = f(x).item_double();
    x.data()[i] = float(saved - h);
    const double fm = f(x).item_double();
    x.data()[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max(1e-8, std::fabs(double(analytic[i])) + std::fabs(numeric));
    worst = std::max(worst, std::fabs(double(analytic[i]) - numeric) / denom);
  }
  return worst;
}

}  // namespace funmatch
