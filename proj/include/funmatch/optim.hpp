#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "funmatch/linalg.hpp"
#include "funmatch/tensor.hpp"

namespace funmatch {

// ---------------------------------------------------------------------------
// Learning-rate schedules.
// ---------------------------------------------------------------------------

struct Schedule {
  enum class Kind { cosine, quadratic };
  Kind kind = Kind::cosine;
  float base_lr = 0.001f;
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;

  void validate() const {
    if (base_lr <= 0.f) throw_error(ErrorKind::config, "schedule: base_lr must be > 0");
    if (warmup_steps < 0 || warmup_steps >= total_steps)
      throw_error(ErrorKind::config, "schedule: need 0 <= warmup_steps < total_steps");
  }
};

/// Linear warmup to base_lr, then cosine or quadratic decay to exactly 0 at
/// total_steps. Continuous at the warmup boundary.
inline float schedule_lr(const Schedule& s, int64_t step) {
  if (step < 0 || step > s.total_steps)
    throw_error(ErrorKind::contract, "schedule_lr: step " + std::to_string(step) + " outside [0, " +
                                         std::to_string(s.total_steps) + "]");
  if (step < s.warmup_steps) return s.base_lr * float(step) / float(s.warmup_steps);
  const double q = double(step - s.warmup_steps) / double(s.total_steps - s.warmup_steps);
  if (s.kind == Schedule::Kind::cosine) return s.base_lr * float(0.5 * (1.0 + std::cos(M_PI * q)));
  return s.base_lr * float((1.0 - q) * (1.0 - q));
}

// ---------------------------------------------------------------------------
// Gradient clipping.
// ---------------------------------------------------------------------------

/// Scales every gradient by threshold/norm when the global L2 norm over all
/// parameter gradients exceeds the threshold. Returns the pre-clip norm.
inline double clip_global_norm(std::span<Tensor> params, float threshold) {
  if (threshold <= 0.f) throw_error(ErrorKind::config, "clip threshold must be > 0");
  double sq = 0.0;
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    const float* g = p.grad_data();
    for (int64_t i = 0; i < p.size(); ++i) sq += double(g[i]) * g[i];
  }
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const float scale = float(threshold / norm);
    for (Tensor& p : params) {
      if (!p.has_grad()) continue;
      float* g = p.grad_data();
      for (int64_t i = 0; i < p.size(); ++i) g[i] *= scale;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay.
// ---------------------------------------------------------------------------

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<float>> m, v;  // per parameter, matching shapes

  void ensure(std::span<const Tensor> params) {
    if (!m.empty()) return;
    for (const Tensor& p : params) {
      m.emplace_back(size_t(p.size()), 0.f);
      v.emplace_back(size_t(p.size()), 0.f);
    }
  }
};

namespace detail {

inline void check_slots(size_t slots, size_t params, const char* who) {
  if (slots != params)
    throw_error(ErrorKind::contract, std::string(who) + ": state holds " + std::to_string(slots) +
                                         " slots for " + std::to_string(params) + " parameters");
}

}  // namespace detail

/// Bias-corrected Adam direction plus decoupled decay:
/// theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta.
inline void adam_step(AdamState& state, std::span<Tensor> params, float lr, float weight_decay,
                      const AdamConfig& cfg = {}) {
  state.ensure(params);
  detail::check_slots(state.m.size(), params.size(), "adam_step");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(double(cfg.beta1), double(state.step));
  const double bc2 = 1.0 - std::pow(double(cfg.beta2), double(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p];
    if (int64_t(state.m[p].size()) != t.size())
      throw_error(ErrorKind::contract, "adam_step: slot " + std::to_string(p) + " shape mismatch");
    const float* g = t.grad_data();
    float* m = state.m[p].data();
    float* v = state.v[p].data();
    float* w = t.data();
    for (int64_t i = 0; i < t.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.f - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.f - cfg.beta2) * g[i] * g[i];
      const float mhat = float(m[i] / bc1);
      const float vhat = float(v[i] / bc2);
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps)) + lr * weight_decay * w[i];
    }
  }
}

// ---------------------------------------------------------------------------
// SGD with momentum.
// ---------------------------------------------------------------------------

struct SgdmState {
  int64_t step = 0;
  std::vector<std::vector<float>> velocity;

  void ensure(std::span<const Tensor> params) {
    if (!velocity.empty()) return;
    for (const Tensor& p : params) velocity.emplace_back(size_t(p.size()), 0.f);
  }
};

/// v <- momentum * v + g; theta -= lr * v + lr * wd * theta.
inline void sgdm_step(SgdmState& state, std::span<Tensor> params, float lr, float weight_decay,
                      float momentum = 0.9f) {
  state.ensure(params);
  detail::check_slots(state.velocity.size(), params.size(), "sgdm_step");
  state.step += 1;
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p];
    if (int64_t(state.velocity[p].size()) != t.size())
      throw_error(ErrorKind::contract, "sgdm_step: slot " + std::to_string(p) + " shape mismatch");
    const float* g = t.grad_data();
    float* v = state.velocity[p].data();
    float* w = t.data();
    for (int64_t i = 0; i < t.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      w[i] -= lr * v[i] + lr * weight_decay * w[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Hyperparameter grids.
// ---------------------------------------------------------------------------

struct HyperGrid {
  std::vector<float> learning_rates;
  std::vector<float> weight_decays;
  std::vector<float> temperatures;

  void validate() const {
    if (learning_rates.empty() || weight_decays.empty() || temperatures.empty())
      throw_error(ErrorKind::config, "hyper grid lists must be non-empty");
  }
  size_t size() const { return learning_rates.size() * weight_decays.size() * temperatures.size(); }
};

// ---------------------------------------------------------------------------
// Inverse p-th roots of PSD matrices.
// ---------------------------------------------------------------------------

/// (M + eps*I)^(-1/p) by symmetric eigendecomposition: eigenvalues are
/// clamped at >= 0, shifted by eps, raised to -1/p, recomposed.
inline std::vector<float> inverse_pth_root(const std::vector<float>& m, int n, int p, float eps) {
  if (p < 1) throw_error(ErrorKind::contract, "inverse_pth_root: p must be >= 1");
  if (int64_t(m.size()) != int64_t(n) * n)
    throw_error(ErrorKind::dimension, "inverse_pth_root: matrix size " + std::to_string(m.size()) +
                                          " is not " + std::to_string(n) + "^2");
  double scale = 0.0;
  for (float v : m) scale = std::max(scale, double(std::fabs(v)));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (std::fabs(double(m[size_t(i) * n + j]) - double(m[size_t(j) * n + i])) >
          1e-6 * std::max(1.0, scale))
        throw_error(ErrorKind::contract, "inverse_pth_root: matrix is not symmetric at (" +
                                             std::to_string(i) + "," + std::to_string(j) + ")");
  std::vector<double> a(size_t(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      a[size_t(i) * n + j] = 0.5 * (double(m[size_t(i) * n + j]) + double(m[size_t(j) * n + i]));
  std::vector<double> eigvals, eigvecs;
  sym_eig(std::move(a), n, eigvals, eigvecs);
  const double inv_p = -1.0 / double(p);
  return sym_eig_apply(eigvals, eigvecs, n,
                       [&](double lam) { return std::pow(std::max(lam, 0.0) + double(eps), inv_p); });
}

// ---------------------------------------------------------------------------
// Blocked Shampoo.
// ---------------------------------------------------------------------------

/// Greedy partition of a dimension into chunks of at most `limit`.
inline std::vector<int> block_partition(int dim, int limit) {
  if (dim < 1 || limit < 1) throw_error(ErrorKind::contract, "block_partition: bad arguments");
  std::vector<int> sizes;
  for (int at = 0; at < dim; at += limit) sizes.push_back(std::min(limit, dim - at));
  return sizes;
}

struct ShampooConfig {
  int block_limit = 128;
  int refresh_interval = 1;  // recompute roots every step by default
  float damping = 1e-6f;
  float momentum = 0.9f;  // nesterov
  bool graft_to_adam = true;
  float min_graft_norm = 1e-12f;
  AdamConfig adam;
};

struct ShampooState {
  // One entry per (parameter, row-block, col-block), row-major over blocks.
  struct Block {
    int r = 0, c = 0;
    std::vector<float> left;        // r x r gradient statistics
    std::vector<float> right;       // c x c
    std::vector<float> left_root;   // cached (L + eps I)^(-1/4)
    std::vector<float> right_root;  // cached (R + eps I)^(-1/4)
  };
  struct Param {
    int rows = 0, cols = 0;  // matricized shape
    std::vector<int> row_blocks, col_blocks;
    std::vector<Block> blocks;
    std::vector<float> momentum;  // parameter-shaped buffer
  };
  int64_t step = 0;
  std::vector<Param> params;
  AdamState graft;  // concurrent Adam moments used for per-layer grafting

  void ensure(std::span<const Tensor> tensors, const ShampooConfig& cfg) {
    if (!params.empty()) return;
    for (const Tensor& t : tensors) {
      Param p;
      p.cols = t.rank() >= 2 ? t.shape().back() : 1;
      p.rows = int(t.size() / p.cols);
      p.row_blocks = block_partition(p.rows, cfg.block_limit);
      p.col_blocks = block_partition(p.cols, cfg.block_limit);
      for (int bi : p.row_blocks)
        for (int bj : p.col_blocks) {
          Block b;
          b.r = bi;
          b.c = bj;
          b.left.assign(size_t(bi) * bi, 0.f);
          b.right.assign(size_t(bj) * bj, 0.f);
          p.blocks.push_back(std::move(b));
        }
      p.momentum.assign(size_t(t.size()), 0.f);
      params.push_back(std::move(p));
    }
  }
};

namespace detail {

inline void copy_block(const float* src, int cols, int r0, int c0, int r, int c, float* dst) {
  for (int i = 0; i < r; ++i)
    std::memcpy(dst + size_t(i) * c, src + size_t(r0 + i) * cols + c0, sizeof(float) * size_t(c));
}

inline void add_block(const float* src, int r, int c, float* dst, int cols, int r0, int c0) {
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) dst[size_t(r0 + i) * cols + c0 + j] = src[size_t(i) * c + j];
}

}  // namespace detail

/// Blocked Shampoo: per block L += G G^T, R += G^T G, preconditioned
/// direction L^(-1/4) G R^(-1/4) with cached roots refreshed every
/// refresh_interval steps, optional grafting to the concurrent Adam update
/// norm per layer, nesterov momentum, decoupled weight decay.
inline void shampoo_step(ShampooState& state, std::span<Tensor> tensors, float lr, float weight_decay,
                         const ShampooConfig& cfg = {}) {
  state.ensure(tensors, cfg);
  detail::check_slots(state.params.size(), tensors.size(), "shampoo_step");
  if (cfg.graft_to_adam) state.graft.ensure(tensors);
  state.step += 1;
  const bool refresh = ((state.step - 1) % std::max(1, cfg.refresh_interval)) == 0;

  // Concurrent Adam moments (for grafting norms), updated on a copy of the
  // decay-free Adam rule.
  const double bc1 = 1.0 - std::pow(double(cfg.adam.beta1), double(state.step));
  const double bc2 = 1.0 - std::pow(double(cfg.adam.beta2), double(state.step));

  for (size_t pi = 0; pi < tensors.size(); ++pi) {
    Tensor& t = tensors[pi];
    ShampooState::Param& p = state.params[pi];
    if (int64_t(p.rows) * p.cols != t.size())
      throw_error(ErrorKind::contract, "shampoo_step: slot " + std::to_string(pi) + " shape mismatch");
    const float* g = t.grad_data();

    double adam_sq = 0.0;
    if (cfg.graft_to_adam) {
      float* m = state.graft.m[pi].data();
      float* v = state.graft.v[pi].data();
      for (int64_t i = 0; i < t.size(); ++i) {
        m[i] = cfg.adam.beta1 * m[i] + (1.f - cfg.adam.beta1) * g[i];
        v[i] = cfg.adam.beta2 * v[i] + (1.f - cfg.adam.beta2) * g[i] * g[i];
        const double d = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam.eps);
        adam_sq += d * d;
      }
    }

    std::vector<float> direction(size_t(t.size()));
    std::vector<float> gblock, tmp, pblock;
    int block_index = 0;
    int r0 = 0;
    for (int bi : p.row_blocks) {
      int c0 = 0;
      for (int bj : p.col_blocks) {
        ShampooState::Block& b = p.blocks[size_t(block_index++)];
        gblock.resize(size_t(bi) * bj);
        detail::copy_block(g, p.cols, r0, c0, bi, bj, gblock.data());
        // statistics
        gemm_nt(bi, bi, bj, gblock.data(), gblock.data(), b.left.data(), /*accumulate=*/true);
        gemm_tn(bj, bj, bi, gblock.data(), gblock.data(), b.right.data(), /*accumulate=*/true);
        if (refresh || b.left_root.empty()) {
          b.left_root = inverse_pth_root(b.left, bi, 4, cfg.damping);
          b.right_root = inverse_pth_root(b.right, bj, 4, cfg.damping);
        }
        tmp.resize(size_t(bi) * bj);
        pblock.resize(size_t(bi) * bj);
        gemm_nn(bi, bj, bi, b.left_root.data(), gblock.data(), tmp.data());
        gemm_nn(bi, bj, bj, tmp.data(), b.right_root.data(), pblock.data());
        detail::add_block(pblock.data(), bi, bj, direction.data(), p.cols, r0, c0);
        c0 += bj;
      }
      r0 += bi;
    }

    if (cfg.graft_to_adam) {
      double sh_sq = 0.0;
      for (float v : direction) sh_sq += double(v) * v;
      const double sh_norm = std::sqrt(sh_sq);
      const double target = std::sqrt(adam_sq);
      const float rescale = sh_norm > cfg.min_graft_norm ? float(target / sh_norm) : 0.f;
      for (float& v : direction) v *= rescale;
    }

    float* buf = p.momentum.data();
    float* w = t.data();
    for (int64_t i = 0; i < t.size(); ++i) {
      buf[i] = cfg.momentum * buf[i] + direction[i];
      const float update = cfg.momentum > 0.f ? direction[i] + cfg.momentum * buf[i] : direction[i];
      w[i] -= lr * update + lr * weight_decay * w[i];
    }
  }
}

}  // namespace funmatch
