#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "funmatch/rng.hpp"
#include "funmatch/tensor.hpp"

namespace funmatch {

// ---------------------------------------------------------------------------
// Normalization primitives.
// ---------------------------------------------------------------------------

namespace detail {

// Shared backward for mean/variance normalization over a slice:
//   dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
struct NormStats {
  std::vector<float> inv_std;  // one per slice
};

}  // namespace detail

/// Per-(sample, group) normalization of an NHWC tensor followed by a
/// per-channel affine. Differentiable in x, gamma and beta.
inline Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                         float eps = 1e-5f) {
  if (x.rank() != 4)
    throw_error(ErrorKind::dimension, "group_norm expects [N,H,W,C], got " + shape_str(x.shape()));
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (groups < 1 || c % groups != 0)
    throw_error(ErrorKind::config, "group_norm: " + std::to_string(c) + " channels not divisible by " +
                                       std::to_string(groups) + " groups");
  if (gamma.size() != c || beta.size() != c)
    throw_error(ErrorKind::dimension, "group_norm affine parameters must have length " + std::to_string(c));

  const int cpg = c / groups;
  const int hw = h * w;
  const int64_t m = int64_t(hw) * cpg;  // elements per (sample, group)
  Tensor out(x.shape());
  Tensor xhat(x.shape());  // saved for backward
  std::vector<float> inv_std(size_t(n) * groups);

  for (int i = 0; i < n; ++i) {
    const float* xs = x.data() + size_t(i) * hw * c;
    float* os = out.data() + size_t(i) * hw * c;
    float* hs = xhat.data() + size_t(i) * hw * c;
    for (int g = 0; g < groups; ++g) {
      double sum = 0.0, sq = 0.0;
      for (int p = 0; p < hw; ++p) {
        const float* px = xs + size_t(p) * c + size_t(g) * cpg;
        for (int j = 0; j < cpg; ++j) {
          sum += px[j];
          sq += double(px[j]) * px[j];
        }
      }
      const double mean = sum / double(m);
      const double var = std::max(sq / double(m) - mean * mean, 0.0);
      const float istd = float(1.0 / std::sqrt(var + eps));
      inv_std[size_t(i) * groups + g] = istd;
      for (int p = 0; p < hw; ++p) {
        const size_t base = size_t(p) * c + size_t(g) * cpg;
        for (int j = 0; j < cpg; ++j) {
          const int ch = g * cpg + j;
          const float xh = (xs[base + j] - float(mean)) * istd;
          hs[base + j] = xh;
          os[base + j] = gamma.data()[ch] * xh + beta.data()[ch];
        }
      }
    }
  }

  if (detail::recording({&x, &gamma, &beta})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr(), on = out.node_ptr();
    auto hn = xhat.node_ptr();
    Tape::active()->record([xn, gn, bn, on, hn, inv_std, n, hw, c, groups, cpg, m] {
      if (on->grad.empty()) return;
      const float* g = on->grad.data();
      const float* xh = hn->value.data();
      const bool need_x = xn->tracked || xn->requires_grad;
      if (gn->tracked || gn->requires_grad) {
        float* gg = gn->ensure_grad();
        for (int64_t i = 0; i < int64_t(n) * hw; ++i)
          for (int ch = 0; ch < c; ++ch) gg[ch] += g[i * c + ch] * xh[i * c + ch];
      }
      if (bn->tracked || bn->requires_grad) {
        float* gb = bn->ensure_grad();
        for (int64_t i = 0; i < int64_t(n) * hw; ++i)
          for (int ch = 0; ch < c; ++ch) gb[ch] += g[i * c + ch];
      }
      if (!need_x) return;
      float* gx = xn->ensure_grad();
      const float* gam = gn->value.data();
      for (int i = 0; i < n; ++i) {
        const size_t sample = size_t(i) * hw * c;
        for (int gr = 0; gr < groups; ++gr) {
          double s1 = 0.0, s2 = 0.0;
          for (int p = 0; p < hw; ++p) {
            const size_t base = sample + size_t(p) * c + size_t(gr) * cpg;
            for (int j = 0; j < cpg; ++j) {
              const float dxh = g[base + j] * gam[gr * cpg + j];
              s1 += dxh;
              s2 += double(dxh) * xh[base + j];
            }
          }
          const float mean_dxh = float(s1 / double(m));
          const float mean_dxh_xh = float(s2 / double(m));
          const float istd = inv_std[size_t(i) * groups + gr];
          for (int p = 0; p < hw; ++p) {
            const size_t base = sample + size_t(p) * c + size_t(gr) * cpg;
            for (int j = 0; j < cpg; ++j) {
              const float dxh = g[base + j] * gam[gr * cpg + j];
              gx[base + j] += istd * (dxh - mean_dxh - xh[base + j] * mean_dxh_xh);
            }
          }
        }
      }
    });
  }
  return out;
}

/// Standardizes a convolution kernel per output channel (zero mean, unit
/// variance over the fan-in), applied on the fly before each convolution.
inline Tensor standardize_weights(const Tensor& kernel, float eps = 1e-10f) {
  if (kernel.rank() < 2)
    throw_error(ErrorKind::dimension,
                "standardize_weights expects rank >= 2, got " + shape_str(kernel.shape()));
  const int co = kernel.shape().back();
  const int64_t fan = kernel.size() / co;
  Tensor out(kernel.shape());
  std::vector<float> inv_std(static_cast<size_t>(co));
  for (int o = 0; o < co; ++o) {
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < fan; ++i) {
      const float v = kernel.data()[i * co + o];
      sum += v;
      sq += double(v) * v;
    }
    const double mean = sum / double(fan);
    const double var = std::max(sq / double(fan) - mean * mean, 0.0);
    const float istd = float(1.0 / std::sqrt(var + eps));
    inv_std[o] = istd;
    for (int64_t i = 0; i < fan; ++i)
      out.data()[i * co + o] = (kernel.data()[i * co + o] - float(mean)) * istd;
  }

  if (detail::recording({&kernel})) {
    detail::mark_output(out);
    auto kn = kernel.node_ptr();
    auto on = out.node_ptr();
    Tape::active()->record([kn, on, inv_std, co, fan] {
      if (on->grad.empty()) return;
      float* gk = kn->ensure_grad();
      const float* g = on->grad.data();
      const float* what = on->value.data();
      for (int o = 0; o < co; ++o) {
        double s1 = 0.0, s2 = 0.0;
        for (int64_t i = 0; i < fan; ++i) {
          s1 += g[i * co + o];
          s2 += double(g[i * co + o]) * what[i * co + o];
        }
        const float m1 = float(s1 / double(fan));
        const float m2 = float(s2 / double(fan));
        for (int64_t i = 0; i < fan; ++i)
          gk[i * co + o] += inv_std[o] * (g[i * co + o] - m1 - what[i * co + o] * m2);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model specs and architectures.
// ---------------------------------------------------------------------------

enum class Arch { mlp, small_resnet };

inline const char* arch_name(Arch a) { return a == Arch::mlp ? "mlp" : "small-resnet"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "mlp") return Arch::mlp;
  if (s == "small-resnet" || s == "small_resnet") return Arch::small_resnet;
  throw_error(ErrorKind::config, "unknown architecture '" + s + "' (expected mlp or small-resnet)");
}

struct ModelSpec {
  Arch kind = Arch::small_resnet;
  int depth = 4;       // resnet: residual blocks; mlp: hidden layers
  int width = 1;       // resnet: channel multiplier; mlp: hidden units
  int resolution = 32; // square input resolution in pixels
  int channels = 3;    // input channels
  int classes = 10;
  int groups = 8;      // group-norm groups; layers with fewer channels use per-channel groups
  bool weight_standardization = true;

  bool operator==(const ModelSpec&) const = default;
};

inline void validate_spec(const ModelSpec& spec) {
  if (spec.classes < 2) throw_error(ErrorKind::config, "model spec: classes must be >= 2");
  if (spec.resolution < 8) throw_error(ErrorKind::config, "model spec: resolution must be >= 8");
  if (spec.channels < 1) throw_error(ErrorKind::config, "model spec: channels must be >= 1");
  if (spec.width < 1) throw_error(ErrorKind::config, "model spec: width must be >= 1");
  if (spec.kind == Arch::mlp) {
    if (spec.depth < 1) throw_error(ErrorKind::config, "model spec: mlp depth must be >= 1");
  } else {
    if (spec.depth < 3) throw_error(ErrorKind::config, "model spec: small-resnet depth must be >= 3");
    if (spec.groups < 1) throw_error(ErrorKind::config, "model spec: groups must be >= 1");
  }
}

/// Largest usable group count <= the requested default for a channel count;
/// channels below the default fall back to one group per channel.
inline int effective_groups(int channels, int requested) {
  int g = std::min(requested, channels);
  while (channels % g != 0) --g;
  return g;
}

struct Model {
  ModelSpec spec;
  std::vector<std::pair<std::string, Tensor>> params;  // ordered, names unique

  Tensor& param(const std::string& name) {
    for (auto& [n, t] : params)
      if (n == name) return t;
    throw_error(ErrorKind::contract, "model has no parameter '" + name + "'");
  }
  const Tensor& param(const std::string& name) const {
    return const_cast<Model*>(this)->param(name);
  }
};

inline void set_trainable(Model& m, bool trainable) {
  for (auto& [n, t] : m.params) t.set_requires_grad(trainable);
}

inline void zero_grads(Model& m) {
  for (auto& [n, t] : m.params) t.zero_grad();
}

namespace detail {

inline std::vector<int> resnet_blocks_per_stage(int depth) {
  const int q = depth / 3, r = depth % 3;
  return {q + (r > 0 ? 1 : 0), q + (r > 1 ? 1 : 0), q};
}

inline int resnet_stage_channels(const ModelSpec& spec, int stage) {
  return 2 * spec.width * (1 << stage);
}

// Downsampling stops once feature maps reach 2x2 so normalization groups
// keep more than one element per (sample, group).
inline int resnet_stem_stride(const ModelSpec& spec) { return spec.resolution >= 16 ? 2 : 1; }

inline int resnet_stage_stride(int spatial) { return spatial > 2 ? 2 : 1; }

struct ParamBuilder {
  Model& model;
  uint64_t seed;
  int index = 0;

  void tensor(const std::string& name, Shape shape, float fill) {
    model.params.emplace_back(name, Tensor(std::move(shape), fill));
    ++index;
  }
  // fan-in scaled uniform init: U(-sqrt(3/fan), sqrt(3/fan))
  void weights(const std::string& name, Shape shape, int64_t fan_in) {
    Tensor t(shape);
    KeyStream stream({seed, uint64_t(index)});
    const double bound = std::sqrt(3.0 / double(fan_in));
    for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = float(stream.uniform(-bound, bound));
    model.params.emplace_back(name, std::move(t));
    ++index;
  }
};

}  // namespace detail

/// Deterministic model construction: identical (spec, seed) gives bitwise
/// identical parameters.
inline Model build_model(const ModelSpec& spec, uint64_t init_seed) {
  validate_spec(spec);
  Model m;
  m.spec = spec;
  detail::ParamBuilder b{m, init_seed};

  if (spec.kind == Arch::mlp) {
    int in = spec.resolution * spec.resolution * spec.channels;
    for (int l = 0; l < spec.depth; ++l) {
      b.weights("fc" + std::to_string(l) + "/w", {in, spec.width}, in);
      b.tensor("fc" + std::to_string(l) + "/b", {spec.width}, 0.f);
      in = spec.width;
    }
    b.weights("head/w", {in, spec.classes}, in);
    b.tensor("head/b", {spec.classes}, 0.f);
    return m;
  }

  const auto blocks = detail::resnet_blocks_per_stage(spec.depth);
  const int stem_ch = detail::resnet_stage_channels(spec, 0);
  b.weights("stem/conv/w", {3, 3, spec.channels, stem_ch}, 3 * 3 * spec.channels);
  int ch = stem_ch;
  for (int s = 0; s < 3; ++s) {
    const int out_ch = detail::resnet_stage_channels(spec, s);
    for (int bl = 0; bl < blocks[size_t(s)]; ++bl) {
      const std::string prefix = "s" + std::to_string(s) + "/b" + std::to_string(bl) + "/";
      const bool project = (bl == 0 && (ch != out_ch || s > 0));
      b.tensor(prefix + "gn1/gamma", {ch}, 1.f);
      b.tensor(prefix + "gn1/beta", {ch}, 0.f);
      if (project) b.weights(prefix + "proj/w", {1, 1, ch, out_ch}, ch);
      b.weights(prefix + "conv1/w", {3, 3, ch, out_ch}, 3 * 3 * ch);
      b.tensor(prefix + "gn2/gamma", {out_ch}, 1.f);
      b.tensor(prefix + "gn2/beta", {out_ch}, 0.f);
      b.weights(prefix + "conv2/w", {3, 3, out_ch, out_ch}, 3 * 3 * out_ch);
      ch = out_ch;
    }
  }
  b.tensor("head/gn/gamma", {ch}, 1.f);
  b.tensor("head/gn/beta", {ch}, 0.f);
  b.weights("head/fc/w", {ch, spec.classes}, ch);
  b.tensor("head/fc/b", {spec.classes}, 0.f);
  return m;
}

namespace detail {

inline Tensor maybe_standardize(const Model& m, const Tensor& w) {
  return m.spec.weight_standardization ? standardize_weights(w) : w;
}

inline Tensor resnet_forward(const Model& m, const Tensor& batch) {
  const ModelSpec& spec = m.spec;
  const auto blocks = resnet_blocks_per_stage(spec.depth);
  const int stem_stride = resnet_stem_stride(spec);
  Tensor h = conv2d(batch, maybe_standardize(m, m.param("stem/conv/w")), Padding::same, stem_stride);
  int spatial = (spec.resolution + stem_stride - 1) / stem_stride;
  int ch = resnet_stage_channels(spec, 0);
  for (int s = 0; s < 3; ++s) {
    const int out_ch = resnet_stage_channels(spec, s);
    for (int bl = 0; bl < blocks[size_t(s)]; ++bl) {
      const std::string prefix = "s" + std::to_string(s) + "/b" + std::to_string(bl) + "/";
      const bool project = (bl == 0 && (ch != out_ch || s > 0));
      const int stride = (bl == 0 && s > 0) ? resnet_stage_stride(spatial) : 1;
      spatial = (spatial + stride - 1) / stride;
      Tensor pre = relu(group_norm(h, effective_groups(ch, spec.groups), m.param(prefix + "gn1/gamma"),
                                   m.param(prefix + "gn1/beta")));
      Tensor shortcut =
          project ? conv2d(pre, maybe_standardize(m, m.param(prefix + "proj/w")), Padding::same, stride)
                  : h;
      Tensor mid = conv2d(pre, maybe_standardize(m, m.param(prefix + "conv1/w")), Padding::same, stride);
      mid = relu(group_norm(mid, effective_groups(out_ch, spec.groups), m.param(prefix + "gn2/gamma"),
                            m.param(prefix + "gn2/beta")));
      mid = conv2d(mid, maybe_standardize(m, m.param(prefix + "conv2/w")), Padding::same, 1);
      h = add(mid, shortcut);
      ch = out_ch;
    }
  }
  h = relu(group_norm(h, effective_groups(ch, spec.groups), m.param("head/gn/gamma"),
                      m.param("head/gn/beta")));
  h = global_avg_pool(h);
  return add(matmul(h, m.param("head/fc/w")), m.param("head/fc/b"));
}

inline Tensor mlp_forward(const Model& m, const Tensor& batch) {
  const int n = batch.dim(0);
  Tensor h = reshape(batch, {n, int(batch.size() / n)});
  for (int l = 0; l < m.spec.depth; ++l) {
    const std::string prefix = "fc" + std::to_string(l) + "/";
    h = relu(add(matmul(h, m.param(prefix + "w")), m.param(prefix + "b")));
  }
  return add(matmul(h, m.param("head/w")), m.param("head/b"));
}

}  // namespace detail

/// Batch [N, res, res, channels] -> logits [N, classes]. Gradients flow only
/// if a tape is active and the model's parameters are trainable.
inline Tensor forward(const Model& m, const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != m.spec.resolution || batch.dim(2) != m.spec.resolution ||
      batch.dim(3) != m.spec.channels)
    throw_error(ErrorKind::dimension,
                "forward: batch " + shape_str(batch.shape()) + " does not match model input [N," +
                    std::to_string(m.spec.resolution) + "," + std::to_string(m.spec.resolution) + "," +
                    std::to_string(m.spec.channels) + "]");
  return m.spec.kind == Arch::mlp ? detail::mlp_forward(m, batch) : detail::resnet_forward(m, batch);
}

}  // namespace funmatch
