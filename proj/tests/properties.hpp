#pragma once

// Compact numerical property battery shared by the acceptance suite: one
// entry per library invariant, each returning pass/fail plus a measurement.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "funmatch/augment.hpp"
#include "funmatch/data.hpp"
#include "funmatch/distill.hpp"
#include "funmatch/nn.hpp"
#include "funmatch/optim.hpp"

namespace funmatch::props {

struct PropertyResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline Tensor random_tensor(Shape shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  KeyStream s({seed});
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = float(s.uniform(lo, hi));
  return t;
}

inline PropertyResult check(const std::string& name, bool pass, const std::string& detail) {
  return {name, pass, detail};
}

inline std::vector<PropertyResult> run_all_property_checks() {
  std::vector<PropertyResult> out;
  char buf[160];

  // --- gradient checks over the differentiable primitives (h = 1e-3) ------
  {
    double worst = 0;
    {
      Tensor x = random_tensor({3, 4}, 21);
      Tensor b = random_tensor({4, 2}, 22);
      worst = std::max(worst, grad_check([&](const Tensor& t) {
        return sum_all(mul(matmul(t, b), matmul(t, b)));
      }, x));
    }
    {
      Tensor x = random_tensor({2, 5, 5, 2}, 23, 0.5, 1.5);
      Tensor w = random_tensor({3, 3, 2, 3}, 24, 0.25, 0.75);
      worst = std::max(worst, grad_check([&](const Tensor& t) {
        return sum_all(conv2d(t, w, Padding::same, 1));
      }, x));
      worst = std::max(worst, grad_check([&](const Tensor& t) {
        return sum_all(conv2d(x, t, Padding::valid, 2));
      }, w));
    }
    {
      Tensor x = random_tensor({6}, 25);
      Tensor b = random_tensor({6}, 26);
      worst = std::max(worst, grad_check([&](const Tensor& t) {
        return sum_all(relu(add(scale(t, 1.7f), b)));
      }, x));
    }
    {
      Tensor x = random_tensor({3, 5}, 27, -1, 1);
      Tensor weights({3, 5});
      for (int64_t i = 0; i < weights.size(); ++i) weights.data()[i] = (i % 2 == 0) ? 1.f : -1.f;
      worst = std::max(worst, grad_check([&](const Tensor& t) {
        return sum_all(mul(log_softmax(t), weights));
      }, x));
    }
    {
      Tensor x = random_tensor({2, 4, 4, 4}, 201);
      Tensor gamma = random_tensor({4}, 203, 0.5, 1.5);
      Tensor beta = random_tensor({4}, 204);
      Tensor probe({2, 4, 4, 4});
      KeyStream pr({205});
      for (int64_t i = 0; i < probe.size(); ++i) probe.data()[i] = pr.next_bool() ? 1.f : -1.f;
      worst = std::max(worst, grad_check([&](const Tensor& t) {
        return sum_all(mul(group_norm(t, 2, gamma, beta), probe));
      }, x));
      Tensor w = random_tensor({3, 3, 4, 4}, 202, -0.5, 0.5);
      Tensor wprobe({3, 3, 4, 4});
      for (int64_t i = 0; i < wprobe.size(); ++i) wprobe.data()[i] = pr.next_bool() ? 1.f : -1.f;
      worst = std::max(worst, grad_check([&](const Tensor& t) {
        return sum_all(mul(standardize_weights(t), wprobe));
      }, w));
    }
    {
      Tensor p_t({1, 5}, {0.9f, 0.04f, 0.03f, 0.02f, 0.01f});
      Tensor z({1, 5}, {0.2f, -0.3f, 0.1f, 0.4f, -0.2f});
      worst = std::max(worst, grad_check([&](const Tensor& t) { return kl_loss(p_t, t, 1.f); }, z));
    }
    std::snprintf(buf, sizeof(buf), "max relative error %.2e", worst);
    out.push_back(check("gradient checks (primitives + kl, h=1e-3, tol 1e-3)", worst < 1e-3, buf));
  }

  // --- log_softmax row sums -------------------------------------------------
  {
    Tensor x = random_tensor({32, 10}, 17, -50, 50);
    Tensor lsm = log_softmax(x);
    double worst = 0;
    for (int r = 0; r < 32; ++r) {
      double sum = 0;
      for (int j = 0; j < 10; ++j) sum += std::exp(double(lsm.data()[r * 10 + j]));
      worst = std::max(worst, std::fabs(sum - 1.0));
    }
    std::snprintf(buf, sizeof(buf), "max |row sum - 1| = %.2e", worst);
    out.push_back(check("log_softmax rows exponentiate to 1 (tol 1e-6)", worst < 1e-6, buf));
  }

  // --- group norm statistics --------------------------------------------------
  {
    Tensor x = random_tensor({3, 4, 4, 8}, 43, -2, 2);
    Tensor gamma({8}, 1.f), beta({8}, 0.f);
    Tensor y = group_norm(x, 4, gamma, beta, 1e-5f);
    double worst_mean = 0, worst_var = 0;
    for (int n = 0; n < 3; ++n)
      for (int g = 0; g < 4; ++g) {
        double sum = 0, sq = 0;
        for (int p = 0; p < 16; ++p)
          for (int j = 0; j < 2; ++j) {
            const float v = y.data()[(n * 16 + p) * 8 + g * 2 + j];
            sum += v;
            sq += double(v) * v;
          }
        const double mean = sum / 32, var = sq / 32 - mean * mean;
        worst_mean = std::max(worst_mean, std::fabs(mean));
        worst_var = std::max(worst_var, std::fabs(var - 1.0));
      }
    std::snprintf(buf, sizeof(buf), "|mean| %.2e, |var-1| %.2e", worst_mean, worst_var);
    out.push_back(check("group_norm per-(sample,group) stats (mean<1e-5, var within 1e-3)",
                        worst_mean < 1e-5 && worst_var < 1e-3, buf));
  }

  // --- KL properties ---------------------------------------------------------
  {
    KeyStream s({31});
    bool ok = true;
    double min_kl = 1e9, self_kl = 0;
    for (int trial = 0; trial < 30; ++trial) {
      Tensor tl({2, 6}), sl({2, 6});
      for (int64_t i = 0; i < tl.size(); ++i) {
        tl.data()[i] = float(s.uniform(-3, 3));
        sl.data()[i] = float(s.uniform(-3, 3));
      }
      const float temp = float(s.uniform(0.5, 5));
      Tensor p_t = temperature_scale(tl, temp);
      const double kl = kl_loss(p_t, sl, temp).item_double();
      min_kl = std::min(min_kl, kl);
      self_kl = std::max(self_kl, std::fabs(kl_loss(p_t, scale(tl, 1.f), temp).item_double()));
      ok = ok && kl >= -1e-7;
    }
    std::snprintf(buf, sizeof(buf), "min KL %.2e, max self-KL %.2e", min_kl, self_kl);
    out.push_back(check("kl_loss >= 0, zero iff equal", ok && self_kl < 1e-5, buf));
  }

  // --- temperature monotonicity -----------------------------------------------
  {
    Tensor logits({1, 4}, {2.f, 0.f, -1.f, 0.5f});
    double prev = -1;
    bool ok = true;
    for (float t : {0.5f, 1.f, 2.f, 5.f, 10.f}) {
      Tensor p = temperature_scale(logits, t);
      const double h = row_entropy(p.data(), 4);
      ok = ok && h > prev;
      prev = h;
    }
    out.push_back(check("temperature raises teacher-target entropy monotonically", ok, ""));
  }

  // --- clipping ---------------------------------------------------------------
  {
    KeyStream s({71});
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor> params;
      for (int p = 0; p < 3; ++p) {
        Tensor t({8});
        t.set_requires_grad(true);
        float* g = t.grad_data();
        for (int i = 0; i < 8; ++i) g[i] = float(s.uniform(-10, 10));
        params.push_back(t);
      }
      const float threshold = float(s.uniform(0.1, 5.0));
      clip_global_norm(params, threshold);
      double sq = 0;
      for (auto& p : params)
        for (float v : p.grad()) sq += double(v) * v;
      worst = std::max(worst, std::sqrt(sq) / threshold);
    }
    std::snprintf(buf, sizeof(buf), "max post-clip norm / threshold = %.8f", worst);
    out.push_back(check("clip_global_norm post-norm <= threshold (1 + 1e-6)", worst <= 1.0 + 1e-6, buf));
  }

  // --- schedule ---------------------------------------------------------------
  {
    bool ok = true;
    for (auto kind : {Schedule::Kind::cosine, Schedule::Kind::quadratic}) {
      Schedule s;
      s.kind = kind;
      s.base_lr = 0.5f;
      s.warmup_steps = 137;
      s.total_steps = 1000;
      ok = ok && std::fabs(schedule_lr(s, 137) - 0.5f) < 1e-6;
      ok = ok && std::fabs(schedule_lr(s, 136) - 0.5f) < 0.005f;  // continuity
      ok = ok && schedule_lr(s, 1000) == 0.f;
      for (int64_t step = 0; step <= 1000; step += 13) ok = ok && schedule_lr(s, step) >= 0.f;
    }
    out.push_back(check("schedule endpoints, continuity, non-negativity", ok, ""));
  }

  // --- inverse p-th root reconstruction ---------------------------------------
  {
    double worst = 0;
    for (uint64_t seed : {81ull, 82ull, 83ull}) {
      const int n = 8;
      KeyStream s({seed});
      std::vector<float> a(64);
      for (auto& v : a) v = float(s.uniform(-1, 1));
      std::vector<float> m(64, 0.f);
      gemm_nt(n, n, n, a.data(), a.data(), m.data());
      for (int i = 0; i < n; ++i) m[size_t(i) * n + i] += 0.5f;
      const float eps = 1e-4f;
      std::vector<float> root = inverse_pth_root(m, n, 4, eps);
      std::vector<double> ad(root.begin(), root.end());
      std::vector<double> eigvals, eigvecs;
      sym_eig(ad, n, eigvals, eigvecs);
      std::vector<float> back =
          sym_eig_apply(eigvals, eigvecs, n, [](double lam) { return std::pow(lam, -4.0); });
      double num = 0, den = 0;
      for (int i = 0; i < 64; ++i) {
        const double target = double(m[size_t(i)]) + (i % (n + 1) == 0 ? eps : 0.0);
        num += (back[size_t(i)] - target) * (back[size_t(i)] - target);
        den += target * target;
      }
      worst = std::max(worst, std::sqrt(num / den));
    }
    std::snprintf(buf, sizeof(buf), "max relative reconstruction error %.2e", worst);
    out.push_back(check("inverse_pth_root reconstruction (tol 1e-4)", worst < 1e-4, buf));
  }

  // --- epoch coverage ----------------------------------------------------------
  {
    bool ok = true;
    for (int buffer : {1, 2, 7, 64, 1000}) {
      const std::vector<int> order = epoch_order(53, buffer, 5, 3);
      std::vector<bool> seen(53, false);
      for (int i : order) seen[size_t(i)] = true;
      ok = ok && order.size() == 53 && std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
    }
    ok = ok && epoch_order(100, 64, 9, 2) == epoch_order(100, 64, 9, 2);
    out.push_back(check("epoch coverage exactly-once for all buffer sizes, deterministic", ok, ""));
  }

  // --- mixup lambda uniformity ---------------------------------------------------
  {
    std::vector<float> lambdas;
    lambdas.reserve(100000);
    std::vector<int> indices(1000);
    for (int i = 0; i < 1000; ++i) indices[i] = i;
    for (uint32_t epoch = 0; epoch < 100; ++epoch) {
      ViewPlans plans = make_view_plans(TeacherMode::mix, 23, epoch, indices, epoch, 32, 32);
      for (const ViewPlan& p : plans.student) lambdas.push_back(p.lambda);
    }
    std::sort(lambdas.begin(), lambdas.end());
    double ks = 0;
    const double n = double(lambdas.size());
    for (size_t i = 0; i < lambdas.size(); ++i) {
      ks = std::max(ks, std::fabs((double(i) + 1.0) / n - double(lambdas[i])));
      ks = std::max(ks, std::fabs(double(lambdas[i]) - double(i) / n));
    }
    std::snprintf(buf, sizeof(buf), "KS statistic %.4f over 1e5 draws", ks);
    out.push_back(check("mixup lambda uniform on [0,1] (KS < 0.01)", ks < 0.01, buf));
  }

  // --- bitwise determinism of views and batches ----------------------------------
  {
    Dataset ds = synth_dataset(9, 64, 5, 16);
    std::vector<int> indices(16);
    for (int i = 0; i < 16; ++i) indices[i] = i;
    std::vector<Tensor> images;
    for (int i : indices) images.push_back(ds.image_tensor(i));
    ViewPlans a = make_view_plans(TeacherMode::mix, 13, 5, indices, 2, 16, 16);
    ViewPlans b = make_view_plans(TeacherMode::mix, 13, 5, indices, 2, 16, 16);
    Tensor batch_a = build_view_batch(images, a.student, 8);
    Tensor batch_b = build_view_batch(images, b.student, 8);
    bool ok = std::memcmp(batch_a.data(), batch_b.data(), sizeof(float) * size_t(batch_a.size())) == 0;
    Tensor teacher_batch = build_view_batch(images, a.teacher, 8);
    ok = ok && std::memcmp(batch_a.data(), teacher_batch.data(),
                           sizeof(float) * size_t(batch_a.size())) == 0;  // shared-mode consistency
    ok = ok && epoch_order(64, 1, 3, 0)[0] == 0;  // degenerate buffer keeps order
    out.push_back(check("bitwise determinism of views and batches; shared views coincide", ok, ""));
  }

  // --- shampoo step time vs adam (loose 3x bound, desk net) -----------------------
  {
    using Clock = std::chrono::steady_clock;
    ModelSpec spec;
    spec.kind = Arch::mlp;
    spec.depth = 1;
    spec.width = 256;
    spec.resolution = 8;
    spec.channels = 3;
    spec.classes = 10;
    auto time_optimizer = [&](auto&& step_fn) {
      Model m = build_model(spec, 3);
      set_trainable(m, true);
      std::vector<Tensor> params;
      for (auto& [n, t] : m.params) params.push_back(t);
      Tensor batch = random_tensor({512, 8, 8, 3}, 55);
      Tensor labels({512, 10});
      for (int i = 0; i < 512; ++i) labels.data()[i * 10 + (i % 10)] = 1.f;
      double best = 1e9;
      for (int rep = 0; rep < 3; ++rep) {
        const auto t0 = Clock::now();
        for (int it = 0; it < 5; ++it) {
          Tape tape;
          Tensor loss = cross_entropy_loss(labels, forward(m, batch));
          zero_grads(m);
          tape.backward(loss);
          clip_global_norm(params, 1.f);
          step_fn(params);
        }
        best = std::min(best,
                        std::chrono::duration<double>(Clock::now() - t0).count() / 5.0);
      }
      return best;
    };
    AdamState adam;
    const double adam_time = time_optimizer([&](std::span<Tensor> p) { adam_step(adam, p, 1e-3f, 1e-4f); });
    ShampooState sh;
    ShampooConfig cfg;
    cfg.block_limit = 32;
    cfg.refresh_interval = 1;
    const double sh_time =
        time_optimizer([&](std::span<Tensor> p) { shampoo_step(sh, p, 1e-3f, 1e-4f, cfg); });
    std::snprintf(buf, sizeof(buf), "adam %.2f ms, shampoo %.2f ms, ratio %.2f", adam_time * 1e3,
                  sh_time * 1e3, sh_time / adam_time);
    out.push_back(check("shampoo training-step time within 3x adam (refresh every step)",
                        sh_time <= 3.0 * adam_time, buf));
  }

  return out;
}

}  // namespace funmatch::props
