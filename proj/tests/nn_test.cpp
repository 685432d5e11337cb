#include <doctest.h>

#include <cmath>
#include <cstring>

#include "funmatch/nn.hpp"
#include "funmatch/rng.hpp"

using namespace funmatch;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  KeyStream s({seed});
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = float(s.uniform(lo, hi));
  return t;
}

ModelSpec desk_mlp_spec() {
  ModelSpec spec;
  spec.kind = Arch::mlp;
  spec.depth = 1;
  spec.width = 16;
  spec.resolution = 8;
  spec.channels = 1;
  spec.classes = 10;
  return spec;
}

}  // namespace

TEST_CASE("group_norm: constant input maps to beta") {
  Tensor x({2, 3, 3, 4}, 5.f);
  Tensor gamma({4}, 1.f);
  Tensor beta({4}, 0.f);
  Tensor out = group_norm(x, 2, gamma, beta);
  for (int64_t i = 0; i < out.size(); ++i) CHECK(std::fabs(out.data()[i]) < 1e-2);  // eps-damped zero
}

TEST_CASE("group_norm: two values normalize to -1 and 1") {
  Tensor x({1, 1, 2, 1}, {1.f, 3.f});
  Tensor gamma({1}, 1.f);
  Tensor beta({1}, 0.f);
  Tensor out = group_norm(x, 1, gamma, beta, 1e-12f);
  CHECK(out.data()[0] == doctest::Approx(-1).epsilon(1e-4));
  CHECK(out.data()[1] == doctest::Approx(1).epsilon(1e-4));
}

TEST_CASE("group_norm: invariance to per-group scale and shift") {
  Tensor x = random_tensor({2, 4, 4, 6}, 40);
  Tensor gamma = random_tensor({6}, 41, 0.5, 1.5);
  Tensor beta = random_tensor({6}, 42);
  Tensor scaled(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) scaled.data()[i] = 3.f * x.data()[i] + 7.f;
  Tensor a = group_norm(x, 3, gamma, beta, 1e-10f);
  Tensor b = group_norm(scaled, 3, gamma, beta, 1e-10f);
  for (int64_t i = 0; i < a.size(); ++i)
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-3));
}

TEST_CASE("group_norm: indivisible channels is a configuration error") {
  Tensor x({1, 2, 2, 6});
  Tensor gamma({6}, 1.f);
  Tensor beta({6}, 0.f);
  CHECK_THROWS_AS(group_norm(x, 4, gamma, beta), Error);
}

TEST_CASE("group_norm: per-(sample, group) statistics are standardized before the affine") {
  Tensor x = random_tensor({3, 4, 4, 8}, 43, -2, 2);
  Tensor gamma({8}, 1.f);
  Tensor beta({8}, 0.f);
  const int groups = 4, cpg = 2;
  Tensor out = group_norm(x, groups, gamma, beta, 1e-5f);
  for (int n = 0; n < 3; ++n) {
    for (int g = 0; g < groups; ++g) {
      double sum = 0, sq = 0;
      int count = 0;
      for (int p = 0; p < 16; ++p)
        for (int j = 0; j < cpg; ++j) {
          const float v = out.data()[((n * 16) + p) * 8 + g * cpg + j];
          sum += v;
          sq += double(v) * v;
          ++count;
        }
      const double mean = sum / count;
      const double var = sq / count - mean * mean;
      CHECK(std::fabs(mean) < 1e-5);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
  }
}

TEST_CASE("standardize_weights: two-value channel becomes -1, 1") {
  Tensor w({1, 1, 2, 1}, {1.f, 3.f});
  Tensor out = standardize_weights(w);
  CHECK(out.data()[0] == doctest::Approx(-1).epsilon(1e-4));
  CHECK(out.data()[1] == doctest::Approx(1).epsilon(1e-4));
}

TEST_CASE("standardize_weights: standardized input is unchanged") {
  Tensor w({1, 1, 2, 1}, {-1.f, 1.f});
  Tensor out = standardize_weights(w);
  CHECK(out.data()[0] == doctest::Approx(-1).epsilon(1e-6));
  CHECK(out.data()[1] == doctest::Approx(1).epsilon(1e-6));
}

TEST_CASE("standardize_weights: constant channel damps to zero") {
  Tensor w({1, 1, 3, 1}, {4.f, 4.f, 4.f});
  Tensor out = standardize_weights(w);
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(out.data()[i]) < 1e-3);
}

TEST_CASE("grad_check through group_norm and weight standardization composition") {
  // The probe is a +-1 linear functional: a sum of squares would be blind to
  // upstream weights (normalized activations have constant energy), and
  // alternating unit weights keep gradient coordinates measurably large for
  // the fp32 difference quotient.
  Tensor x = random_tensor({2, 4, 4, 4}, 201);
  Tensor w = random_tensor({3, 3, 4, 4}, 202, -0.5, 0.5);
  Tensor gamma = random_tensor({4}, 203, 0.5, 1.5);
  Tensor beta = random_tensor({4}, 204);
  Tensor probe({2, 4, 4, 4});
  KeyStream pr({205});
  for (int64_t i = 0; i < probe.size(); ++i) probe.data()[i] = pr.next_bool() ? 1.f : -1.f;
  auto net = [&](const Tensor& tx, const Tensor& tw, const Tensor& tg) {
    Tensor h = conv2d(tx, standardize_weights(tw), Padding::same, 1);
    h = group_norm(h, 2, tg, beta);
    return sum_all(mul(h, probe));
  };
  // h = 1e-2: through the full conv chain the fp32 evaluation noise at
  // h = 1e-3 exceeds the quotient itself (error scales as 1/h here).
  CHECK(grad_check([&](const Tensor& t) { return net(t, w, gamma); }, x, 1e-2) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return net(x, t, gamma); }, w, 1e-2) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return net(x, w, t); }, gamma, 1e-2) < 1e-3);

  // the primitives alone meet the tolerance at the default h = 1e-3
  CHECK(grad_check([&](const Tensor& t) { return sum_all(mul(group_norm(t, 2, gamma, beta), probe)); },
                   x) < 1e-3);
  Tensor wprobe({3, 3, 4, 4});
  for (int64_t i = 0; i < wprobe.size(); ++i) wprobe.data()[i] = pr.next_bool() ? 1.f : -1.f;
  CHECK(grad_check([&](const Tensor& t) { return sum_all(mul(standardize_weights(t), wprobe)); }, w) <
        1e-3);
}

TEST_CASE("build_model: identical (spec, seed) gives bitwise identical parameters") {
  ModelSpec spec;  // default small-resnet
  spec.resolution = 16;
  Model a = build_model(spec, 7);
  Model b = build_model(spec, 7);
  REQUIRE(a.params.size() == b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].first == b.params[i].first);
    CHECK(std::memcmp(a.params[i].second.data(), b.params[i].second.data(),
                      sizeof(float) * size_t(a.params[i].second.size())) == 0);
  }
}

TEST_CASE("build_model: different seeds differ somewhere") {
  ModelSpec spec = desk_mlp_spec();
  Model a = build_model(spec, 1);
  Model b = build_model(spec, 2);
  bool any_diff = false;
  for (size_t i = 0; i < a.params.size() && !any_diff; ++i)
    any_diff = std::memcmp(a.params[i].second.data(), b.params[i].second.data(),
                           sizeof(float) * size_t(a.params[i].second.size())) != 0;
  CHECK(any_diff);
}

TEST_CASE("build_model: parameter names are unique") {
  ModelSpec spec;
  spec.resolution = 16;
  spec.depth = 8;
  spec.width = 2;
  Model m = build_model(spec, 3);
  for (size_t i = 0; i < m.params.size(); ++i)
    for (size_t j = i + 1; j < m.params.size(); ++j)
      CHECK(m.params[i].first != m.params[j].first);
}

TEST_CASE("build_model: invalid spec names the field") {
  ModelSpec spec = desk_mlp_spec();
  spec.classes = 1;
  try {
    build_model(spec, 1);
    FAIL("expected configuration error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
    CHECK(std::string(e.what()).find("classes") != std::string::npos);
  }
  spec = desk_mlp_spec();
  spec.resolution = 4;
  CHECK_THROWS_AS(build_model(spec, 1), Error);
}

TEST_CASE("forward: mlp produces [N, classes] logits") {
  Model m = build_model(desk_mlp_spec(), 1);
  Tensor batch = random_tensor({4, 8, 8, 1}, 60);
  Tensor logits = forward(m, batch);
  CHECK(logits.shape() == Shape{4, 10});
  for (int64_t i = 0; i < logits.size(); ++i) CHECK(std::isfinite(logits.data()[i]));
}

TEST_CASE("forward: resolution mismatch is a dimension error") {
  Model m = build_model(desk_mlp_spec(), 1);
  Tensor batch({2, 16, 16, 1});
  CHECK_THROWS_AS(forward(m, batch), Error);
}

TEST_CASE("forward: per-sample independence (row in isolation equals row in batch)") {
  ModelSpec spec;
  spec.kind = Arch::small_resnet;
  spec.depth = 3;
  spec.width = 1;
  spec.resolution = 8;
  spec.channels = 3;
  spec.classes = 5;
  Model m = build_model(spec, 9);
  Tensor batch = random_tensor({4, 8, 8, 3}, 61);
  Tensor all = forward(m, batch);
  const int64_t stride = 8 * 8 * 3;
  Tensor row2({1, 8, 8, 3},
              std::vector<float>(batch.data() + 2 * stride, batch.data() + 3 * stride));
  Tensor single = forward(m, row2);
  for (int j = 0; j < 5; ++j)
    CHECK(single.data()[j] == doctest::Approx(all.data()[2 * 5 + j]).epsilon(1e-5));
}

TEST_CASE("forward: permuting the batch permutes logits identically") {
  Model m = build_model(desk_mlp_spec(), 4);
  Tensor batch = random_tensor({3, 8, 8, 1}, 62);
  Tensor logits = forward(m, batch);
  const int64_t stride = 8 * 8;
  std::vector<float> permuted;
  for (int i : {2, 0, 1})
    permuted.insert(permuted.end(), batch.data() + i * stride, batch.data() + (i + 1) * stride);
  Tensor logits_p = forward(m, Tensor({3, 8, 8, 1}, permuted));
  const int order[3] = {2, 0, 1};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 10; ++j)
      CHECK(logits_p.data()[i * 10 + j] == doctest::Approx(logits.data()[order[i] * 10 + j]));
}

TEST_CASE("teacher forward allocates no gradients when parameters are frozen") {
  Model m = build_model(desk_mlp_spec(), 5);
  set_trainable(m, false);
  Tensor batch = random_tensor({2, 8, 8, 1}, 63);
  Tape tape;
  Tensor logits = forward(m, batch);
  CHECK(tape.op_count() == 0);
  for (auto& [name, t] : m.params) CHECK(!t.has_grad());
  (void)logits;
}

TEST_CASE("small-resnet trains end to end through the tape") {
  ModelSpec spec;
  spec.kind = Arch::small_resnet;
  spec.depth = 3;
  spec.width = 1;
  spec.resolution = 8;
  spec.channels = 3;
  spec.classes = 4;
  Model m = build_model(spec, 11);
  set_trainable(m, true);
  Tensor batch = random_tensor({2, 8, 8, 3}, 64);
  Tape tape;
  Tensor logits = forward(m, batch);
  Tensor loss = sum_all(mul(logits, logits));
  tape.backward(loss);
  bool any_nonzero = false;
  for (auto& [name, t] : m.params) {
    REQUIRE(t.has_grad());
    for (int64_t i = 0; i < t.size() && !any_nonzero; ++i) any_nonzero = t.grad()[i] != 0.f;
  }
  CHECK(any_nonzero);
}

TEST_CASE("effective_groups follows the channel fallback rule") {
  CHECK(effective_groups(16, 8) == 8);
  CHECK(effective_groups(8, 8) == 8);
  CHECK(effective_groups(4, 8) == 4);  // fewer channels than groups
  CHECK(effective_groups(2, 8) == 2);
  CHECK(effective_groups(12, 8) == 6);  // largest divisor <= 8
}
