#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "funmatch/common.hpp"

namespace funmatch {

// Dense row-major kernels. Loop orders are chosen so the innermost loop
// runs over contiguous memory and auto-vectorizes.

// C[M,N] = A[M,K] * B[K,N]   (C += ... when accumulate)
inline void gemm_nn(int m, int n, int k, const float* a, const float* b, float* c,
                    bool accumulate = false) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * size_t(m) * size_t(n));
  for (int i = 0; i < m; ++i) {
    const float* arow = a + size_t(i) * k;
    float* crow = c + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] = A[M,K] * B[N,K]^T
inline void gemm_nt(int m, int n, int k, const float* a, const float* b, float* c,
                    bool accumulate = false) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + size_t(i) * k;
    float* crow = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + size_t(j) * k;
      float s = 0.f;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

// C[M,N] = A[K,M]^T * B[K,N]
inline void gemm_tn(int m, int n, int k, const float* a, const float* b, float* c,
                    bool accumulate = false) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * size_t(m) * size_t(n));
  for (int p = 0; p < k; ++p) {
    const float* arow = a + size_t(p) * m;
    const float* brow = b + size_t(p) * n;
    for (int i = 0; i < m; ++i) {
      const float av = arow[i];
      float* crow = c + size_t(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix, in double for
// stability. On return `a` holds leftover off-diagonal junk, `eigvals[j]`
// and column j of `eigvecs` the j-th eigenpair. Intended for n <= 128.
inline void sym_eig(std::vector<double> a, int n, std::vector<double>& eigvals,
                    std::vector<double>& eigvecs) {
  eigvecs.assign(size_t(n) * n, 0.0);
  for (int i = 0; i < n; ++i) eigvecs[size_t(i) * n + i] = 1.0;
  eigvals.resize(n);
  if (n == 1) {
    eigvals[0] = a[0];
    return;
  }

  auto at = [&](int i, int j) -> double& { return a[size_t(i) * n + j]; };
  auto vt = [&](int i, int j) -> double& { return eigvecs[size_t(i) * n + j]; };

  double scale = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) scale = std::max(scale, std::fabs(at(i, j)));
  const double tol = (scale > 0 ? scale : 1.0) * 1e-14;

  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off = std::max(off, std::fabs(at(i, j)));
    if (off <= tol) break;

    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (std::fabs(apq) <= tol * 1e-3) continue;
        const double app = at(p, p), aqq = at(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double cos_r = 1.0 / std::sqrt(t * t + 1.0);
        const double sin_r = t * cos_r;

        for (int i = 0; i < n; ++i) {
          const double aip = at(i, p), aiq = at(i, q);
          at(i, p) = cos_r * aip - sin_r * aiq;
          at(i, q) = sin_r * aip + cos_r * aiq;
        }
        for (int i = 0; i < n; ++i) {
          const double api = at(p, i), aqi = at(q, i);
          at(p, i) = cos_r * api - sin_r * aqi;
          at(q, i) = sin_r * api + cos_r * aqi;
        }
        for (int i = 0; i < n; ++i) {
          const double vip = vt(i, p), viq = vt(i, q);
          vt(i, p) = cos_r * vip - sin_r * viq;
          vt(i, q) = sin_r * vip + cos_r * viq;
        }
      }
    }
  }
  for (int i = 0; i < n; ++i) eigvals[i] = at(i, i);
}

// B = V * diag(f(lambda)) * V^T, returned as float row-major.
template <typename F>
inline std::vector<float> sym_eig_apply(const std::vector<double>& eigvals,
                                        const std::vector<double>& eigvecs, int n, F f) {
  std::vector<double> scaled(size_t(n) * n);  // V * diag(f)
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) scaled[size_t(i) * n + j] = eigvecs[size_t(i) * n + j] * f(eigvals[j]);
  std::vector<float> out(size_t(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = 0.0;
      for (int p = 0; p < n; ++p) s += scaled[size_t(i) * n + p] * eigvecs[size_t(j) * n + p];
      out[size_t(i) * n + j] = float(s);
      out[size_t(j) * n + i] = float(s);
    }
  }
  return out;
}

}  // namespace funmatch
