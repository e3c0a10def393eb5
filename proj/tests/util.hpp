#pragma once

// Shared test scaffolding: independent oracles and the finite-difference
// gradient harness. Oracles here are written from first principles on purpose —
// they must not reuse library code paths they are checking.

#include <catch_amalgamated.hpp>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rgnn/matrix.hpp"

namespace testutil {

inline std::mt19937_64 rng(uint64_t seed) { return std::mt19937_64(seed); }

inline rgnn::DenseMatrix random_matrix(int r, int c, std::mt19937_64& g, float lo = -1.0f,
                                       float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  rgnn::DenseMatrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m.at(i, j) = u(g);
  return m;
}

// Independent matmul oracle: plain ijk triple loop, double accumulator.
inline rgnn::DenseMatrix matmul_oracle(const rgnn::DenseMatrix& a,
                                       const rgnn::DenseMatrix& b) {
  rgnn::DenseMatrix out(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols(); ++k) acc += double(a.at(i, k)) * double(b.at(k, j));
      out.at(i, j) = static_cast<float>(acc);
    }
  return out;
}

// Central finite difference of a scalar function w.r.t. one float slot.
template <class F>
double central_diff(float* slot, double h, F&& eval) {
  const float orig = *slot;
  *slot = static_cast<float>(orig + h);
  const double fp = eval();
  *slot = static_cast<float>(orig - h);
  const double fm = eval();
  *slot = orig;
  return (fp - fm) / (2.0 * h);
}

// Gradient check predicate: relative error < rtol with a small absolute guard
// for entries at the float32 finite-difference noise floor.
inline bool grad_close(double fd, double an, double rtol = 1e-3, double atol = 1e-4) {
  const double scale = std::max(std::abs(fd), std::abs(an));
  return std::abs(fd - an) <= std::max(rtol * scale, atol);
}

// Checks every entry of every parameter matrix against central differences.
// `eval` recomputes the scalar loss from the current parameter buffers.
inline void check_gradients(std::vector<std::pair<rgnn::DenseMatrix*, const rgnn::DenseMatrix*>>
                                params_and_grads,
                            const std::function<double()>& eval, double h = 1e-3,
                            double rtol = 1e-3, double atol = 1e-4) {
  for (auto& [param, grad] : params_and_grads) {
    REQUIRE(param->rows() == grad->rows());
    REQUIRE(param->cols() == grad->cols());
    for (int i = 0; i < param->rows(); ++i)
      for (int j = 0; j < param->cols(); ++j) {
        const double fd = central_diff(&param->at(i, j), h, eval);
        const double an = grad->at(i, j);
        INFO("entry (" << i << "," << j << ") fd=" << fd << " analytic=" << an);
        REQUIRE(grad_close(fd, an, rtol, atol));
      }
  }
}

// Sample statistics used by the statistical oracles.
struct Moments {
  double mean = 0.0, var = 0.0, skew = 0.0;
  long n = 0;
};

inline Moments moments(const std::vector<double>& xs) {
  Moments m;
  m.n = static_cast<long>(xs.size());
  if (m.n == 0) return m;
  double s = 0.0;
  for (double x : xs) s += x;
  m.mean = s / m.n;
  double v = 0.0, c3 = 0.0;
  for (double x : xs) {
    const double d = x - m.mean;
    v += d * d;
    c3 += d * d * d;
  }
  m.var = m.n > 1 ? v / (m.n - 1) : 0.0;
  const double sd = std::sqrt(v / m.n);
  m.skew = sd > 0.0 ? (c3 / m.n) / (sd * sd * sd) : 0.0;
  return m;
}

// Standard normal CDF and its inverse (bisection on erfc; plenty for tests).
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double norm_quantile(double p) {
  double lo = -12.0, hi = 12.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (norm_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace testutil
