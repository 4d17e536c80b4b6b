#pragma once

// Slow, independent reference computations used to cross-check the library.
// Nothing here calls into memlab numerics beyond plain data access.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <utility>
#include <vector>

#include "memlab/tensor.hpp"

namespace oracle {

inline double central_difference(const std::function<double()>& f, double& x, double h) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

// Mixed absolute/relative agreement used for finite-difference checks.
inline bool gradients_agree(double analytic, double numeric, double rel_tol, double abs_floor = 1e-9) {
  const double diff = std::fabs(analytic - numeric);
  if (diff < abs_floor) return true;
  return diff / std::max(std::fabs(analytic), std::fabs(numeric)) < rel_tol;
}

inline memlab::Tensor naive_matmul(const memlab::Tensor& a, const memlab::Tensor& b) {
  memlab::Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

// P(member > nonmember) + 0.5 P(tie) by counting all pairs.
inline double pairwise_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0.0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

// One-sided p-value for "a tends to be smaller than b": U counted pairwise,
// normal approximation with tie correction and continuity correction.
inline double mann_whitney_p_less(const std::vector<double>& a, const std::vector<double>& b) {
  const double n1 = static_cast<double>(a.size());
  const double n2 = static_cast<double>(b.size());
  double u = 0.0;
  for (double x : a)
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  std::vector<double> all(a);
  all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  double tie_term = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j] == all[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double n = n1 + n2;
  const double mean = n1 * n2 / 2.0;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  const double z = (u - mean + 0.5) / std::sqrt(var);
  return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

inline double sample_cov(const std::vector<double>& y, const std::vector<double>& u) {
  const double n = static_cast<double>(y.size());
  double my = 0.0, mu = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    my += y[k];
    mu += u[k];
  }
  my /= n;
  mu /= n;
  double s = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) s += (y[k] - my) * (u[k] - mu);
  return s / (n - 1.0);
}

// Top principal directions by power iteration with deflation.
struct PowerPca {
  std::vector<std::vector<double>> components;
  std::vector<double> eigenvalues;
  double total_variance = 0.0;
};

inline PowerPca power_pca(const memlab::Tensor& x, std::size_t k, int iterations = 5000) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += x(r, c) / static_cast<double>(n);
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        cov[i][j] += (x(r, i) - mean[i]) * (x(r, j) - mean[j]) / static_cast<double>(n - 1);
  PowerPca out;
  for (std::size_t i = 0; i < d; ++i) out.total_variance += cov[i][i];
  for (std::size_t comp = 0; comp < k; ++comp) {
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i * (comp + 1) % 7);
    double lambda = 0.0;
    for (int it = 0; it < iterations; ++it) {
      std::vector<double> w(d, 0.0);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) w[i] += cov[i][j] * v[j];
      for (const auto& prev : out.components) {
        const double p = std::inner_product(w.begin(), w.end(), prev.begin(), 0.0);
        for (std::size_t i = 0; i < d; ++i) w[i] -= p * prev[i];
      }
      const double norm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
      if (norm == 0.0) break;
      for (std::size_t i = 0; i < d; ++i) v[i] = w[i] / norm;
      lambda = norm;
    }
    out.components.push_back(v);
    out.eigenvalues.push_back(lambda);
  }
  return out;
}

}  // namespace oracle
