#include "memlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "memlab/errors.hpp"

namespace memlab::stats {

void CompensatedSum::add(double x) {
  const double t = sum_ + x;
  if (std::abs(sum_) >= std::abs(x)) {
    comp_ += (sum_ - t) + x;
  } else {
    comp_ += (x - t) + sum_;
  }
  sum_ = t;
}

double mean(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("mean of empty sample");
  CompensatedSum s;
  for (double x : xs) s.add(x);
  return s.value() / static_cast<double>(xs.size());
}

namespace {
double sum_sq_dev(std::span<const double> xs) {
  const double m = mean(xs);
  CompensatedSum s;
  for (double x : xs) s.add((x - m) * (x - m));
  return s.value();
}
}  // namespace

double variance(std::span<const double> xs) {
  return sum_sq_dev(xs) / static_cast<double>(xs.size());
}

double sample_variance(std::span<const double> xs) {
  if (xs.size() < 2) throw ContractError("sample variance needs at least two values");
  return sum_sq_dev(xs) / static_cast<double>(xs.size() - 1);
}

double stddev(std::span<const double> xs) { return std::sqrt(variance(xs)); }

double binomial_se(double p, std::size_t n) {
  if (n == 0) throw ContractError("binomial_se with n = 0");
  return std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

MannWhitneyResult mann_whitney(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractError("mann_whitney needs two non-empty samples");
  std::vector<double> all(a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  const auto ranks = average_ranks(all);
  const double n1 = static_cast<double>(a.size());
  const double n2 = static_cast<double>(b.size());
  double r1 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) r1 += ranks[i];

  MannWhitneyResult res;
  res.u = r1 - n1 * (n1 + 1.0) / 2.0;

  // Tie correction for the variance.
  std::vector<double> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double n = n1 + n2;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  const double mu = n1 * n2 / 2.0;
  if (var <= 0.0) {
    res.p_less = res.p_greater = 1.0;
    return res;
  }
  const double sd = std::sqrt(var);
  res.z = (res.u - mu) / sd;
  res.p_less = normal_cdf((res.u - mu + 0.5) / sd);
  res.p_greater = 1.0 - normal_cdf((res.u - mu - 0.5) / sd);
  return res;
}

}  // namespace memlab::stats
