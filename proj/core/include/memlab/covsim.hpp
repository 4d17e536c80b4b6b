#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "memlab/tensor.hpp"

namespace memlab::covsim {

enum class ThresholdMode {
  Absolute,  // t = k * sigma_y_i * sigma_u_j, fixed across batch sizes
  Relative,  // t = k * sqrt(empirical Var(Cov_ij)) at the given B
};

struct CovSimConfig {
  std::size_t d1 = 4;
  std::size_t d2 = 4;
  std::vector<double> mu1;     // empty: zeros
  std::vector<double> mu2;
  std::vector<double> sigma1;  // empty: ones
  std::vector<double> sigma2;
  std::size_t batch = 8;
  std::size_t trials = 20000;
  std::vector<double> t_multipliers{0.5, 1.0, 2.0};
  ThresholdMode threshold_mode = ThresholdMode::Absolute;
  std::uint64_t seed = 1;

  void validate() const;
  double mu_y(std::size_t i) const { return mu1.empty() ? 0.0 : mu1[i]; }
  double mu_u(std::size_t j) const { return mu2.empty() ? 0.0 : mu2[j]; }
  double sigma_y(std::size_t i) const { return sigma1.empty() ? 1.0 : sigma1[i]; }
  double sigma_u(std::size_t j) const { return sigma2.empty() ? 1.0 : sigma2[j]; }
};

void to_json(nlohmann::json& j, const CovSimConfig& c);
void from_json(const nlohmann::json& j, CovSimConfig& c);

// Unbiased sample cross-covariance of the columns of y [B, d1] and u [B, d2].
Tensor sample_covariance(const Tensor& y, const Tensor& u);

double variance_bound(double sigma_y, double sigma_u, std::size_t batch);
// min(1, 3 sy^2 su^2 / ((B - 1) t^2)).
double chebyshev_bound(double sigma_y, double sigma_u, std::size_t batch, double t);

struct TailStat {
  double multiplier = 0.0;
  double t = 0.0;
  double empirical = 0.0;
  double bound = 0.0;
};

struct EntryStats {
  std::size_t i = 0;
  std::size_t j = 0;
  double mean = 0.0;
  double variance = 0.0;  // unbiased, across trials
  double bound = 0.0;
  double xi = 0.0;        // empirical Cov(X_1, X_2) of the per-sample products
  std::vector<TailStat> tails;
};

struct CovStats {
  CovSimConfig config;
  std::vector<EntryStats> entries;          // row-major over (i, j)
  std::vector<std::vector<double>> values;  // per entry, one value per trial

  const EntryStats& entry(std::size_t i, std::size_t j) const { return entries.at(i * config.d2 + j); }
};

CovStats run_mc(const CovSimConfig& config);

struct TailResult {
  double empirical = 0.0;
  double bound = 0.0;
};

// Empirical P(|Cov_ij| >= t) over the stored trials, with the clipped bound.
TailResult chebyshev_tail(const CovStats& stats, std::size_t i, std::size_t j, double t);

// Fraction of all (entry, trial) values with |Cov_ij| >= k * sy_i * su_j.
double pooled_tail(const CovStats& stats, double multiplier);

}  // namespace memlab::covsim
