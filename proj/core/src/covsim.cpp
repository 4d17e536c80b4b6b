#include "memlab/covsim.hpp"

#include <cmath>

#include "memlab/errors.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"
#include "memlab/stats.hpp"

namespace memlab::covsim {

void CovSimConfig::validate() const {
  if (d1 < 1 || d2 < 1) throw ConfigError("covsim dimensions must be >= 1");
  if (batch < 2) throw ConfigError("covsim batch B must be >= 2");
  if (trials < 1) throw ConfigError("covsim trials must be >= 1");
  auto check = [](const std::vector<double>& v, std::size_t d, const char* name, bool positive) {
    if (!v.empty() && v.size() != d) throw ConfigError(std::string("covsim.") + name + " has the wrong length");
    for (double x : v) {
      if (!std::isfinite(x) || (positive && x <= 0.0)) {
        throw ConfigError(std::string("covsim.") + name + " entries must be finite" + (positive ? " and > 0" : ""));
      }
    }
  };
  check(mu1, d1, "mu1", false);
  check(mu2, d2, "mu2", false);
  check(sigma1, d1, "sigma1", true);
  check(sigma2, d2, "sigma2", true);
  for (double k : t_multipliers) {
    if (!(k > 0.0)) throw ConfigError("covsim.t_multipliers must be > 0");
  }
}

void to_json(nlohmann::json& j, const CovSimConfig& c) {
  j = nlohmann::json{{"d1", c.d1},
                     {"d2", c.d2},
                     {"mu1", c.mu1},
                     {"mu2", c.mu2},
                     {"sigma1", c.sigma1},
                     {"sigma2", c.sigma2},
                     {"batch", c.batch},
                     {"trials", c.trials},
                     {"t_multipliers", c.t_multipliers},
                     {"threshold_mode", c.threshold_mode == ThresholdMode::Absolute ? "absolute" : "relative"},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CovSimConfig& c) {
  c.d1 = j.value("d1", c.d1);
  c.d2 = j.value("d2", c.d2);
  c.mu1 = j.value("mu1", c.mu1);
  c.mu2 = j.value("mu2", c.mu2);
  c.sigma1 = j.value("sigma1", c.sigma1);
  c.sigma2 = j.value("sigma2", c.sigma2);
  c.batch = j.value("batch", c.batch);
  c.trials = j.value("trials", c.trials);
  c.t_multipliers = j.value("t_multipliers", c.t_multipliers);
  if (j.contains("threshold_mode")) {
    const auto m = j.at("threshold_mode").get<std::string>();
    if (m == "absolute") {
      c.threshold_mode = ThresholdMode::Absolute;
    } else if (m == "relative") {
      c.threshold_mode = ThresholdMode::Relative;
    } else {
      throw ConfigError("covsim.threshold_mode must be absolute or relative");
    }
  }
  c.seed = j.value("seed", c.seed);
}

Tensor sample_covariance(const Tensor& y, const Tensor& u) {
  if (y.rank() != 2 || u.rank() != 2 || y.rows() != u.rows()) {
    throw DimensionError("sample_covariance: " + y.shape_string() + " vs " + u.shape_string());
  }
  const std::size_t b = y.rows();
  if (b < 2) throw ContractError("sample_covariance needs B >= 2");
  std::vector<double> ym(y.cols(), 0.0), um(u.cols(), 0.0);
  for (std::size_t k = 0; k < b; ++k) {
    for (std::size_t i = 0; i < y.cols(); ++i) ym[i] += y(k, i);
    for (std::size_t j = 0; j < u.cols(); ++j) um[j] += u(k, j);
  }
  for (double& v : ym) v /= static_cast<double>(b);
  for (double& v : um) v /= static_cast<double>(b);
  Tensor cov({y.cols(), u.cols()});
  for (std::size_t i = 0; i < y.cols(); ++i) {
    for (std::size_t j = 0; j < u.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b; ++k) s += (y(k, i) - ym[i]) * (u(k, j) - um[j]);
      cov(i, j) = s / static_cast<double>(b - 1);
    }
  }
  return cov;
}

double variance_bound(double sigma_y, double sigma_u, std::size_t batch) {
  if (batch < 2) throw ContractError("variance_bound needs B >= 2");
  return 3.0 * sigma_y * sigma_y * sigma_u * sigma_u / static_cast<double>(batch - 1);
}

double chebyshev_bound(double sigma_y, double sigma_u, std::size_t batch, double t) {
  if (!(t > 0.0)) throw ContractError("chebyshev_bound needs t > 0");
  const double b = variance_bound(sigma_y, sigma_u, batch) / (t * t);
  return std::min(1.0, b);
}

namespace {

double tail_fraction(const std::vector<double>& values, double t) {
  std::size_t hits = 0;
  for (double v : values) hits += std::fabs(v) >= t ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(values.size());
}

}  // namespace

CovStats run_mc(const CovSimConfig& config) {
  config.validate();
  const std::size_t b = config.batch;
  const std::size_t n_entries = config.d1 * config.d2;
  CovStats out;
  out.config = config;
  out.values.assign(n_entries, std::vector<double>(config.trials));
  // Per-sample products of the first two rows, for the xi estimate.
  std::vector<std::vector<double>> x1(n_entries, std::vector<double>(config.trials));
  std::vector<std::vector<double>> x2(n_entries, std::vector<double>(config.trials));
  parallel_for(config.trials, [&](std::size_t t) {
    Rng rng(config.seed, "covsim-trial", (static_cast<std::uint64_t>(b) << 40) ^ t);
    Tensor y({b, config.d1});
    Tensor u({b, config.d2});
    for (std::size_t k = 0; k < b; ++k) {
      for (std::size_t i = 0; i < config.d1; ++i) y(k, i) = rng.normal(config.mu_y(i), config.sigma_y(i));
      for (std::size_t j = 0; j < config.d2; ++j) u(k, j) = rng.normal(config.mu_u(j), config.sigma_u(j));
    }
    const Tensor cov = sample_covariance(y, u);
    std::vector<double> ym(config.d1, 0.0), um(config.d2, 0.0);
    for (std::size_t k = 0; k < b; ++k) {
      for (std::size_t i = 0; i < config.d1; ++i) ym[i] += y(k, i) / static_cast<double>(b);
      for (std::size_t j = 0; j < config.d2; ++j) um[j] += u(k, j) / static_cast<double>(b);
    }
    for (std::size_t i = 0; i < config.d1; ++i) {
      for (std::size_t j = 0; j < config.d2; ++j) {
        const std::size_t e = i * config.d2 + j;
        out.values[e][t] = cov(i, j);
        x1[e][t] = (y(0, i) - ym[i]) * (u(0, j) - um[j]);
        x2[e][t] = (y(1, i) - ym[i]) * (u(1, j) - um[j]);
      }
    }
  });
  for (std::size_t i = 0; i < config.d1; ++i) {
    for (std::size_t j = 0; j < config.d2; ++j) {
      const std::size_t e = i * config.d2 + j;
      EntryStats es;
      es.i = i;
      es.j = j;
      es.mean = stats::mean(out.values[e]);
      es.variance = config.trials > 1 ? stats::sample_variance(out.values[e]) : 0.0;
      es.bound = variance_bound(config.sigma_y(i), config.sigma_u(j), b);
      if (config.trials > 1) {
        const double m1 = stats::mean(x1[e]);
        const double m2 = stats::mean(x2[e]);
        stats::CompensatedSum acc;
        for (std::size_t t = 0; t < config.trials; ++t) acc.add((x1[e][t] - m1) * (x2[e][t] - m2));
        es.xi = acc.value() / static_cast<double>(config.trials - 1);
      }
      for (double k : config.t_multipliers) {
        const double scale = config.threshold_mode == ThresholdMode::Absolute
                                 ? config.sigma_y(i) * config.sigma_u(j)
                                 : std::sqrt(es.variance);
        TailStat ts;
        ts.multiplier = k;
        ts.t = k * scale;
        ts.empirical = ts.t > 0.0 ? tail_fraction(out.values[e], ts.t) : 1.0;
        ts.bound = ts.t > 0.0 ? chebyshev_bound(config.sigma_y(i), config.sigma_u(j), b, ts.t) : 1.0;
        es.tails.push_back(ts);
      }
      out.entries.push_back(std::move(es));
    }
  }
  return out;
}

TailResult chebyshev_tail(const CovStats& stats, std::size_t i, std::size_t j, double t) {
  if (!(t > 0.0)) throw ContractError("chebyshev_tail needs t > 0");
  if (i >= stats.config.d1 || j >= stats.config.d2) throw ContractError("chebyshev_tail: entry out of range");
  const auto& v = stats.values.at(i * stats.config.d2 + j);
  return TailResult{tail_fraction(v, t),
                    chebyshev_bound(stats.config.sigma_y(i), stats.config.sigma_u(j), stats.config.batch, t)};
}

double pooled_tail(const CovStats& stats, double multiplier) {
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < stats.config.d1; ++i) {
    for (std::size_t j = 0; j < stats.config.d2; ++j) {
      const double t = multiplier * stats.config.sigma_y(i) * stats.config.sigma_u(j);
      for (double v : stats.values[i * stats.config.d2 + j]) hits += std::fabs(v) >= t ? 1 : 0;
      total += stats.values[i * stats.config.d2 + j].size();
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace memlab::covsim
