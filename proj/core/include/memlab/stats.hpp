#pragma once

#include <span>
#include <vector>

namespace memlab::stats {

// Neumaier-compensated summation; order-deterministic.
class CompensatedSum {
 public:
  void add(double x);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

double mean(std::span<const double> xs);
// Population variance (divides by n). Zero for n == 1.
double variance(std::span<const double> xs);
// Unbiased sample variance (divides by n - 1). Requires n >= 2.
double sample_variance(std::span<const double> xs);
double stddev(std::span<const double> xs);

// Standard error of a proportion p estimated from n trials.
double binomial_se(double p, std::size_t n);

struct MannWhitneyResult {
  double u = 0.0;        // U statistic of the first sample
  double z = 0.0;        // normal approximation with tie correction
  double p_less = 0.0;   // one-sided p for H1: first sample tends to be smaller
  double p_greater = 0.0;
};

// Mann-Whitney U test with average ranks for ties and continuity correction.
MannWhitneyResult mann_whitney(std::span<const double> a, std::span<const double> b);

// Midranks (1-based) of `xs`.
std::vector<double> average_ranks(std::span<const double> xs);

double normal_cdf(double z);

}  // namespace memlab::stats
