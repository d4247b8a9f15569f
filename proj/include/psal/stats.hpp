#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace psal {

double mean_of(const std::vector<double>& v);
/// Population standard deviation.
double std_of(const std::vector<double>& v);

/// Ranks starting at 1; tied values share the average of their ranks.
std::vector<double> average_ranks(const std::vector<double>& v);
/// Pearson correlation of average ranks. Returns 0 when either side is constant.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct SignTest {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t ties = 0;    // dropped before testing
  double p_value = 1.0;    // exact two-sided binomial(n, 1/2)
  double p_greater = 1.0;  // one-sided: P(X >= positive)
};

/// Sign test on paired differences d_i.
SignTest sign_test(const std::vector<double>& differences);

struct ConfidenceInterval {
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

/// Percentile bootstrap interval for the mean.
ConfidenceInterval bootstrap_mean_ci(const std::vector<double>& values, std::size_t resamples = 1000,
                                     double level = 0.95, std::uint64_t seed = 0);

}  // namespace psal
