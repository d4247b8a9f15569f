#include "psal/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "psal/error.hpp"

namespace psal {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw ConfigError("mean of an empty sample");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw ConfigError("spearman needs two equal-length non-empty samples");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double ma = mean_of(ra), mb = mean_of(rb);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ab += (ra[i] - ma) * (rb[i] - mb);
    aa += (ra[i] - ma) * (ra[i] - ma);
    bb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

namespace {

// log C(n, k) via lgamma; exact enough for n up to millions.
double log_choose(std::size_t n, std::size_t k) {
  return std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
         std::lgamma(static_cast<double>(n - k) + 1);
}

double binom_upper_tail(std::size_t n, std::size_t k) {
  double p = 0.0;
  for (std::size_t i = k; i <= n; ++i) p += std::exp(log_choose(n, i) - static_cast<double>(n) * std::log(2.0));
  return std::min(1.0, p);
}

}  // namespace

SignTest sign_test(const std::vector<double>& d) {
  SignTest t;
  for (double x : d) {
    if (x > 0) ++t.positive;
    else if (x < 0) ++t.negative;
    else ++t.ties;
  }
  const std::size_t n = t.positive + t.negative;
  if (n == 0) return t;
  const std::size_t extreme = std::max(t.positive, t.negative);
  t.p_value = std::min(1.0, 2.0 * binom_upper_tail(n, extreme));
  if (t.positive == t.negative) t.p_value = 1.0;
  t.p_greater = binom_upper_tail(n, t.positive);
  return t;
}

ConfidenceInterval bootstrap_mean_ci(const std::vector<double>& values, std::size_t resamples, double level,
                                     std::uint64_t seed) {
  if (values.empty()) throw ConfigError("bootstrap of an empty sample");
  if (resamples == 0 || !(level > 0 && level < 1)) throw ConfigError("bootstrap needs resamples > 0 and level in (0,1)");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  auto at = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, resamples - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  return {mean_of(values), at(alpha), at(1.0 - alpha)};
}

}  // namespace psal
