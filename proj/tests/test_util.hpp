#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace abflow::testing {

/// Composite Simpson rule on [a, b] with n (even) intervals.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n = 20000) {
  double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

/// Kolmogorov-Smirnov statistic of `samples` against a density on [a, b],
/// with the CDF built by cumulative trapezoid on a fine grid.
inline double ks_statistic(std::vector<double> samples, const std::function<double(double)>& density, double a,
                           double b, int grid = 200000) {
  std::vector<double> xs(static_cast<std::size_t>(grid) + 1), cdf(xs.size());
  double h = (b - a) / grid, prev = density(a);
  xs[0] = a;
  cdf[0] = 0.0;
  for (int i = 1; i <= grid; ++i) {
    xs[static_cast<std::size_t>(i)] = a + i * h;
    double cur = density(a + i * h);
    cdf[static_cast<std::size_t>(i)] = cdf[static_cast<std::size_t>(i) - 1] + 0.5 * h * (prev + cur);
    prev = cur;
  }
  double total = cdf.back();
  auto F = [&](double x) {
    if (x <= a) return 0.0;
    if (x >= b) return 1.0;
    double pos = (x - a) / h;
    auto i = static_cast<std::size_t>(pos);
    if (i >= static_cast<std::size_t>(grid)) return 1.0;
    double fr = pos - static_cast<double>(i);
    return (cdf[i] + fr * (cdf[i + 1] - cdf[i])) / total;
  };
  std::sort(samples.begin(), samples.end());
  double n = static_cast<double>(samples.size()), d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double f = F(samples[i]);
    d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - f)});
  }
  return d;
}

/// Two-sample KS statistic.
inline double ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0, na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  while (i < a.size() && j < b.size()) {
    double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

/// |a - b| / max(|a|, |b|, floor)
inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace abflow::testing
