#pragma once

// Statistical utilities: CLT confidence intervals, one- and two-sample
// Kolmogorov-Smirnov tests with asymptotic critical values, normal helpers,
// and a small symmetric eigenvalue solver for PSD checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "driftlab/errors.hpp"

namespace driftlab {

// Reject verdicts are suppressed below this many samples; asymptotic
// critical values are unreliable in the small-sample regime.
inline constexpr std::size_t kKsMinSamples = 100;

inline double normal_cdf(double x, double mu = 0.0, double sigma = 1.0) {
  require(sigma > 0.0, Errc::invalid_parameter, "normal_cdf: sigma must be > 0");
  const double z = (x - mu) / sigma;
  return 0.5 * std::erfc(-z / 1.4142135623730950488);
}

// Acklam's rational approximation, refined with one Halley step; relative
// error well below 1e-9 over (0, 1).
inline double normal_quantile(double p) {
  require(p > 0.0 && p < 1.0, Errc::invalid_parameter,
          "normal_quantile: p must be in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley refinement against the erfc-based CDF.
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * 3.14159265358979323846) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

inline double z_for_level(double level) {
  require(level > 0.0 && level < 1.0, Errc::invalid_parameter,
          "confidence level must be in (0,1)");
  return normal_quantile(0.5 + level / 2.0);
}

struct CI {
  double mean = 0.0;
  double halfwidth = 0.0;
  double level = 0.95;
  std::size_t n = 0;

  double lo() const { return mean - halfwidth; }
  double hi() const { return mean + halfwidth; }
};

// Deterministic fixed-order summation: pooled results are bit-identical for
// a given sample order regardless of thread count upstream.
inline double fixed_order_sum(std::span<const double> xs) {
  double acc = 0.0;
  for (double x : xs) acc += x;
  return acc;
}

inline double sample_mean(std::span<const double> xs) {
  require(!xs.empty(), Errc::insufficient_samples, "mean of empty sample");
  return fixed_order_sum(xs) / static_cast<double>(xs.size());
}

inline double sample_sd(std::span<const double> xs) {
  require(xs.size() >= 2, Errc::insufficient_samples, "sd needs n >= 2");
  const double m = sample_mean(xs);
  double acc = 0.0;
  for (double x : xs) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

inline CI mean_ci(std::span<const double> xs, double level = 0.95) {
  require(xs.size() >= 2, Errc::insufficient_samples, "mean_ci needs n >= 2");
  const double m = sample_mean(xs);
  const double sd = sample_sd(xs);
  const double z = z_for_level(level);
  return CI{m, z * sd / std::sqrt(static_cast<double>(xs.size())), level, xs.size()};
}

struct KsResult {
  double statistic = 0.0;
  double critical = 0.0;
  bool reject = false;
  std::size_t n = 0;
  std::size_t m = 0;
};

// Asymptotic critical coefficient c(alpha) = sqrt(-ln(alpha/2)/2);
// c(0.01) = 1.628.
inline double ks_critical_coef(double alpha) {
  require(alpha > 0.0 && alpha < 1.0, Errc::invalid_parameter,
          "ks alpha must be in (0,1)");
  return std::sqrt(-0.5 * std::log(alpha / 2.0));
}

inline KsResult ks_two_sample(std::span<const double> a, std::span<const double> b,
                              double alpha = 0.01) {
  require(!a.empty() && !b.empty(), Errc::insufficient_samples,
          "ks_two_sample: empty input");
  std::vector<double> sa(a.begin(), a.end());
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const double na = static_cast<double>(sa.size());
  const double nb = static_cast<double>(sb.size());
  double stat = 0.0;
  std::size_t i = 0, j = 0;
  while (i < sa.size() && j < sb.size()) {
    const double x = std::min(sa[i], sb[j]);
    while (i < sa.size() && sa[i] <= x) ++i;
    while (j < sb.size() && sb[j] <= x) ++j;
    stat = std::max(stat, std::abs(static_cast<double>(i) / na -
                                   static_cast<double>(j) / nb));
  }
  KsResult r;
  r.statistic = stat;
  r.n = sa.size();
  r.m = sb.size();
  r.critical = ks_critical_coef(alpha) * std::sqrt((na + nb) / (na * nb));
  r.reject = stat > r.critical && std::min(r.n, r.m) >= kKsMinSamples;
  return r;
}

inline KsResult ks_normal(std::span<const double> xs, double mu, double sigma,
                          double alpha = 0.01) {
  require(!xs.empty(), Errc::insufficient_samples, "ks_normal: empty input");
  require(sigma > 0.0, Errc::invalid_parameter, "ks_normal: sigma must be > 0");
  std::vector<double> s(xs.begin(), xs.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double stat = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double f = normal_cdf(s[i], mu, sigma);
    stat = std::max(stat, std::max((static_cast<double>(i) + 1.0) / n - f,
                                   f - static_cast<double>(i) / n));
  }
  KsResult r;
  r.statistic = stat;
  r.n = s.size();
  r.m = 0;
  r.critical = ks_critical_coef(alpha) / std::sqrt(n);
  r.reject = stat > r.critical && r.n >= kKsMinSamples;
  return r;
}

inline double sample_corr(std::span<const double> xs, std::span<const double> ys) {
  require(xs.size() == ys.size() && xs.size() >= 2, Errc::insufficient_samples,
          "sample_corr needs two equal samples with n >= 2");
  const double mx = sample_mean(xs);
  const double my = sample_mean(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0.0 && syy > 0.0, Errc::insufficient_samples,
          "sample_corr: degenerate sample");
  return sxy / std::sqrt(sxx * syy);
}

// Eigenvalues of a small symmetric matrix (row-major d x d) by cyclic Jacobi.
inline std::vector<double> sym_eigenvalues(std::vector<double> m, std::size_t d) {
  require(m.size() == d * d, Errc::invalid_parameter, "sym_eigenvalues: shape");
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) off += m[p * d + q] * m[p * d + q];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = m[p * d + q];
        if (std::abs(apq) < 1e-18) continue;
        const double theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double mkp = m[k * d + p];
          const double mkq = m[k * d + q];
          m[k * d + p] = c * mkp - s * mkq;
          m[k * d + q] = s * mkp + c * mkq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double mpk = m[p * d + k];
          const double mqk = m[q * d + k];
          m[p * d + k] = c * mpk - s * mqk;
          m[q * d + k] = s * mpk + c * mqk;
        }
      }
    }
  }
  std::vector<double> eig(d);
  for (std::size_t i = 0; i < d; ++i) eig[i] = m[i * d + i];
  std::sort(eig.begin(), eig.end());
  return eig;
}

}  // namespace driftlab
