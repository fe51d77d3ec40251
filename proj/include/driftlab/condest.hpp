#pragma once

// Bundle-based estimators of stopping functionals: cadlag-adjusted
// conditional expectation, conditional variance, conditional covariance,
// relative second moment, and centred variants, all evaluated at a stopping
// rule realized per continuation. Values at stops are the cadlag-adjusted
// X_{T-} via left_limit_at_stop. Conditional variance and covariance use the
// biased 1/M normalization, which keeps the partition property exact at
// sample level.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "driftlab/errors.hpp"
#include "driftlab/paths.hpp"
#include "driftlab/processes.hpp"
#include "driftlab/stopping.hpp"

namespace driftlab {

struct MomentKind {
  enum class Kind {
    cond_exp,
    cond_var,
    cond_cov,
    rel_second_moment,
    projected_centre,
    integrated_drift_centre,
  };

  Kind kind = Kind::cond_exp;
  double projected_slope = 0.0;  // B_S for projected_centre
  Adaptation drift_integrand;    // b for integrated_drift_centre

  static MomentKind cond_exp() { return {Kind::cond_exp, 0.0, {}}; }
  static MomentKind cond_var() { return {Kind::cond_var, 0.0, {}}; }
  static MomentKind cond_cov() { return {Kind::cond_cov, 0.0, {}}; }
  static MomentKind rel_second_moment() { return {Kind::rel_second_moment, 0.0, {}}; }
  static MomentKind projected_centre(double slope) {
    return {Kind::projected_centre, slope, {}};
  }
  static MomentKind integrated_drift_centre(Adaptation b) {
    return {Kind::integrated_drift_centre, 0.0, std::move(b)};
  }
};

struct BundleEstimate {
  double value = 0.0;
  double stderr_ = 0.0;     // over continuations
  double denominator = 0.0;  // mean of (T - S)
  std::size_t m = 0;
};

// Observed view of a bundle: the scalar series of one observable evaluated on
// every continuation, plus the anchor data shared by all of them.
struct ObservedBundle {
  std::size_t s_idx = 0;
  double dt = 0.0;
  double x_s = 0.0;
  std::vector<std::vector<double>> series;  // [continuation][grid index]

  std::size_t m() const { return series.size(); }
  std::size_t extent() const { return series.empty() ? 0 : series[0].size() - 1; }

  SamplePath path_of(std::size_t c) const {
    return SamplePath{TimeGrid{dt, series[c].size() - 1}, series[c]};
  }
};

inline ObservedBundle observe_bundle(const Bundle& bundle, const ProcessSpec& spec) {
  ObservedBundle ob;
  ob.s_idx = bundle.s_idx;
  ob.dt = bundle.outer.grid.dt;
  ob.series.reserve(bundle.continuations.size());
  for (const auto& cont : bundle.continuations)
    ob.series.push_back(materialize_values(spec, cont));
  require(!ob.series.empty(), Errc::insufficient_bundle, "empty bundle");
  ob.x_s = ob.series[0][bundle.s_idx];
  return ob;
}

// Observed view from an arbitrary per-continuation evaluation.
template <class Fn>
inline ObservedBundle observe_bundle_with(const Bundle& bundle, Fn&& fn) {
  ObservedBundle ob;
  ob.s_idx = bundle.s_idx;
  ob.dt = bundle.outer.grid.dt;
  ob.series.reserve(bundle.continuations.size());
  for (const auto& cont : bundle.continuations) ob.series.push_back(fn(cont));
  require(!ob.series.empty(), Errc::insufficient_bundle, "empty bundle");
  ob.x_s = ob.series[0][bundle.s_idx];
  return ob;
}

inline std::vector<RealizedStop> realize_on_bundle(const ObservedBundle& ob,
                                                   const StoppingRule& rule) {
  std::vector<RealizedStop> stops;
  stops.reserve(ob.m());
  for (std::size_t c = 0; c < ob.m(); ++c) {
    const SamplePath path{TimeGrid{ob.dt, ob.series[c].size() - 1}, ob.series[c]};
    stops.push_back(realize(rule, path, ob.s_idx));
  }
  return stops;
}

namespace detail {

struct TermStats {
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline TermStats term_stats(std::span<const double> terms) {
  const double m = static_cast<double>(terms.size());
  double mean = 0.0;
  for (double t : terms) mean += t;
  mean /= m;
  double ss = 0.0;
  for (double t : terms) ss += (t - mean) * (t - mean);
  const double sd = terms.size() >= 2 ? std::sqrt(ss / (m - 1.0)) : 0.0;
  return {mean, sd / std::sqrt(m)};
}

}  // namespace detail

inline BundleEstimate bundle_moment(const MomentKind& kind, const ObservedBundle& x,
                                    const std::vector<RealizedStop>& stops,
                                    const ObservedBundle* y = nullptr) {
  const std::size_t m = x.m();
  require(m >= 2, Errc::insufficient_bundle, "bundle_moment needs M >= 2");
  require(stops.size() == m, Errc::scenario_invalid,
          "bundle_moment: one realized stop per continuation required");

  // Displacements from the anchor value. Working relative to X_S keeps the
  // T = S identity E[Y | F_S] = Y exact at sample level (a mean of M zero
  // displacements is exactly zero, a mean of M copies of X_S may round).
  std::vector<double> dx(m);
  std::vector<double> durations(m);
  std::size_t at_anchor = 0;
  for (std::size_t c = 0; c < m; ++c) {
    const SamplePath path = x.path_of(c);
    dx[c] = left_limit_at_stop(path, x.s_idx, stops[c].index) - x.x_s;
    durations[c] = static_cast<double>(stops[c].index - x.s_idx) * x.dt;
    if (stops[c].index == x.s_idx) ++at_anchor;
  }
  if (kind.kind != MomentKind::Kind::cond_exp && at_anchor == m)
    raise(Errc::degenerate_stopping_family,
          "all realized stops collapsed onto the anchor");

  const double denominator = detail::term_stats(durations).mean;

  double anchor_shift = 0.0;
  std::vector<double> terms(m);
  switch (kind.kind) {
    case MomentKind::Kind::cond_exp:
      terms = dx;
      anchor_shift = x.x_s;
      break;
    case MomentKind::Kind::cond_var:
    case MomentKind::Kind::cond_cov: {
      require(kind.kind != MomentKind::Kind::cond_cov || y != nullptr,
              Errc::scenario_invalid, "cond_cov needs a second observable");
      const ObservedBundle& other =
          (kind.kind == MomentKind::Kind::cond_cov && y) ? *y : x;
      require(other.m() == m, Errc::scenario_invalid,
              "cond_cov: bundle size mismatch");
      std::vector<double> dy(m);
      for (std::size_t c = 0; c < m; ++c) {
        const SamplePath path = other.path_of(c);
        dy[c] = left_limit_at_stop(path, other.s_idx, stops[c].index) - other.x_s;
      }
      const double mdx = detail::term_stats(dx).mean;
      const double mdy = detail::term_stats(dy).mean;
      for (std::size_t c = 0; c < m; ++c)
        terms[c] = (dx[c] - mdx) * (dy[c] - mdy);
      break;
    }
    case MomentKind::Kind::rel_second_moment:
      for (std::size_t c = 0; c < m; ++c) terms[c] = dx[c] * dx[c];
      break;
    case MomentKind::Kind::projected_centre:
      for (std::size_t c = 0; c < m; ++c) {
        const double d = dx[c] - kind.projected_slope * durations[c];
        terms[c] = d * d;
      }
      break;
    case MomentKind::Kind::integrated_drift_centre: {
      require(static_cast<bool>(kind.drift_integrand), Errc::scenario_invalid,
              "integrated_drift_centre needs a drift integrand");
      for (std::size_t c = 0; c < m; ++c) {
        double integral = 0.0;
        for (std::size_t j = x.s_idx; j < stops[c].index; ++j) {
          const PrefixView prefix{
              std::span<const double>(x.series[c].data(), j + 1), x.dt};
          integral += kind.drift_integrand(prefix, j) * x.dt;
        }
        const double d = dx[c] - integral;
        terms[c] = d * d;
      }
      break;
    }
  }

  const auto ts = detail::term_stats(terms);
  return BundleEstimate{anchor_shift + ts.mean, ts.stderr_, denominator, m};
}

inline BundleEstimate bundle_moment(const MomentKind& kind, const ObservedBundle& x,
                                    const StoppingRule& rule,
                                    const ObservedBundle* y = nullptr) {
  return bundle_moment(kind, x, realize_on_bundle(x, rule), y);
}

// Per-scale deviations of the estimate from its continuity limit: |E - X_S|
// for conditional expectation, |Var - 0| for conditional variance. The caller
// asserts the monotone-to-zero trend.
inline std::vector<double> stopping_continuity_probe(
    MomentKind::Kind kind, const ObservedBundle& bundle,
    const std::vector<StoppingRule>& shrinking_rules) {
  require(kind == MomentKind::Kind::cond_exp || kind == MomentKind::Kind::cond_var,
          Errc::invalid_parameter, "probe supports CondExp and CondVar");
  std::vector<double> deviations;
  deviations.reserve(shrinking_rules.size());
  for (const auto& rule : shrinking_rules) {
    const MomentKind mk = kind == MomentKind::Kind::cond_exp
                              ? MomentKind::cond_exp()
                              : MomentKind::cond_var();
    const BundleEstimate est = bundle_moment(mk, bundle, rule);
    const double target = kind == MomentKind::Kind::cond_exp ? bundle.x_s : 0.0;
    deviations.push_back(std::abs(est.value - target));
  }
  return deviations;
}

}  // namespace driftlab
