#pragma once

// Stopping-derivative estimators: drift, variance rate, covariance rate, the
// covariance-rate matrix, and the stopping-limit characteristic operator.
// Ratios are formed per outer path and per scale of a shrinking family of
// stopping rules, pooled in fixed index order, and Richardson-extrapolated
// over the last two scales.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "driftlab/condest.hpp"
#include "driftlab/errors.hpp"
#include "driftlab/parallel.hpp"
#include "driftlab/processes.hpp"
#include "driftlab/rng.hpp"
#include "driftlab/stats.hpp"
#include "driftlab/stopping.hpp"

namespace driftlab {

struct ShrinkFamily {
  enum class Kind { offset_from_s, first_exit };

  Kind kind = Kind::offset_from_s;
  double initial = 0.1;   // h0 or eps0
  double factor = 0.5;    // geometric shrink factor
  int levels = 4;         // J >= 2
  double cap = 1.0;       // duration cap for first-exit rules

  double scale(int j) const { return initial * std::pow(factor, j); }

  StoppingRule rule(int j) const {
    if (kind == Kind::offset_from_s) return StoppingRule(OffsetFromS{scale(j)});
    return StoppingRule(FirstExit{scale(j), cap});
  }

  // Grid steps a bundle must extend past the anchor so every rule in the
  // family can realize without hitting the continuation boundary.
  std::size_t extent_need(double dt) const {
    const double span = kind == Kind::offset_from_s ? initial : cap;
    return detail::offset_steps(span, dt) + 1;
  }

  void validate() const {
    require(initial > 0.0, Errc::invalid_parameter, "family initial scale must be > 0");
    require(factor > 0.0 && factor < 1.0, Errc::invalid_parameter,
            "family factor must lie in (0,1)");
    require(levels >= 2, Errc::invalid_parameter, "family needs at least 2 levels");
    require(kind == Kind::offset_from_s || cap > 0.0, Errc::invalid_parameter,
            "first-exit family needs a positive cap");
  }
};

struct ScaleStats {
  double scale = 0.0;
  double ratio = 0.0;            // pooled over outer paths
  double stderr_ = 0.0;
  double frac_within_eps = 0.0;  // |per-path ratio - extrapolated| <= frac_eps
  std::vector<double> per_path;
};

struct DerivEstimate {
  std::vector<ScaleStats> scales;
  double extrapolated = 0.0;
  double extrapolated_stderr = 0.0;
  bool converged = false;
  std::size_t n_outer_used = 0;
};

struct EstimatorConfig {
  TimeGrid grid{1e-4, 10000};
  StoppingRule anchor{AtTime{0.5}};
  ShrinkFamily family{};
  std::size_t n_outer = 200;
  std::size_t m_cont = 1000;
  std::uint64_t seed = 0;
  int threads = 1;
  double tol_rel = 0.05;   // convergence declaration
  double tol_abs = 1e-3;
  double frac_eps = 0.1;   // band for the fraction-within diagnostic
};

enum class VarianceVariant {
  cond_var,
  rel_second_moment,
  projected_centre,
  integrated_drift_centre,
};

struct VarianceOptions {
  // Projected-centre slope per outer path; empty = use the drift estimated
  // from the same bundle at the same scale.
  std::function<double(const PrefixView&, std::size_t)> projected_slope;
  // Required for the integrated-drift-centre variant.
  Adaptation drift_integrand;
};

namespace detail {

inline bool row_is_skipped(std::span<const double> row) {
  return !row.empty() && std::isnan(row[0]);
}

// Pool one column over non-skipped rows in fixed order.
inline void pool_column(const std::vector<std::vector<double>>& rows,
                        std::size_t col, std::vector<double>& out) {
  out.clear();
  for (const auto& row : rows)
    if (!row_is_skipped(row)) out.push_back(row[col]);
}

}  // namespace detail

// Runs one bundle per outer path and lets `fill` write a fixed-width row of
// per-path statistics. Skipped paths (anchor capped, or the bundle would
// cross the horizon) leave a NaN row. The anchor is realized on the observed
// path of `anchor_spec`.
inline std::vector<std::vector<double>> sweep_bundles(
    const ProcessSpec& anchor_spec, const EstimatorConfig& cfg,
    std::size_t row_width,
    const std::function<void(std::size_t, const Bundle&, std::span<double>)>& fill) {
  cfg.family.validate();
  require(cfg.n_outer >= 2, Errc::insufficient_samples, "need at least 2 outer paths");
  require(cfg.m_cont >= 2, Errc::insufficient_bundle, "need at least 2 continuations");

  std::vector<std::vector<double>> rows(cfg.n_outer);
  const std::size_t need = cfg.family.extent_need(cfg.grid.dt);

  parallel_for(cfg.n_outer, cfg.threads, [&](std::size_t i) {
    rows[i].assign(row_width, std::numeric_limits<double>::quiet_NaN());
    const VectorPath outer = simulate_driver(
        anchor_spec, cfg.grid, substream_seed(cfg.seed, streams::outer, i));
    const SamplePath observed = materialize(anchor_spec, outer);
    const RealizedStop anchor = realize(cfg.anchor, observed, 0);
    if (anchor.capped) return;
    if (anchor.index + need > cfg.grid.n_steps) return;
    const Bundle bundle = branch_continuations(
        anchor_spec, outer, anchor.index, cfg.m_cont, anchor.index + need,
        substream_seed(cfg.seed, streams::continuation, i));
    fill(i, bundle, std::span<double>(rows[i]));
  });
  return rows;
}

namespace detail {

inline DerivEstimate assemble_estimate(const ShrinkFamily& family,
                                       const std::vector<std::vector<double>>& rows,
                                       const EstimatorConfig& cfg) {
  const int levels = family.levels;
  DerivEstimate est;
  est.scales.resize(levels);

  std::vector<double> col;
  for (int j = 0; j < levels; ++j) {
    pool_column(rows, j, col);
    require(col.size() >= 2, Errc::insufficient_samples,
            "fewer than 2 usable outer paths");
    est.scales[j].scale = family.scale(j);
    est.scales[j].per_path = col;
    est.scales[j].ratio = sample_mean(col);
    est.scales[j].stderr_ =
        sample_sd(col) / std::sqrt(static_cast<double>(col.size()));
    est.n_outer_used = col.size();
  }

  // Richardson over the last two scales: with a geometric factor q, the
  // linear-bias-free value is (r_J - q r_{J-1}) / (1 - q); at q = 1/2 this is
  // 2 r_J - r_{J-1}. Extrapolate per path so the standard error carries the
  // cross-scale covariance.
  const double q = family.factor;
  const auto& last = est.scales[levels - 1].per_path;
  const auto& prev = est.scales[levels - 2].per_path;
  std::vector<double> extrap(last.size());
  for (std::size_t i = 0; i < last.size(); ++i)
    extrap[i] = (last[i] - q * prev[i]) / (1.0 - q);
  est.extrapolated = sample_mean(extrap);
  est.extrapolated_stderr =
      sample_sd(extrap) / std::sqrt(static_cast<double>(extrap.size()));

  const double r_last = est.scales[levels - 1].ratio;
  const double r_prev = est.scales[levels - 2].ratio;
  est.converged =
      std::abs(r_last - r_prev) <= cfg.tol_rel * (std::abs(r_last) + cfg.tol_abs);

  for (auto& sc : est.scales) {
    std::size_t within = 0;
    for (double r : sc.per_path)
      if (std::abs(r - est.extrapolated) <= cfg.frac_eps) ++within;
    sc.frac_within_eps =
        static_cast<double>(within) / static_cast<double>(sc.per_path.size());
  }
  return est;
}

inline void check_not_degenerate(const std::vector<RealizedStop>& stops,
                                 std::size_t s_idx, std::size_t m) {
  std::size_t collapsed = 0;
  for (const auto& s : stops)
    if (s.index == s_idx) ++collapsed;
  if (100 * collapsed >= m)
    raise(Errc::degenerate_stopping_family,
          "stopping family collapsed onto the anchor on >= 1% of continuations");
}

inline double safe_ratio(double num, double den) {
  require(den > 0.0, Errc::degenerate_stopping_family,
          "zero denominator E[T - S | F_S]");
  return num / den;
}

}  // namespace detail

inline DerivEstimate drift_at(const ProcessSpec& spec, const EstimatorConfig& cfg) {
  const int levels = cfg.family.levels;
  auto rows = sweep_bundles(
      spec, cfg, levels,
      [&](std::size_t, const Bundle& bundle, std::span<double> row) {
        const ObservedBundle ob = observe_bundle(bundle, spec);
        for (int j = 0; j < levels; ++j) {
          const auto rule = cfg.family.rule(j);
          const auto stops = realize_on_bundle(ob, rule);
          detail::check_not_degenerate(stops, ob.s_idx, ob.m());
          const auto est = bundle_moment(MomentKind::cond_exp(), ob, stops);
          row[j] = detail::safe_ratio(est.value - ob.x_s, est.denominator);
        }
      });
  return detail::assemble_estimate(cfg.family, rows, cfg);
}

inline DerivEstimate variance_rate_at(const ProcessSpec& spec,
                                      const EstimatorConfig& cfg,
                                      VarianceVariant variant = VarianceVariant::cond_var,
                                      const VarianceOptions& opts = {}) {
  if (variant == VarianceVariant::integrated_drift_centre)
    require(static_cast<bool>(opts.drift_integrand), Errc::scenario_invalid,
            "integrated_drift_centre variant needs a drift integrand");
  const int levels = cfg.family.levels;
  auto rows = sweep_bundles(
      spec, cfg, levels,
      [&](std::size_t, const Bundle& bundle, std::span<double> row) {
        const ObservedBundle ob = observe_bundle(bundle, spec);
        const PrefixView prefix{
            std::span<const double>(bundle.outer.coords[0].data(), ob.s_idx + 1),
            ob.dt};
        for (int j = 0; j < levels; ++j) {
          const auto rule = cfg.family.rule(j);
          const auto stops = realize_on_bundle(ob, rule);
          detail::check_not_degenerate(stops, ob.s_idx, ob.m());
          MomentKind mk = MomentKind::cond_var();
          switch (variant) {
            case VarianceVariant::cond_var:
              mk = MomentKind::cond_var();
              break;
            case VarianceVariant::rel_second_moment:
              mk = MomentKind::rel_second_moment();
              break;
            case VarianceVariant::projected_centre: {
              double slope;
              if (opts.projected_slope) {
                slope = opts.projected_slope(prefix, ob.s_idx);
              } else {
                const auto ce = bundle_moment(MomentKind::cond_exp(), ob, stops);
                slope = detail::safe_ratio(ce.value - ob.x_s, ce.denominator);
              }
              mk = MomentKind::projected_centre(slope);
              break;
            }
            case VarianceVariant::integrated_drift_centre:
              mk = MomentKind::integrated_drift_centre(opts.drift_integrand);
              break;
          }
          const auto est = bundle_moment(mk, ob, stops);
          row[j] = detail::safe_ratio(est.value, est.denominator);
        }
      });
  return detail::assemble_estimate(cfg.family, rows, cfg);
}

// X and Y must be observables of one jointly simulated driver; stopping rules
// are realized on the X series.
inline DerivEstimate covariance_rate_at(const ProcessSpec& spec_x,
                                        const ProcessSpec& spec_y,
                                        const EstimatorConfig& cfg) {
  require(shares_driver(spec_x, spec_y), Errc::scenario_invalid,
          "covariance_rate_at: X and Y must share one driver");
  const int levels = cfg.family.levels;
  auto rows = sweep_bundles(
      spec_x, cfg, levels,
      [&](std::size_t, const Bundle& bundle, std::span<double> row) {
        const ObservedBundle ox = observe_bundle(bundle, spec_x);
        const ObservedBundle oy = observe_bundle(bundle, spec_y);
        for (int j = 0; j < levels; ++j) {
          const auto rule = cfg.family.rule(j);
          const auto stops = realize_on_bundle(ox, rule);
          detail::check_not_degenerate(stops, ox.s_idx, ox.m());
          const auto est = bundle_moment(MomentKind::cond_cov(), ox, stops, &oy);
          row[j] = detail::safe_ratio(est.value, est.denominator);
        }
      });
  return detail::assemble_estimate(cfg.family, rows, cfg);
}

// Entrywise covariance-rate matrix of a vector driver; symmetric by
// construction (the (i,j) product is computed once and mirrored). Stopping
// rules are realized on coordinate 0.
inline std::vector<std::vector<DerivEstimate>> covariance_matrix_at(
    const ProcessSpec& vector_spec, const EstimatorConfig& cfg) {
  const std::size_t d = driver_dim(vector_spec);
  require(d >= 1, Errc::scenario_invalid, "covariance_matrix_at: empty driver");
  const int levels = cfg.family.levels;
  const std::size_t n_pairs = d * (d + 1) / 2;

  const ProcessSpec& leaf = driver_of(vector_spec);
  std::vector<SpecPtr> coords;
  if (d == 1) {
    coords.push_back(std::make_shared<ProcessSpec>(leaf));
  } else {
    auto leaf_ptr = std::make_shared<ProcessSpec>(leaf);
    for (std::size_t i = 0; i < d; ++i) coords.push_back(coordinate(leaf_ptr, i));
  }

  auto rows = sweep_bundles(
      *coords[0], cfg, levels * n_pairs,
      [&](std::size_t, const Bundle& bundle, std::span<double> row) {
        std::vector<ObservedBundle> obs;
        obs.reserve(d);
        for (std::size_t i = 0; i < d; ++i)
          obs.push_back(observe_bundle(bundle, *coords[i]));
        for (int j = 0; j < levels; ++j) {
          const auto rule = cfg.family.rule(j);
          const auto stops = realize_on_bundle(obs[0], rule);
          detail::check_not_degenerate(stops, obs[0].s_idx, obs[0].m());
          std::size_t pair = 0;
          for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = a; b < d; ++b, ++pair) {
              const auto est =
                  bundle_moment(MomentKind::cond_cov(), obs[a], stops, &obs[b]);
              row[pair * levels + j] =
                  detail::safe_ratio(est.value, est.denominator);
            }
          }
        }
      });

  std::vector<std::vector<DerivEstimate>> matrix(d, std::vector<DerivEstimate>(d));
  std::size_t pair = 0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b, ++pair) {
      std::vector<std::vector<double>> pair_rows(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (detail::row_is_skipped(rows[i])) {
          pair_rows[i].assign(levels, std::numeric_limits<double>::quiet_NaN());
        } else {
          pair_rows[i].assign(rows[i].begin() + pair * levels,
                              rows[i].begin() + (pair + 1) * levels);
        }
      }
      DerivEstimate est = detail::assemble_estimate(cfg.family, pair_rows, cfg);
      matrix[a][b] = est;
      matrix[b][a] = std::move(est);
    }
  }
  return matrix;
}

// Stopping-limit characteristic operator at a deterministic start: pooled
// ratio mean(f(X_T) - f(x)) / mean(T) over n_outer fresh paths per scale
// (conditioning at time 0 is trivial, so no bundles are branched). The
// standard error is a delta-method value for the ratio of means; per-path
// entries hold the individual f-increment over duration ratios.
inline DerivEstimate characteristic_at(const ProcessSpec& spec,
                                       const std::function<double(double)>& f,
                                       const EstimatorConfig& cfg) {
  cfg.family.validate();
  require(cfg.n_outer >= 2, Errc::insufficient_samples, "need at least 2 paths");
  const int levels = cfg.family.levels;
  const std::size_t need = cfg.family.extent_need(cfg.grid.dt);
  require(need <= cfg.grid.n_steps, Errc::out_of_range,
          "family cap exceeds the grid horizon");
  const TimeGrid sim_grid{cfg.grid.dt, need};

  struct Row {
    std::vector<double> fdiff;
    std::vector<double> duration;
    bool skipped = false;
  };
  std::vector<Row> rows(cfg.n_outer);
  parallel_for(cfg.n_outer, cfg.threads, [&](std::size_t i) {
    auto& row = rows[i];
    row.fdiff.assign(levels, 0.0);
    row.duration.assign(levels, 0.0);
    const SamplePath path =
        simulate(spec, sim_grid, substream_seed(cfg.seed, streams::outer, i));
    const double fx = f(path.values[0]);
    for (int j = 0; j < levels; ++j) {
      const auto rule = cfg.family.rule(j);
      const RealizedStop rs = realize(rule, path, 0);
      if (rs.capped) {
        row.skipped = true;
        return;
      }
      row.fdiff[j] = f(path.values[rs.index]) - fx;
      row.duration[j] = static_cast<double>(rs.index) * cfg.grid.dt;
    }
  });

  DerivEstimate est;
  est.scales.resize(levels);
  std::vector<double> pooled_ratio(levels);
  for (int j = 0; j < levels; ++j) {
    std::vector<double> fd, du, per;
    for (const auto& row : rows) {
      if (row.skipped) continue;
      fd.push_back(row.fdiff[j]);
      du.push_back(row.duration[j]);
      per.push_back(row.duration[j] > 0.0 ? row.fdiff[j] / row.duration[j] : 0.0);
    }
    require(fd.size() >= 2, Errc::insufficient_samples,
            "fewer than 2 usable paths (caps fired)");
    const double mean_f = sample_mean(fd);
    const double mean_t = sample_mean(du);
    require(mean_t > 0.0, Errc::degenerate_stopping_family, "mean duration is zero");
    const double ratio = mean_f / mean_t;
    const double n = static_cast<double>(fd.size());
    double vf = 0.0, vt = 0.0, cft = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
      vf += (fd[i] - mean_f) * (fd[i] - mean_f);
      vt += (du[i] - mean_t) * (du[i] - mean_t);
      cft += (fd[i] - mean_f) * (du[i] - mean_t);
    }
    vf /= n - 1.0;
    vt /= n - 1.0;
    cft /= n - 1.0;
    const double var_ratio =
        (vf - 2.0 * ratio * cft + ratio * ratio * vt) / (n * mean_t * mean_t);
    est.scales[j].scale = cfg.family.scale(j);
    est.scales[j].ratio = ratio;
    est.scales[j].stderr_ = std::sqrt(std::max(0.0, var_ratio));
    est.scales[j].per_path = std::move(per);
    est.n_outer_used = fd.size();
    pooled_ratio[j] = ratio;
  }

  const double q = cfg.family.factor;
  est.extrapolated =
      (pooled_ratio[levels - 1] - q * pooled_ratio[levels - 2]) / (1.0 - q);
  const double se_last = est.scales[levels - 1].stderr_;
  const double se_prev = est.scales[levels - 2].stderr_;
  est.extrapolated_stderr =
      std::sqrt(4.0 * se_last * se_last + se_prev * se_prev);
  est.converged = std::abs(pooled_ratio[levels - 1] - pooled_ratio[levels - 2]) <=
                  cfg.tol_rel * (std::abs(pooled_ratio[levels - 1]) + cfg.tol_abs);
  for (auto& sc : est.scales) {
    std::size_t within = 0;
    for (double r : sc.per_path)
      if (std::abs(r - est.extrapolated) <= cfg.frac_eps) ++within;
    sc.frac_within_eps =
        static_cast<double>(within) / static_cast<double>(sc.per_path.size());
  }
  return est;
}

struct ConvergenceCheck {
  bool holds = false;
  double fraction = 0.0;
};

// Convergence in probability at one scale: the fraction of per-path ratios
// within eps of the target must reach 1 - delta.
inline ConvergenceCheck convergence_probability_check(std::span<const double> ratios,
                                                      double target, double eps,
                                                      double delta) {
  require(!ratios.empty(), Errc::insufficient_samples,
          "convergence check needs ratios");
  std::size_t within = 0;
  for (double r : ratios)
    if (std::abs(r - target) <= eps) ++within;
  const double fraction =
      static_cast<double>(within) / static_cast<double>(ratios.size());
  return {fraction >= 1.0 - delta, fraction};
}

}  // namespace driftlab
