#pragma once

// Configuration-driven experiment runner behind the CLI: parses versioned
// JSON experiment documents (unknown keys rejected), executes simulate /
// estimate / verify / suite experiments, and writes CSV/JSON artifacts.
// Exit codes: 0 success or pass, 1 check failure, 2 configuration error,
// 3 numerical error. Every error leaves a machine-readable JSON record on
// standard error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "driftlab/errors.hpp"
#include "driftlab/processes.hpp"
#include "driftlab/stopderiv.hpp"
#include "driftlab/theorems.hpp"

namespace driftlab {

using json = nlohmann::json;

// --- serialization ---

inline json report_to_json(const CheckReport& r) {
  return json{
      {"id", r.id},
      {"verdict", verdict_name(r.verdict)},
      {"left", r.left},
      {"right", r.right},
      {"ci",
       {{"left_stderr", r.left_stderr},
        {"right_stderr", r.right_stderr},
        {"diff_extrapolated", r.diff_extrap},
        {"diff_extrapolated_stderr", r.diff_extrap_stderr},
        {"diff_smallest", r.diff_smallest},
        {"diff_smallest_stderr", r.diff_smallest_stderr}}},
      {"tolerances", {{"tol_abs", r.tol_abs}, {"tol_smallest", r.tol_smallest}, {"z", r.z}}},
      {"seed", r.seed},
      {"runtime_s", r.runtime_s},
      {"note", r.note},
  };
}

// Summary CSV, one row per report in lexicographic id order.
inline void emit_report_csv(std::vector<CheckReport> reports, std::ostream& os) {
  require(!reports.empty(), Errc::scenario_invalid, "no reports to emit");
  std::sort(reports.begin(), reports.end(),
            [](const CheckReport& a, const CheckReport& b) { return a.id < b.id; });
  os << "id,verdict,left,right,stderr,seed,runtime_s\n";
  for (const auto& r : reports) {
    os << r.id << ',' << verdict_name(r.verdict) << ',' << format_full(r.left)
       << ',' << format_full(r.right) << ',' << format_full(r.diff_extrap_stderr)
       << ',' << r.seed << ',' << format_full(r.runtime_s) << '\n';
  }
}

inline json emit_report_json(std::vector<CheckReport> reports) {
  std::sort(reports.begin(), reports.end(),
            [](const CheckReport& a, const CheckReport& b) { return a.id < b.id; });
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(report_to_json(r));
  return arr;
}

inline void write_estimate_csv(const DerivEstimate& est, std::ostream& os) {
  os << "scale_index,scale,ratio,stderr,frac_within_eps,converged\n";
  for (std::size_t j = 0; j < est.scales.size(); ++j) {
    const auto& sc = est.scales[j];
    os << j << ',' << format_full(sc.scale) << ',' << format_full(sc.ratio) << ','
       << format_full(sc.stderr_) << ',' << format_full(sc.frac_within_eps) << ','
       << (est.converged ? 1 : 0) << '\n';
  }
}

inline void write_per_path_csv(const DerivEstimate& est, std::ostream& os) {
  os << "outer_index,value,stderr,denominator\n";
  const auto& last = est.scales.back();
  for (std::size_t i = 0; i < last.per_path.size(); ++i)
    os << i << ',' << format_full(last.per_path[i]) << ",," << '\n';
}

inline json estimate_to_json(const DerivEstimate& est, const std::string& kind) {
  json scales = json::array();
  for (std::size_t j = 0; j < est.scales.size(); ++j) {
    const auto& sc = est.scales[j];
    scales.push_back(json{{"scale_index", j},
                          {"scale", sc.scale},
                          {"ratio", sc.ratio},
                          {"stderr", sc.stderr_},
                          {"frac_within_eps", sc.frac_within_eps}});
  }
  return json{
      {"schema", "driftlab.estimate.v1"},
      {"kind", kind},
      {"extrapolated", est.extrapolated},
      {"extrapolated_stderr", est.extrapolated_stderr},
      {"ci95",
       {est.extrapolated - 1.959964 * est.extrapolated_stderr,
        est.extrapolated + 1.959964 * est.extrapolated_stderr}},
      {"converged", est.converged},
      {"n_outer_used", est.n_outer_used},
      {"scales", scales},
  };
}

inline void write_stops_csv(const std::vector<RealizedStop>& stops,
                            std::ostream& os) {
  os << "path_index,stop_index,capped\n";
  for (std::size_t i = 0; i < stops.size(); ++i)
    os << i << ',' << stops[i].index << ',' << (stops[i].capped ? 1 : 0) << '\n';
}

// --- strict JSON helpers ---

namespace cfgdetail {

inline void check_keys(const json& obj, const std::set<std::string>& allowed,
                       const std::string& context) {
  require(obj.is_object(), Errc::config_error, context + " must be an object");
  for (const auto& item : obj.items())
    require(allowed.count(item.key()) > 0, Errc::config_error,
            "unknown key '" + item.key() + "' in " + context);
}

inline const json& need(const json& obj, const char* key,
                        const std::string& context) {
  require(obj.contains(key), Errc::config_error,
          context + ": missing required field '" + key + "'");
  return obj.at(key);
}

inline double positive_number(const json& v, const std::string& field) {
  require(v.is_number(), Errc::config_error, field + " must be a number");
  const double x = v.get<double>();
  require(x > 0.0, Errc::config_error, field + " must be positive");
  return x;
}

}  // namespace cfgdetail

// --- catalogs: adaptations, time functions, maps, rules, processes ---

inline Adaptation parse_adaptation(const json& j) {
  using cfgdetail::check_keys;
  using cfgdetail::need;
  const std::string kind = need(j, "kind", "adaptation").get<std::string>();
  if (kind == "constant") {
    check_keys(j, {"kind", "value"}, "adaptation(constant)");
    return constant_adaptation(need(j, "value", "adaptation").get<double>());
  }
  if (kind == "affine_in_x") {
    check_keys(j, {"kind", "intercept", "slope"}, "adaptation(affine_in_x)");
    const double a = need(j, "intercept", "adaptation").get<double>();
    const double b = need(j, "slope", "adaptation").get<double>();
    return [a, b](const PrefixView& p, std::size_t k) {
      return a + b * p.values[k];
    };
  }
  if (kind == "abs_affine") {
    check_keys(j, {"kind", "intercept", "slope"}, "adaptation(abs_affine)");
    const double a = need(j, "intercept", "adaptation").get<double>();
    const double b = need(j, "slope", "adaptation").get<double>();
    return [a, b](const PrefixView& p, std::size_t k) {
      return a + b * std::abs(p.values[k]);
    };
  }
  if (kind == "clipped_abs_affine") {
    check_keys(j, {"kind", "intercept", "slope", "lo", "hi"},
               "adaptation(clipped_abs_affine)");
    const double a = need(j, "intercept", "adaptation").get<double>();
    const double b = need(j, "slope", "adaptation").get<double>();
    const double lo = need(j, "lo", "adaptation").get<double>();
    const double hi = need(j, "hi", "adaptation").get<double>();
    return [a, b, lo, hi](const PrefixView& p, std::size_t k) {
      return std::clamp(a + b * std::abs(p.values[k]), lo, hi);
    };
  }
  if (kind == "sin_affine") {
    check_keys(j, {"kind", "intercept", "slope"}, "adaptation(sin_affine)");
    const double a = need(j, "intercept", "adaptation").get<double>();
    const double b = need(j, "slope", "adaptation").get<double>();
    return [a, b](const PrefixView& p, std::size_t k) {
      return a + b * std::sin(p.values[k]);
    };
  }
  if (kind == "running_max_below") {
    check_keys(j, {"kind", "level"}, "adaptation(running_max_below)");
    const double level = need(j, "level", "adaptation").get<double>();
    return [level](const PrefixView& p, std::size_t) {
      double mx = p.values[0];
      for (double v : p.values) mx = std::max(mx, v);
      return mx < level ? 1.0 : 0.0;
    };
  }
  if (kind == "sqrt") {
    check_keys(j, {"kind", "of"}, "adaptation(sqrt)");
    const Adaptation inner = parse_adaptation(need(j, "of", "adaptation"));
    return [inner](const PrefixView& p, std::size_t k) {
      return std::sqrt(inner(p, k));
    };
  }
  raise(Errc::config_error, "unknown adaptation kind '" + kind + "'");
}

inline std::function<double(double)> parse_time_function(const json& j) {
  using cfgdetail::check_keys;
  using cfgdetail::need;
  const std::string kind = need(j, "kind", "time function").get<std::string>();
  if (kind == "identity") {
    check_keys(j, {"kind"}, "f(identity)");
    return [](double t) { return t; };
  }
  if (kind == "constant") {
    check_keys(j, {"kind", "value"}, "f(constant)");
    const double c = need(j, "value", "f").get<double>();
    return [c](double) { return c; };
  }
  if (kind == "affine") {
    check_keys(j, {"kind", "intercept", "slope"}, "f(affine)");
    const double a = need(j, "intercept", "f").get<double>();
    const double b = need(j, "slope", "f").get<double>();
    return [a, b](double t) { return a + b * t; };
  }
  if (kind == "sine") {
    check_keys(j, {"kind", "amplitude", "angular_frequency"}, "f(sine)");
    const double a = need(j, "amplitude", "f").get<double>();
    const double w = need(j, "angular_frequency", "f").get<double>();
    return [a, w](double t) { return a * std::sin(w * t); };
  }
  raise(Errc::config_error, "unknown time function kind '" + kind + "'");
}

inline std::function<double(double, double)> parse_map(const json& j) {
  using cfgdetail::check_keys;
  using cfgdetail::need;
  const std::string kind = need(j, "kind", "map").get<std::string>();
  if (kind == "square") {
    check_keys(j, {"kind"}, "map(square)");
    return [](double x, double) { return x * x; };
  }
  if (kind == "square_minus_t") {
    check_keys(j, {"kind"}, "map(square_minus_t)");
    return [](double x, double t) { return x * x - t; };
  }
  if (kind == "log") {
    check_keys(j, {"kind"}, "map(log)");
    return [](double x, double) { return std::log(x); };
  }
  if (kind == "exp") {
    check_keys(j, {"kind"}, "map(exp)");
    return [](double x, double) { return std::exp(x); };
  }
  if (kind == "abs") {
    check_keys(j, {"kind"}, "map(abs)");
    return [](double x, double) { return std::abs(x); };
  }
  if (kind == "affine") {
    check_keys(j, {"kind", "scale", "shift"}, "map(affine)");
    const double a = need(j, "scale", "map").get<double>();
    const double c = need(j, "shift", "map").get<double>();
    return [a, c](double x, double) { return a * x + c; };
  }
  raise(Errc::config_error, "unknown map kind '" + kind + "'");
}

inline std::function<double(double)> parse_scalar_function(const json& j) {
  auto map = parse_map(j);
  return [map](double x) { return map(x, 0.0); };
}

inline PrefixPredicate parse_predicate(const json& j) {
  using cfgdetail::check_keys;
  using cfgdetail::need;
  const std::string kind = need(j, "kind", "predicate").get<std::string>();
  if (kind == "anchor_above") {
    check_keys(j, {"kind", "level"}, "predicate(anchor_above)");
    const double level = need(j, "level", "predicate").get<double>();
    return [level](const PrefixView& p, std::size_t s) {
      return p.values[s] > level;
    };
  }
  if (kind == "anchor_at_most") {
    check_keys(j, {"kind", "level"}, "predicate(anchor_at_most)");
    const double level = need(j, "level", "predicate").get<double>();
    return [level](const PrefixView& p, std::size_t s) {
      return p.values[s] <= level;
    };
  }
  raise(Errc::config_error, "unknown predicate kind '" + kind + "'");
}

inline StoppingRule parse_rule(const json& j) {
  using cfgdetail::check_keys;
  using cfgdetail::need;
  const std::string kind = need(j, "kind", "stopping rule").get<std::string>();
  if (kind == "at_time") {
    check_keys(j, {"kind", "t"}, "rule(at_time)");
    return StoppingRule(AtTime{need(j, "t", "rule").get<double>()});
  }
  if (kind == "offset_from_s") {
    check_keys(j, {"kind", "h"}, "rule(offset_from_s)");
    return StoppingRule(
        OffsetFromS{cfgdetail::positive_number(need(j, "h", "rule"), "rule.h")});
  }
  if (kind == "first_exit") {
    check_keys(j, {"kind", "radius", "cap"}, "rule(first_exit)");
    FirstExit r;
    r.radius = cfgdetail::positive_number(need(j, "radius", "rule"), "rule.radius");
    r.cap = j.contains("cap")
                ? cfgdetail::positive_number(j.at("cap"), "rule.cap")
                : 1.0;
    return StoppingRule(r);
  }
  if (kind == "debut") {
    check_keys(j, {"kind", "level"}, "rule(debut)");
    return StoppingRule(Debut{need(j, "level", "rule").get<double>()});
  }
  if (kind == "min") {
    check_keys(j, {"kind", "rules"}, "rule(min)");
    MinOf m;
    for (const auto& sub : need(j, "rules", "rule"))
      m.rules.push_back(parse_rule(sub));
    return StoppingRule(std::move(m));
  }
  if (kind == "partition_glue") {
    check_keys(j, {"kind", "events", "rules"}, "rule(partition_glue)");
    PartitionGlue g;
    for (const auto& ev : need(j, "events", "rule"))
      g.events.push_back(parse_predicate(ev));
    for (const auto& sub : need(j, "rules", "rule"))
      g.rules.push_back(parse_rule(sub));
    return StoppingRule(std::move(g));
  }
  raise(Errc::config_error, "unknown stopping rule kind '" + kind + "'");
}

inline SpecPtr parse_process(const json& j) {
  using cfgdetail::check_keys;
  using cfgdetail::need;
  const std::string type = need(j, "type", "process").get<std::string>();
  if (type == "brownian") {
    check_keys(j, {"type", "x0"}, "process(brownian)");
    return brownian(j.value("x0", 0.0));
  }
  if (type == "ito") {
    check_keys(j, {"type", "x0", "drift", "diffusion"}, "process(ito)");
    return ito(j.value("x0", 0.0), parse_adaptation(need(j, "drift", "process")),
               parse_adaptation(need(j, "diffusion", "process")));
  }
  if (type == "deterministic") {
    check_keys(j, {"type", "f"}, "process(deterministic)");
    return deterministic(parse_time_function(need(j, "f", "process")));
  }
  if (type == "staircase") {
    check_keys(j, {"type"}, "process(staircase)");
    return staircase();
  }
  if (type == "correlated_bm") {
    check_keys(j, {"type", "dim", "rho", "corr", "x0"}, "process(correlated_bm)");
    const auto dim = need(j, "dim", "process").get<std::size_t>();
    require(dim >= 1, Errc::config_error, "correlated_bm dim must be >= 1");
    std::vector<double> corr;
    if (j.contains("corr")) {
      corr = j.at("corr").get<std::vector<double>>();
    } else {
      const double rho = j.value("rho", 0.0);
      corr.assign(dim * dim, rho);
      for (std::size_t i = 0; i < dim; ++i) corr[i * dim + i] = 1.0;
    }
    std::vector<double> x0;
    if (j.contains("x0")) x0 = j.at("x0").get<std::vector<double>>();
    return correlated_bm(dim, std::move(corr), std::move(x0));
  }
  if (type == "negated") {
    check_keys(j, {"type", "inner"}, "process(negated)");
    return negated(parse_process(need(j, "inner", "process")));
  }
  if (type == "scaled_shifted") {
    check_keys(j, {"type", "inner", "scale", "shift"}, "process(scaled_shifted)");
    return scaled_shifted(parse_process(need(j, "inner", "process")),
                          j.value("scale", 1.0), j.value("shift", 0.0));
  }
  if (type == "mapped") {
    check_keys(j, {"type", "inner", "map"}, "process(mapped)");
    return mapped(parse_process(need(j, "inner", "process")),
                  parse_map(need(j, "map", "process")));
  }
  if (type == "stopped") {
    check_keys(j, {"type", "inner", "rule"}, "process(stopped)");
    return stopped(parse_process(need(j, "inner", "process")),
                   parse_rule(need(j, "rule", "process")));
  }
  if (type == "coordinate") {
    check_keys(j, {"type", "inner", "index"}, "process(coordinate)");
    return coordinate(parse_process(need(j, "inner", "process")),
                      need(j, "index", "process").get<std::size_t>());
  }
  if (type == "linear_combo") {
    check_keys(j, {"type", "inner", "weights"}, "process(linear_combo)");
    return linear_combo(parse_process(need(j, "inner", "process")),
                        need(j, "weights", "process").get<std::vector<double>>());
  }
  if (type == "drift_removed") {
    check_keys(j, {"type", "inner", "rate"}, "process(drift_removed)");
    return drift_removed(parse_process(need(j, "inner", "process")),
                         parse_adaptation(need(j, "rate", "process")));
  }
  raise(Errc::config_error, "unknown process type '" + type + "'");
}

inline TimeGrid parse_grid(const json& j) {
  cfgdetail::check_keys(j, {"dt", "horizon"}, "grid");
  const double dt =
      j.contains("dt") ? cfgdetail::positive_number(j.at("dt"), "grid.dt") : 1e-4;
  const double horizon =
      j.contains("horizon")
          ? cfgdetail::positive_number(j.at("horizon"), "grid.horizon")
          : 1.0;
  return grid_for_horizon(dt, horizon);
}

inline ShrinkFamily parse_family(const json& j) {
  cfgdetail::check_keys(j, {"kind", "initial", "factor", "levels", "cap"},
                        "family");
  ShrinkFamily fam;
  const std::string kind = j.value("kind", std::string("offset_from_s"));
  if (kind == "offset_from_s")
    fam.kind = ShrinkFamily::Kind::offset_from_s;
  else if (kind == "first_exit")
    fam.kind = ShrinkFamily::Kind::first_exit;
  else
    raise(Errc::config_error, "unknown family kind '" + kind + "'");
  fam.initial = j.contains("initial")
                    ? cfgdetail::positive_number(j.at("initial"), "family.initial")
                    : 0.1;
  fam.factor = j.value("factor", 0.5);
  fam.levels = j.value("levels", 4);
  fam.cap = j.contains("cap")
                ? cfgdetail::positive_number(j.at("cap"), "family.cap")
                : 1.0;
  fam.validate();
  return fam;
}

// --- the built-in regression suite ---

struct SuiteOptions {
  std::uint64_t seed = 42;
  int threads = 1;
  double size_scale = 1.0;  // shrinks ensembles (floors apply); 1 = canonical
};

inline std::vector<CheckReport> run_builtin_suite(const SuiteOptions& opt) {
  const auto scaled = [&](std::size_t n, std::size_t floor_n) {
    const auto v = static_cast<std::size_t>(static_cast<double>(n) * opt.size_scale);
    return std::max(floor_n, v);
  };

  ScenarioConfig base;
  base.seed = opt.seed;
  base.threads = opt.threads;
  base.n_outer = scaled(150, 24);
  base.m_cont = scaled(800, 64);

  // Rules whose right side plugs estimates into a nonlinear expression carry
  // an O(1/M) bias; they run with more continuations.
  ScenarioConfig plug = base;
  plug.n_outer = scaled(64, 16);
  plug.m_cont = scaled(4000, 128);

  std::vector<CheckReport> reports;

  reports.push_back(check_identity(RuleId::linearity, base));
  reports.push_back(check_identity(RuleId::product_rule, plug));
  reports.push_back(check_identity(RuleId::chain_rule, plug));
  reports.push_back(check_identity(RuleId::time_change_rule, base));
  {
    const auto pair = detail::run_ito1d(base);
    reports.push_back(pair.drift);
    reports.push_back(pair.var);
  }
  {
    const auto pair = detail::run_itond(plug);
    reports.push_back(pair.drift);
    reports.push_back(pair.var);
  }
  reports.push_back(check_identity(RuleId::variance_sum, base));
  reports.push_back(check_identity(RuleId::product_drift, plug));
  reports.push_back(check_identity(RuleId::variance_preserved, base));
  reports.push_back(check_identity(RuleId::kill_drift, base));
  reports.push_back(check_identity(RuleId::stopped_zero_drift, base));

  // Zero drift at deterministic and debut anchors.
  reports.push_back(check_zero_drift(
      *brownian(0.0),
      {StoppingRule(AtTime{0.3}), StoppingRule(Debut{0.5})}, base,
      "ZeroDrift_Brownian"));
  reports.push_back(check_zero_drift(
      *mapped(brownian(0.0), [](double x, double t) { return x * x - t; }),
      {StoppingRule(AtTime{0.5})}, base, "ZeroDrift_CompensatedSquare"));
  {
    ScenarioConfig stair = base;
    stair.n_outer = 4;
    stair.m_cont = 2;
    stair.anchor = StoppingRule(AtTime{0.0});
    stair.tol_smallest = 0.02;  // finite-scale ratio of the jump example
    reports.push_back(check_zero_drift(*staircase(), {StoppingRule(AtTime{0.0})},
                                       stair, "ZeroDrift_Staircase"));
  }

  {
    ScenarioConfig ftc = base;
    ftc.tol_abs = 0.02;
    ftc.tol_smallest = 0.02;
    reports.push_back(check_ftc(0.0, constant_adaptation(0.3),
                                constant_adaptation(0.7),
                                {StoppingRule(AtTime{0.5})}, ftc,
                                "FTC_ConstantCoefficients"));
    ScenarioConfig ftc2 = ftc;
    ftc2.tol_abs = 0.05;
    ftc2.tol_smallest = 0.05;
    reports.push_back(check_ftc(
        0.0, constant_adaptation(0.0),
        [](const PrefixView& p, std::size_t k) {
          return 1.0 + 0.5 * std::abs(p.values[k]);
        },
        {StoppingRule(AtTime{0.5})}, ftc2, "FTC_PathDependentDiffusion"));
  }

  {
    ScenarioConfig qv = base;
    qv.n_outer = std::max<std::size_t>(100, scaled(100, 32));
    reports.push_back(check_quadratic_variation(
        *brownian(0.0), constant_adaptation(1.0), 1.0,
        {StoppingRule(AtTime{0.5})}, qv, "QuadraticVariation_Brownian"));
    ScenarioConfig qv2 = qv;
    qv2.tol_abs = 8e-3;  // QV noise scales with sigma^2
    reports.push_back(check_quadratic_variation(
        *scaled_shifted(brownian(0.0), 2.0), constant_adaptation(4.0), 1.0,
        {StoppingRule(AtTime{0.5})}, qv2, "QuadraticVariation_ScaledBrownian"));
  }

  {
    ScenarioConfig levy;
    levy.grid = grid_for_horizon(1e-3, 10.0);
    levy.seed = opt.seed;
    levy.threads = opt.threads;
    LevyOptions lo;
    lo.n_paths = scaled(2000, 200);
    lo.n_increments = 8;
    reports.push_back(check_levy_time_change(*brownian(0.0),
                                             constant_adaptation(1.0), levy, lo,
                                             "LevyTimeChange_UnitRate"));
    const Adaptation clipped = [](const PrefixView& p, std::size_t k) {
      return std::clamp(1.0 + 0.5 * std::abs(p.values[k]), 0.5, 2.0);
    };
    const auto diffusion = [clipped](const PrefixView& p, std::size_t k) {
      return std::sqrt(clipped(p, k));
    };
    reports.push_back(check_levy_time_change(
        *ito(0.0, constant_adaptation(0.0), diffusion), clipped, levy, lo,
        "LevyTimeChange_ClippedRate"));
  }

  {
    ScenarioConfig laws;
    laws.grid = grid_for_horizon(0.01, 20.0);
    laws.seed = opt.seed;
    laws.threads = opt.threads;
    const auto stopped_bm = stopped(brownian(0.0), StoppingRule(Debut{1.0}));
    reports.push_back(check_distinct_distributions(
        *stopped_bm, *negated(stopped_bm), 20.0, scaled(2000, 400), laws, 0.01,
        "DistinctLaws_ReflectedStoppedBrownian"));
  }

  std::sort(reports.begin(), reports.end(),
            [](const CheckReport& a, const CheckReport& b) { return a.id < b.id; });
  return reports;
}

// --- experiment running ---

struct RunOptions {
  std::optional<std::uint64_t> seed_override;
  std::string out_dir = ".";
  int threads = 1;
  std::string format = "csv";  // stdout summary format: csv | json
};

namespace cfgdetail {

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  std::ofstream os(path);
  require(static_cast<bool>(os), Errc::config_error,
          "cannot open output file " + path.string());
  os << text;
}

inline std::filesystem::path out_path(const RunOptions& opt,
                                      const std::string& name) {
  std::filesystem::create_directories(opt.out_dir);
  return std::filesystem::path(opt.out_dir) / name;
}

struct CommonConfig {
  TimeGrid grid{1e-4, 10000};
  std::uint64_t seed = 0;
  json output;  // file names per artifact
};

inline CommonConfig parse_common(const json& doc, const RunOptions& opt) {
  CommonConfig c;
  require(doc.contains("seed") || opt.seed_override.has_value(),
          Errc::config_error,
          "missing required field 'seed' (no silent default)");
  c.seed = opt.seed_override.has_value() ? *opt.seed_override
                                         : doc.at("seed").get<std::uint64_t>();
  c.grid = doc.contains("grid") ? parse_grid(doc.at("grid"))
                                : TimeGrid{1e-4, 10000};
  if (doc.contains("output")) c.output = doc.at("output");
  return c;
}

inline EstimatorConfig parse_estimator(const json& doc, const CommonConfig& c,
                                       const RunOptions& opt) {
  EstimatorConfig e;
  e.grid = c.grid;
  e.seed = c.seed;
  e.threads = opt.threads;
  e.anchor = doc.contains("anchor") ? parse_rule(doc.at("anchor"))
                                    : StoppingRule(AtTime{0.5});
  e.family = doc.contains("family") ? parse_family(doc.at("family"))
                                    : ShrinkFamily{};
  if (doc.contains("sizes")) {
    const auto& s = doc.at("sizes");
    check_keys(s, {"outer", "continuations"}, "sizes");
    e.n_outer = s.value("outer", std::size_t{200});
    e.m_cont = s.value("continuations", std::size_t{1000});
  }
  if (doc.contains("tolerances")) {
    const auto& t = doc.at("tolerances");
    check_keys(t, {"tol_rel", "tol_abs", "frac_eps"}, "tolerances");
    e.tol_rel = t.value("tol_rel", 0.05);
    e.tol_abs = t.value("tol_abs", 1e-3);
    e.frac_eps = t.value("frac_eps", 0.1);
  }
  return e;
}

inline int emit_estimate(const DerivEstimate& est, const std::string& kind,
                         const CommonConfig& c, const RunOptions& opt) {
  const std::string scales_name =
      c.output.is_object() ? c.output.value("scales", kind + "_scales.csv")
                           : kind + "_scales.csv";
  const std::string summary_name =
      c.output.is_object() ? c.output.value("summary", kind + "_summary.json")
                           : kind + "_summary.json";
  {
    std::ostringstream os;
    write_estimate_csv(est, os);
    write_text_file(out_path(opt, scales_name), os.str());
  }
  const json summary = estimate_to_json(est, kind);
  write_text_file(out_path(opt, summary_name), summary.dump(2) + "\n");
  if (opt.format == "json") {
    std::cout << summary.dump(2) << "\n";
  } else {
    std::ostringstream os;
    write_estimate_csv(est, os);
    std::cout << os.str();
  }
  return 0;
}

inline int run_simulate(const json& doc, const CommonConfig& c,
                        const RunOptions& opt) {
  check_keys(doc,
             {"schema_version", "kind", "seed", "grid", "process", "n_paths",
              "stop_rule", "stop_anchor_index", "output"},
             "simulate config");
  const SpecPtr spec = parse_process(need(doc, "process", "simulate"));
  const auto n_paths = doc.value("n_paths", std::size_t{1});
  require(n_paths >= 1, Errc::config_error, "n_paths must be >= 1");
  const std::string prefix =
      c.output.is_object() ? c.output.value("paths_prefix", std::string("path"))
                           : std::string("path");

  std::optional<StoppingRule> stop_rule;
  if (doc.contains("stop_rule")) stop_rule = parse_rule(doc.at("stop_rule"));
  const auto anchor_index = doc.value("stop_anchor_index", std::size_t{0});

  std::vector<RealizedStop> stops;
  for (std::size_t i = 0; i < n_paths; ++i) {
    const SamplePath p =
        simulate(*spec, c.grid, path_seed(c.seed, streams::ensemble, i));
    std::ostringstream os;
    write_csv(p, os);
    const std::string name = n_paths == 1
                                 ? prefix + ".csv"
                                 : prefix + "_" + std::to_string(i) + ".csv";
    write_text_file(out_path(opt, name), os.str());
    if (stop_rule) stops.push_back(realize(*stop_rule, p, anchor_index));
  }
  if (stop_rule) {
    std::ostringstream os;
    write_stops_csv(stops, os);
    const std::string name =
        c.output.is_object() ? c.output.value("stops", std::string("stops.csv"))
                             : std::string("stops.csv");
    write_text_file(out_path(opt, name), os.str());
  }
  std::cout << "simulate: wrote " << n_paths << " path(s)\n";
  return 0;
}

inline int run_estimate(const json& doc, const std::string& kind,
                        const CommonConfig& c, const RunOptions& opt) {
  check_keys(doc,
             {"schema_version", "kind", "seed", "grid", "process", "process_x",
              "process_y", "coord_x", "coord_y", "anchor", "family", "sizes",
              "tolerances", "variant", "f", "output"},
             kind + " config");
  const EstimatorConfig ecfg = parse_estimator(doc, c, opt);
  if (kind == "drift") {
    const SpecPtr spec = parse_process(need(doc, "process", kind));
    return emit_estimate(drift_at(*spec, ecfg), kind, c, opt);
  }
  if (kind == "variance_rate") {
    const SpecPtr spec = parse_process(need(doc, "process", kind));
    VarianceVariant variant = VarianceVariant::cond_var;
    const std::string v = doc.value("variant", std::string("cond_var"));
    if (v == "cond_var")
      variant = VarianceVariant::cond_var;
    else if (v == "rel_second_moment")
      variant = VarianceVariant::rel_second_moment;
    else if (v == "projected_centre")
      variant = VarianceVariant::projected_centre;
    else
      raise(Errc::config_error, "unknown variance variant '" + v + "'");
    return emit_estimate(variance_rate_at(*spec, ecfg, variant), kind, c, opt);
  }
  if (kind == "covariance") {
    const SpecPtr spec = parse_process(need(doc, "process", kind));
    require(driver_dim(*spec) >= 2, Errc::config_error,
            "covariance needs a vector process");
    const auto cx = doc.value("coord_x", std::size_t{0});
    const auto cy = doc.value("coord_y", std::size_t{1});
    auto leaf = std::make_shared<ProcessSpec>(driver_of(*spec));
    return emit_estimate(
        covariance_rate_at(*coordinate(leaf, cx), *coordinate(leaf, cy), ecfg),
        kind, c, opt);
  }
  if (kind == "characteristic") {
    const SpecPtr spec = parse_process(need(doc, "process", kind));
    const auto f = parse_scalar_function(need(doc, "f", kind));
    return emit_estimate(characteristic_at(*spec, f, ecfg), kind, c, opt);
  }
  raise(Errc::config_error, "unknown estimate kind '" + kind + "'");
}

inline int emit_reports(const std::vector<CheckReport>& reports,
                        const CommonConfig& c, const RunOptions& opt) {
  const std::string csv_name =
      c.output.is_object() ? c.output.value("summary", std::string("summary.csv"))
                           : std::string("summary.csv");
  const std::string json_name =
      c.output.is_object() ? c.output.value("report", std::string("report.json"))
                           : std::string("report.json");
  {
    std::ostringstream os;
    emit_report_csv(reports, os);
    write_text_file(out_path(opt, csv_name), os.str());
  }
  write_text_file(out_path(opt, json_name),
                  emit_report_json(reports).dump(2) + "\n");
  if (opt.format == "json") {
    std::cout << emit_report_json(reports).dump(2) << "\n";
  } else {
    std::ostringstream os;
    emit_report_csv(reports, os);
    std::cout << os.str();
  }
  bool all_pass = true;
  for (const auto& r : reports)
    if (r.verdict != Verdict::pass) all_pass = false;
  return all_pass ? 0 : 1;
}

inline int run_check(const json& doc, const std::string& name,
                     const CommonConfig& c, const RunOptions& opt) {
  check_keys(doc,
             {"schema_version", "kind", "seed", "grid", "process", "process_a",
              "process_b", "anchor", "anchors", "family", "sizes", "tolerances",
              "c0", "b", "sigma", "rate", "t_qv", "t", "n_samples", "n_paths",
              "n_increments", "alpha", "z", "output"},
             "check config");

  ScenarioConfig scfg;
  scfg.grid = c.grid;
  scfg.seed = c.seed;
  scfg.threads = opt.threads;
  if (doc.contains("anchor")) scfg.anchor = parse_rule(doc.at("anchor"));
  if (doc.contains("family")) scfg.family = parse_family(doc.at("family"));
  if (doc.contains("sizes")) {
    const auto& s = doc.at("sizes");
    check_keys(s, {"outer", "continuations"}, "sizes");
    scfg.n_outer = s.value("outer", std::size_t{200});
    scfg.m_cont = s.value("continuations", std::size_t{1000});
  }
  if (doc.contains("tolerances")) {
    const auto& t = doc.at("tolerances");
    check_keys(t, {"tol_abs", "tol_smallest"}, "tolerances");
    scfg.tol_abs = t.value("tol_abs", 2e-3);
    scfg.tol_smallest = t.value("tol_smallest", -1.0);
  }
  scfg.z = doc.value("z", 3.0);

  std::vector<StoppingRule> anchors;
  if (doc.contains("anchors"))
    for (const auto& a : doc.at("anchors")) anchors.push_back(parse_rule(a));
  if (anchors.empty()) anchors.push_back(scfg.anchor);

  std::vector<CheckReport> reports;
  for (const RuleId id : all_rule_ids()) {
    if (name == rule_name(id)) {
      reports.push_back(check_identity(id, scfg));
      return emit_reports(reports, c, opt);
    }
  }
  if (name == "ZeroDrift") {
    const SpecPtr spec = parse_process(need(doc, "process", "check"));
    reports.push_back(check_zero_drift(*spec, anchors, scfg));
  } else if (name == "FTC") {
    reports.push_back(check_ftc(doc.value("c0", 0.0),
                                parse_adaptation(need(doc, "b", "check")),
                                parse_adaptation(need(doc, "sigma", "check")),
                                anchors, scfg));
  } else if (name == "QuadraticVariation") {
    const SpecPtr spec = parse_process(need(doc, "process", "check"));
    reports.push_back(check_quadratic_variation(
        *spec, parse_adaptation(need(doc, "rate", "check")),
        doc.value("t_qv", 1.0), anchors, scfg));
  } else if (name == "LevyTimeChange") {
    const SpecPtr spec = parse_process(need(doc, "process", "check"));
    LevyOptions lo;
    lo.n_paths = doc.value("n_paths", std::size_t{2000});
    lo.n_increments = doc.value("n_increments", std::size_t{8});
    lo.alpha = doc.value("alpha", 0.01);
    reports.push_back(check_levy_time_change(
        *spec, parse_adaptation(need(doc, "rate", "check")), scfg, lo));
  } else if (name == "DistinctDistributions") {
    const SpecPtr a = parse_process(need(doc, "process_a", "check"));
    const SpecPtr b = parse_process(need(doc, "process_b", "check"));
    reports.push_back(check_distinct_distributions(
        *a, *b, doc.value("t", 1.0), doc.value("n_samples", std::size_t{2000}),
        scfg, doc.value("alpha", 0.01)));
  } else {
    raise(Errc::config_error, "unknown check name '" + name + "'");
  }
  return emit_reports(reports, c, opt);
}

}  // namespace cfgdetail

inline int dispatch_config(const json& doc, const RunOptions& opt) {
  require(doc.is_object(), Errc::config_error, "config root must be an object");
  require(doc.contains("schema_version"), Errc::config_error,
          "missing required field 'schema_version'");
  require(doc.at("schema_version").get<int>() == 1, Errc::config_error,
          "unsupported schema_version (expected 1)");
  const std::string kind =
      cfgdetail::need(doc, "kind", "config").get<std::string>();
  const cfgdetail::CommonConfig common = cfgdetail::parse_common(doc, opt);

  if (kind == "simulate") return cfgdetail::run_simulate(doc, common, opt);
  if (kind == "drift" || kind == "variance_rate" || kind == "covariance" ||
      kind == "characteristic")
    return cfgdetail::run_estimate(doc, kind, common, opt);
  if (kind.rfind("check:", 0) == 0)
    return cfgdetail::run_check(doc, kind.substr(6), common, opt);
  raise(Errc::config_error, "unknown experiment kind '" + kind + "'");
}

inline int run_config_file(const std::string& path, const RunOptions& opt) {
  json doc;
  {
    std::ifstream is(path);
    require(static_cast<bool>(is), Errc::config_error,
            "cannot open config file " + path);
    try {
      is >> doc;
    } catch (const json::exception& e) {
      raise(Errc::config_error, std::string("config parse error: ") + e.what());
    }
  }
  return dispatch_config(doc, opt);
}

inline int run_suite_command(const RunOptions& opt, std::uint64_t seed) {
  SuiteOptions so;
  so.seed = seed;
  so.threads = opt.threads;
  const auto reports = run_builtin_suite(so);
  cfgdetail::CommonConfig common;
  common.seed = seed;
  return cfgdetail::emit_reports(reports, common, opt);
}

// Maps an exception to the documented exit code and writes the JSON error
// record to stderr.
inline int handle_run_error(const std::exception& e) {
  const auto* err = dynamic_cast<const Error*>(&e);
  json record;
  int code = 3;
  if (err) {
    record = json{{"error",
                   {{"code", errc_name(err->code())}, {"message", err->what()}}}};
    code = (err->code() == Errc::config_error ||
            err->code() == Errc::invalid_parameter)
               ? 2
               : 3;
  } else {
    record = json{{"error", {{"code", "Unhandled"}, {"message", e.what()}}}};
  }
  std::cerr << record.dump() << "\n";
  return code;
}

}  // namespace driftlab
