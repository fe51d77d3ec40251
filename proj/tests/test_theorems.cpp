#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "driftlab/runner.hpp"
#include "driftlab/theorems.hpp"
#include "driftlab/tuning.hpp"

using namespace driftlab;

namespace {
// Keep the arena warm for every heavy test in this binary.
const bool tuned = [] {
  tune_allocator();
  return true;
}();
}  // namespace

TEST_CASE("phi with unit rate is the identity", "[theorems]") {
  const TimeGrid g = make_grid(0.01, 300);
  const SamplePath f = simulate(*brownian(0.2), g, 99);
  const SamplePath out = phi_apply(constant_adaptation(1.0), f);
  REQUIRE(out.grid.n_steps == g.n_steps);
  for (std::size_t k = 0; k <= out.grid.n_steps; ++k)
    CHECK(out.values[k] == f.values[k]);
}

TEST_CASE("phi with constant rate rescales time", "[theorems]") {
  const TimeGrid g = make_grid(0.01, 400);
  SamplePath f{g, {}};
  f.values.resize(g.n_steps + 1);
  for (std::size_t k = 0; k <= g.n_steps; ++k) f.values[k] = g.time(k);
  // a = 4: intrinsic time runs four times faster, g(s) = f(s/4) = s/4.
  const SamplePath out = phi_apply(constant_adaptation(4.0), f);
  CHECK(out.grid.horizon() == Catch::Approx(16.0).margin(0.05));
  for (double s : {0.5, 1.0, 5.0, 12.0})
    CHECK(cadlag_eval(out, s) == Catch::Approx(s / 4.0).margin(2.0 * g.dt));
}

TEST_CASE("phi round trip reproduces the path on the overlap", "[theorems]") {
  const Adaptation rate = [](const PrefixView& p, std::size_t k) {
    return std::clamp(1.0 + 0.5 * std::abs(p.values[k]), 0.5, 2.0);
  };
  double prev_err = -1.0;
  for (const double dt : {2e-3, 1e-3}) {
    const TimeGrid g = grid_for_horizon(dt, 2.0);
    const SamplePath f = simulate(*brownian(0.0), g, 1234);
    const SamplePath fwd = phi_apply(rate, f);
    const SamplePath back = phi_invert(rate, fwd, g);
    REQUIRE(back.grid.n_steps >= g.n_steps / 2);
    double max_err = 0.0;
    double max_step = 0.0;
    for (std::size_t k = 0; k + 1 <= back.grid.n_steps; ++k) {
      max_err = std::max(max_err, std::abs(back.values[k] - f.values[k]));
      max_step = std::max(max_step, std::abs(f.values[k + 1] - f.values[k]));
    }
    // Index mismatch is at most ceil(max rate) + 1 grid cells.
    CHECK(max_err <= 3.0 * max_step);
    if (prev_err >= 0.0) CHECK(max_err <= prev_err);
    prev_err = max_err;
  }
}

TEST_CASE("phi errors", "[theorems]") {
  const TimeGrid g = make_grid(0.01, 100);
  const SamplePath f = simulate(*brownian(0.0), g, 3);
  CHECK_THROWS_AS(phi_apply(constant_adaptation(-1.0), f), Error);
  // Rate too small to reach one output grid step.
  try {
    phi_apply(constant_adaptation(1e-6), f);
    FAIL("expected InsufficientIntrinsicTime");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::insufficient_intrinsic_time);
  }
}

TEST_CASE("expected failure: identical laws are not distinguished",
          "[theorems]") {
  ScenarioConfig cfg;
  cfg.grid = grid_for_horizon(0.01, 1.0);
  cfg.seed = 2025;
  const auto rep = check_distinct_distributions(*brownian(0.0), *brownian(0.0),
                                                1.0, 2000, cfg, 0.01,
                                                "SameLawFixture");
  CHECK(rep.verdict == Verdict::fail);  // the harness must NOT reject
}

TEST_CASE("expected failure: exit-indicator rate exhausts intrinsic time",
          "[theorems]") {
  // Stopped Brownian motion with the exit indicator as claimed variance rate:
  // the cumulative table is bounded by the exit time, so unit increments past
  // it are unreachable.
  ScenarioConfig cfg;
  cfg.grid = grid_for_horizon(1e-3, 10.0);
  cfg.seed = 77;
  const auto spec = stopped(brownian(0.0), StoppingRule(Debut{1.0}));
  const Adaptation gate = [](const PrefixView& p, std::size_t) {
    double mx = p.values[0];
    for (double v : p.values) mx = std::max(mx, v);
    return mx < 1.0 ? 1.0 : 0.0;
  };
  LevyOptions lo;
  lo.n_paths = 50;
  lo.n_increments = 8;
  try {
    check_levy_time_change(*spec, gate, cfg, lo, "ExhaustedFixture");
    FAIL("expected InsufficientIntrinsicTime");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::insufficient_intrinsic_time);
  }
}

TEST_CASE("identity reports are bit-identical across thread counts",
          "[theorems]") {
  ScenarioConfig cfg;
  cfg.n_outer = 24;
  cfg.m_cont = 64;
  cfg.seed = 5150;
  cfg.threads = 1;
  const CheckReport one = check_identity(RuleId::linearity, cfg);
  cfg.threads = 4;
  const CheckReport four = check_identity(RuleId::linearity, cfg);
  CHECK(one.left == four.left);
  CHECK(one.right == four.right);
  CHECK(one.diff_extrap == four.diff_extrap);
  CHECK(one.diff_extrap_stderr == four.diff_extrap_stderr);
  CHECK(one.diff_smallest == four.diff_smallest);
  CHECK(verdict_name(one.verdict) == std::string(verdict_name(four.verdict)));
}

TEST_CASE("variance-rate variants give matching verdicts", "[theorems]") {
  // Same scenario, all variants: each must land on the same (pass) verdict
  // against the known variance rate.
  const double sigma = 0.7;
  const auto spec =
      ito(0.0, constant_adaptation(0.3), constant_adaptation(sigma));
  EstimatorConfig cfg;
  cfg.grid = make_grid(1e-4, 7000);
  cfg.anchor = StoppingRule(AtTime{0.5});
  cfg.n_outer = 100;
  cfg.m_cont = 800;
  cfg.seed = 31415;
  VarianceOptions opts;
  opts.drift_integrand = constant_adaptation(0.3);
  std::map<std::string, bool> verdicts;
  const auto band_ok = [](const DerivEstimate& est, double target) {
    return std::abs(est.extrapolated - target) <=
           std::max(0.02, 3.0 * est.extrapolated_stderr);
  };
  verdicts["cond_var"] =
      band_ok(variance_rate_at(*spec, cfg, VarianceVariant::cond_var),
              sigma * sigma);
  verdicts["rel_second_moment"] =
      band_ok(variance_rate_at(*spec, cfg, VarianceVariant::rel_second_moment),
              sigma * sigma);
  verdicts["projected_centre"] =
      band_ok(variance_rate_at(*spec, cfg, VarianceVariant::projected_centre),
              sigma * sigma);
  verdicts["integrated_drift_centre"] = band_ok(
      variance_rate_at(*spec, cfg, VarianceVariant::integrated_drift_centre, opts),
      sigma * sigma);
  for (const auto& [name, ok] : verdicts) {
    INFO(name);
    CHECK(ok);
  }
}

TEST_CASE("canonical regression suite passes end to end", "[theorems][suite]") {
  SuiteOptions opt;
  opt.seed = 42;
  opt.threads = 1;
  const auto reports = run_builtin_suite(opt);
  REQUIRE(reports.size() >= 19);
  // Lexicographic id order is part of the emission contract.
  for (std::size_t i = 1; i < reports.size(); ++i)
    CHECK(reports[i - 1].id < reports[i].id);
  for (const auto& r : reports) {
    INFO(r.id << ": left " << r.left << " right " << r.right << " note "
              << r.note);
    CHECK(r.verdict == Verdict::pass);
  }
  // Every calculus rule id appears exactly once.
  for (const RuleId id : all_rule_ids()) {
    std::size_t hits = 0;
    for (const auto& r : reports)
      if (r.id == rule_name(id)) ++hits;
    CHECK(hits == 1);
  }
}
