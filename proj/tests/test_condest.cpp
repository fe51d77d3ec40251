#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "driftlab/condest.hpp"
#include "driftlab/stats.hpp"

using namespace driftlab;

namespace {

Bundle make_bm_bundle(std::size_t s_idx, std::size_t extent, std::size_t m,
                      std::uint64_t seed, const TimeGrid& g) {
  const auto bm = brownian(0.0);
  const VectorPath outer = simulate_driver(*bm, g, hash_combine(seed, 1));
  return branch_continuations(*bm, outer, s_idx, m, extent, hash_combine(seed, 2));
}

}  // namespace

TEST_CASE("frozen dynamics: CondExp is X_S and CondVar is zero", "[condest]") {
  const TimeGrid g = make_grid(0.01, 100);
  const auto frozen = ito(1.5, constant_adaptation(0.0), constant_adaptation(0.0));
  const VectorPath outer = simulate_driver(*frozen, g, 3);
  const Bundle b = branch_continuations(*frozen, outer, 30, 64, 100, 4);
  const ObservedBundle ob = observe_bundle(b, *frozen);

  const auto ce = bundle_moment(MomentKind::cond_exp(), ob,
                                StoppingRule(OffsetFromS{0.2}));
  CHECK(ce.value == 1.5);
  CHECK(ce.denominator == Catch::Approx(0.2));

  const auto cv = bundle_moment(MomentKind::cond_var(), ob,
                                StoppingRule(OffsetFromS{0.2}));
  CHECK(cv.value == 0.0);
}

TEST_CASE("CondExp at T = S is exactly X_S", "[condest]") {
  const TimeGrid g = make_grid(0.01, 200);
  const Bundle b = make_bm_bundle(80, 200, 32, 55, g);
  const ObservedBundle ob = observe_bundle(b, *brownian(0.0));
  const auto ce = bundle_moment(MomentKind::cond_exp(), ob,
                                StoppingRule(AtTime{g.time(80)}));
  CHECK(ce.value == ob.x_s);
  CHECK(ce.denominator == 0.0);
}

TEST_CASE("Brownian relative second moment estimates h", "[condest]") {
  const TimeGrid g = make_grid(1e-3, 1000);
  const double h = 0.3;
  const std::size_t m = 4000;
  const Bundle b = make_bm_bundle(200, 1000, m, 77, g);
  const ObservedBundle ob = observe_bundle(b, *brownian(0.0));
  const auto rsm = bundle_moment(MomentKind::rel_second_moment(), ob,
                                 StoppingRule(OffsetFromS{h}));
  // E (dW)^2 = h, Var((dW)^2) = 2 h^2.
  CHECK(std::abs(rsm.value - h) <= 3.0 * h * std::sqrt(2.0 / m));
  CHECK(rsm.denominator == Catch::Approx(h));
}

TEST_CASE("CondVar equals RSM minus squared mean displacement", "[condest]") {
  const TimeGrid g = make_grid(1e-3, 1000);
  const auto drifted =
      ito(0.4, constant_adaptation(0.7), constant_adaptation(0.9));
  const VectorPath outer = simulate_driver(*drifted, g, 41);
  const Bundle b = branch_continuations(*drifted, outer, 300, 1000, 900, 42);
  const ObservedBundle ob = observe_bundle(b, *drifted);
  const StoppingRule rule{OffsetFromS{0.25}};

  const double cv = bundle_moment(MomentKind::cond_var(), ob, rule).value;
  const double rsm = bundle_moment(MomentKind::rel_second_moment(), ob, rule).value;
  const double ce = bundle_moment(MomentKind::cond_exp(), ob, rule).value;
  const double reconstructed = rsm - (ce - ob.x_s) * (ce - ob.x_s);
  CHECK(std::abs(cv - reconstructed) <=
        std::pow(2.0, -40.0) * (std::abs(cv) + std::abs(reconstructed)));
}

TEST_CASE("projected and integrated centres reduce to RSM when centred",
          "[condest]") {
  const TimeGrid g = make_grid(1e-3, 1000);
  const Bundle b = make_bm_bundle(100, 800, 256, 91, g);
  const ObservedBundle ob = observe_bundle(b, *brownian(0.0));
  const StoppingRule rule{OffsetFromS{0.2}};
  const double rsm = bundle_moment(MomentKind::rel_second_moment(), ob, rule).value;
  const double proj0 =
      bundle_moment(MomentKind::projected_centre(0.0), ob, rule).value;
  const double int0 =
      bundle_moment(MomentKind::integrated_drift_centre(constant_adaptation(0.0)),
                    ob, rule)
          .value;
  CHECK(proj0 == rsm);
  CHECK(int0 == rsm);

  // A nonzero slope changes the centre: E (dW - b h)^2 = h + b^2 h^2.
  const double proj =
      bundle_moment(MomentKind::projected_centre(2.0), ob, rule).value;
  CHECK(proj == Catch::Approx(0.2 + 4.0 * 0.04).epsilon(0.25));
}

TEST_CASE("CondCov of a coordinate with itself matches CondVar bitwise",
          "[condest]") {
  const TimeGrid g = make_grid(1e-3, 600);
  const Bundle b = make_bm_bundle(100, 600, 128, 123, g);
  const ObservedBundle ob = observe_bundle(b, *brownian(0.0));
  const StoppingRule rule{OffsetFromS{0.15}};
  const auto var = bundle_moment(MomentKind::cond_var(), ob, rule);
  const auto cov = bundle_moment(MomentKind::cond_cov(), ob, rule, &ob);
  CHECK(var.value == cov.value);
  CHECK(var.stderr_ == cov.stderr_);
}

TEST_CASE("sample covariance matrix of a bundle is PSD", "[condest]") {
  const TimeGrid g = make_grid(1e-3, 600);
  const auto tri = correlated_bm(3, {1.0, 0.5, 0.2,
                                     0.5, 1.0, -0.3,
                                     0.2, -0.3, 1.0});
  const VectorPath outer = simulate_driver(*tri, g, 8);
  const Bundle b = branch_continuations(*tri, outer, 100, 500, 600, 9);
  auto leaf = std::make_shared<ProcessSpec>(driver_of(*tri));
  std::vector<ObservedBundle> obs;
  for (std::size_t i = 0; i < 3; ++i)
    obs.push_back(observe_bundle(b, *coordinate(leaf, i)));
  const StoppingRule rule{OffsetFromS{0.2}};
  const auto stops = realize_on_bundle(obs[0], rule);
  std::vector<double> cov(9);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      cov[i * 3 + j] =
          bundle_moment(MomentKind::cond_cov(), obs[i], stops, &obs[j]).value;
  const auto eig = sym_eigenvalues(cov, 3);
  CHECK(eig.front() >= -1e-12);
}

TEST_CASE("exact partition property of bundle estimators", "[condest]") {
  const TimeGrid g = make_grid(1e-3, 800);
  const PrefixPredicate pos = [](const PrefixView& p, std::size_t s) {
    return p.values[s] > 0.0;
  };
  const PrefixPredicate nonpos = [](const PrefixView& p, std::size_t s) {
    return p.values[s] <= 0.0;
  };
  const std::vector<StoppingRule> branch_rules = {StoppingRule(OffsetFromS{0.1}),
                                                  StoppingRule(OffsetFromS{0.2})};
  const StoppingRule glued{
      PartitionGlue{{pos, nonpos}, {branch_rules[0], branch_rules[1]}}};

  for (std::uint64_t trial = 0; trial < 12; ++trial) {
    const Bundle b = make_bm_bundle(250, 800, 64, 1000 + trial, g);
    const ObservedBundle ob = observe_bundle(b, *brownian(0.0));
    // Branch selected by the prefix event (shared by all continuations).
    const SamplePath outer_path{b.outer.grid, b.outer.coords[0]};
    const std::size_t sel = outer_path.values[b.s_idx] > 0.0 ? 0 : 1;
    for (const auto kind :
         {MomentKind::cond_exp(), MomentKind::cond_var(),
          MomentKind::rel_second_moment(), MomentKind::projected_centre(0.7)}) {
      const auto via_glue = bundle_moment(kind, ob, glued);
      const auto via_branch = bundle_moment(kind, ob, branch_rules[sel]);
      CHECK(via_glue.value == via_branch.value);
      CHECK(via_glue.denominator == via_branch.denominator);
      CHECK(via_glue.stderr_ == via_branch.stderr_);
    }
  }
}

TEST_CASE("stopping continuity probe", "[condest]") {
  const TimeGrid g = make_grid(1e-4, 10000);
  const std::vector<StoppingRule> family = {
      StoppingRule(OffsetFromS{0.1}), StoppingRule(OffsetFromS{0.05}),
      StoppingRule(OffsetFromS{0.025}), StoppingRule(OffsetFromS{0.0125})};

  SECTION("Brownian deviations shrink at CLT scale") {
    const std::size_t m = 2000;
    const Bundle b = make_bm_bundle(2000, 4000, m, 314, g);
    const ObservedBundle ob = observe_bundle(b, *brownian(0.0));
    const auto exp_dev =
        stopping_continuity_probe(MomentKind::Kind::cond_exp, ob, family);
    for (std::size_t j = 0; j < family.size(); ++j) {
      const double h = 0.1 * std::pow(0.5, j);
      CHECK(exp_dev[j] <= 4.0 * std::sqrt(h / m));
    }
    const auto var_dev =
        stopping_continuity_probe(MomentKind::Kind::cond_var, ob, family);
    for (std::size_t j = 0; j < family.size(); ++j) {
      const double h = 0.1 * std::pow(0.5, j);
      CHECK(var_dev[j] == Catch::Approx(h).epsilon(0.2));
    }
    CHECK(var_dev.front() > var_dev.back());
  }

  SECTION("frozen dynamics give exactly zero deviations") {
    const auto frozen =
        ito(0.8, constant_adaptation(0.0), constant_adaptation(0.0));
    const VectorPath outer = simulate_driver(*frozen, g, 1);
    const Bundle b = branch_continuations(*frozen, outer, 2000, 16, 4000, 2);
    const ObservedBundle ob = observe_bundle(b, *frozen);
    for (const double dev :
         stopping_continuity_probe(MomentKind::Kind::cond_exp, ob, family))
      CHECK(dev == 0.0);
    for (const double dev :
         stopping_continuity_probe(MomentKind::Kind::cond_var, ob, family))
      CHECK(dev == 0.0);
  }
}

TEST_CASE("bundle moment error paths", "[condest]") {
  const TimeGrid g = make_grid(0.01, 100);

  SECTION("fewer than two continuations") {
    const auto bm = brownian(0.0);
    const VectorPath outer = simulate_driver(*bm, g, 5);
    CHECK_THROWS_AS(branch_continuations(*bm, outer, 10, 1, 100, 6), Error);
  }

  SECTION("stopping family collapsed onto the anchor") {
    const Bundle b = make_bm_bundle(50, 100, 16, 21, g);
    const ObservedBundle ob = observe_bundle(b, *brownian(0.0));
    try {
      bundle_moment(MomentKind::cond_var(), ob, StoppingRule(AtTime{g.time(50)}));
      FAIL("expected DegenerateStoppingFamily");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::degenerate_stopping_family);
    }
    // CondExp stays defined at T = S.
    CHECK_NOTHROW(
        bundle_moment(MomentKind::cond_exp(), ob, StoppingRule(AtTime{g.time(50)})));
  }
}
