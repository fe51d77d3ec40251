#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "driftlab/processes.hpp"
#include "driftlab/stats.hpp"
#include "driftlab/stopping.hpp"

using namespace driftlab;

namespace {

SamplePath linear_path(const TimeGrid& g) {
  SamplePath p{g, {}};
  p.values.resize(g.n_steps + 1);
  for (std::size_t k = 0; k <= g.n_steps; ++k) p.values[k] = g.time(k);
  return p;
}

}  // namespace

TEST_CASE("first exit on a linear path stops near epsilon", "[stopping]") {
  const TimeGrid g = make_grid(0.01, 200);
  const SamplePath p = linear_path(g);
  const RealizedStop rs = realize(StoppingRule(FirstExit{0.1, 1.0}), p, 0);
  REQUIRE_FALSE(rs.capped);
  // First k with k*dt >= eps.
  CHECK(rs.index == 10);
  CHECK(g.time(rs.index) == Catch::Approx(0.1));
}

TEST_CASE("first exit mean time for Brownian motion approaches eps^2",
          "[stopping][slow]") {
  // E[exit of (-eps, eps)] = eps^2; grid monitoring biases it upward by
  // about 2*eps*0.5826*sqrt(dt), well inside the band checked here.
  const TimeGrid g = grid_for_horizon(1e-5, 0.2);
  const auto bm = brownian(0.0);
  const std::size_t n = 4000;
  std::vector<double> exits;
  exits.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const SamplePath p = simulate(*bm, g, path_seed(606, streams::ensemble, i));
    const RealizedStop rs = realize(StoppingRule(FirstExit{0.1, 0.2}), p, 0);
    REQUIRE_FALSE(rs.capped);
    exits.push_back(g.time(rs.index));
  }
  const double mean = sample_mean(exits);
  CHECK(mean == Catch::Approx(0.01).margin(0.0008));
}

TEST_CASE("debut caps at the horizon when the level is unreachable",
          "[stopping]") {
  const TimeGrid g = make_grid(0.01, 100);
  const SamplePath p = linear_path(g);  // reaches 1.0 at the last point
  const RealizedStop hit = realize(StoppingRule(Debut{0.55}), p, 0);
  CHECK_FALSE(hit.capped);
  CHECK(g.time(hit.index) == Catch::Approx(0.55));

  const RealizedStop missed = realize(StoppingRule(Debut{2.0}), p, 0);
  CHECK(missed.capped);
  CHECK(missed.index == g.n_steps);
}

TEST_CASE("at-time and offset rules round down and respect T >= S",
          "[stopping]") {
  const TimeGrid g = make_grid(0.01, 100);
  const SamplePath p = linear_path(g);
  CHECK(realize(StoppingRule(AtTime{0.347}), p, 0).index == 34);
  CHECK(realize(StoppingRule(AtTime{0.1}), p, 50).index == 50);  // clamped to S
  CHECK(realize(StoppingRule(OffsetFromS{0.125}), p, 20).index == 32);
  const RealizedStop past = realize(StoppingRule(OffsetFromS{2.0}), p, 90);
  CHECK(past.capped);
  CHECK(past.index == g.n_steps);
}

TEST_CASE("min of rules is the pointwise index minimum", "[stopping]") {
  const TimeGrid g = make_grid(0.01, 300);
  const auto bm = brownian(0.0);
  for (std::size_t i = 0; i < 20; ++i) {
    const SamplePath p = simulate(*bm, g, path_seed(17, 3, i));
    const StoppingRule a{FirstExit{0.15, 3.0}};
    const StoppingRule b{OffsetFromS{0.5}};
    const RealizedStop ra = realize(a, p, 0);
    const RealizedStop rb = realize(b, p, 0);
    const RealizedStop rmin = realize(StoppingRule(MinOf{{a, b}}), p, 0);
    CHECK(rmin.index == std::min(ra.index, rb.index));
  }
  CHECK_THROWS_AS(realize(StoppingRule(MinOf{{}}), linear_path(g), 0), Error);
}

TEST_CASE("first exit realization is monotone in epsilon", "[stopping]") {
  const TimeGrid g = make_grid(0.01, 400);
  const auto bm = brownian(0.0);
  for (std::size_t i = 0; i < 25; ++i) {
    const SamplePath p = simulate(*bm, g, path_seed(23, 4, i));
    std::size_t prev = 0;
    for (double eps : {0.05, 0.1, 0.2, 0.4}) {
      const RealizedStop rs = realize(StoppingRule(FirstExit{eps, 4.0}), p, 0);
      CHECK(rs.index >= prev);
      prev = rs.index;
    }
  }
}

TEST_CASE("every rule realizes at or after the anchor", "[stopping]") {
  const TimeGrid g = make_grid(0.01, 200);
  const auto bm = brownian(0.0);
  const std::vector<StoppingRule> rules = {
      StoppingRule(AtTime{0.05}),    StoppingRule(OffsetFromS{0.3}),
      StoppingRule(FirstExit{0.2, 1.0}), StoppingRule(Debut{0.5}),
      StoppingRule(MinOf{{StoppingRule(AtTime{0.01}), StoppingRule(Debut{0.1})}}),
  };
  for (std::size_t i = 0; i < 10; ++i) {
    const SamplePath p = simulate(*bm, g, path_seed(31, 5, i));
    for (std::size_t s_idx : {0u, 60u, 150u}) {
      for (const auto& r : rules) {
        const RealizedStop rs = realize(r, p, s_idx);
        CHECK(rs.index >= s_idx);
        CHECK(rs.index <= g.n_steps);
      }
    }
  }
}

TEST_CASE("partition glue selects the branch whose event holds", "[stopping]") {
  const TimeGrid g = make_grid(0.01, 300);
  const auto bm = brownian(0.0);

  const PrefixPredicate positive = [](const PrefixView& p, std::size_t s) {
    return p.values[s] > 0.0;
  };
  const PrefixPredicate nonpositive = [](const PrefixView& p, std::size_t s) {
    return p.values[s] <= 0.0;
  };
  const StoppingRule short_rule{OffsetFromS{0.1}};
  const StoppingRule long_rule{OffsetFromS{0.2}};

  SECTION("trivial partition equals its sole rule") {
    const PrefixPredicate whole = [](const PrefixView&, std::size_t) {
      return true;
    };
    for (std::size_t i = 0; i < 10; ++i) {
      const SamplePath p = simulate(*bm, g, path_seed(47, 6, i));
      const RealizedStop glued =
          realize(StoppingRule(PartitionGlue{{whole}, {short_rule}}), p, 50);
      const RealizedStop direct = realize(short_rule, p, 50);
      CHECK(glued.index == direct.index);
      CHECK(glued.capped == direct.capped);
    }
  }

  SECTION("two-branch split on the sign of X_S") {
    for (std::size_t i = 0; i < 25; ++i) {
      const SamplePath p = simulate(*bm, g, path_seed(47, 7, i));
      const std::size_t s_idx = 100;
      const RealizedStop glued = realize(
          StoppingRule(PartitionGlue{{positive, nonpositive},
                                     {short_rule, long_rule}}),
          p, s_idx);
      const RealizedStop expected =
          p.values[s_idx] > 0.0 ? realize(short_rule, p, s_idx)
                                : realize(long_rule, p, s_idx);
      CHECK(glued.index == expected.index);
    }
  }

  SECTION("violations are rejected") {
    const SamplePath p = simulate(*bm, g, path_seed(47, 8, 0));
    try {
      realize(StoppingRule(PartitionGlue{{positive, positive},
                                         {short_rule, long_rule}}),
              p, 0);  // X_0 = 0: no event holds
      FAIL("expected PartitionViolation");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::partition_violation);
    }
    const PrefixPredicate always = [](const PrefixView&, std::size_t) {
      return true;
    };
    CHECK_THROWS_AS(
        realize(StoppingRule(PartitionGlue{{always, always},
                                           {short_rule, long_rule}}),
                p, 0),
        Error);
  }

  SECTION("glue_partition over pre-realized branches matches rule-level glue") {
    for (std::size_t i = 0; i < 25; ++i) {
      const SamplePath p = simulate(*bm, g, path_seed(47, 9, i));
      const std::size_t s_idx = 120;
      const std::vector<RealizedStop> branch = {realize(short_rule, p, s_idx),
                                                realize(long_rule, p, s_idx)};
      const RealizedStop glued =
          glue_partition({positive, nonpositive}, branch, p, s_idx);
      const RealizedStop via_rule = realize(
          StoppingRule(PartitionGlue{{positive, nonpositive},
                                     {short_rule, long_rule}}),
          p, s_idx);
      CHECK(glued.index == via_rule.index);
    }
  }
}

TEST_CASE("time change with unit and constant rates", "[stopping]") {
  const TimeGrid g = make_grid(0.01, 400);
  const SamplePath p = linear_path(g);

  const TimeChangeRealization unit =
      realize_time_change(constant_adaptation(1.0), p);
  bool capped = false;
  for (double s : {0.0, 0.1, 0.25, 3.99}) {
    const std::size_t k = unit.lookup(s, capped);
    CHECK_FALSE(capped);
    CHECK(g.time(k) == Catch::Approx(s).margin(g.dt + 1e-12));
  }

  const TimeChangeRealization four =
      realize_time_change(constant_adaptation(4.0), p);
  const std::size_t k = four.lookup(1.0, capped);
  CHECK_FALSE(capped);
  CHECK(g.time(k) == Catch::Approx(0.25).margin(g.dt + 1e-12));
}

TEST_CASE("indicator rate flattens the cumulative table and caps lookups",
          "[stopping]") {
  const TimeGrid g = make_grid(0.01, 400);
  const SamplePath p = linear_path(g);  // reaches 1.0 at t = 1
  const Adaptation gate = [](const PrefixView& view, std::size_t) {
    double mx = view.values[0];
    for (double v : view.values) mx = std::max(mx, v);
    return mx < 1.0 ? 1.0 : 0.0;
  };
  const TimeChangeRealization tc = realize_time_change(gate, p);
  CHECK(tc.intrinsic_horizon() == Catch::Approx(1.0).margin(0.02));
  bool capped = false;
  tc.lookup(0.5, capped);
  CHECK_FALSE(capped);
  tc.lookup(2.0, capped);
  CHECK(capped);

  const Adaptation negative = constant_adaptation(-1.0);
  CHECK_THROWS_AS(realize_time_change(negative, p), Error);
}

TEST_CASE("R is the generalized inverse of the cumulative table", "[stopping]") {
  const TimeGrid g = make_grid(0.01, 300);
  const auto spec = ito(
      0.0, constant_adaptation(0.0),
      [](const PrefixView& p, std::size_t k) {
        return 1.0 + 0.5 * std::abs(p.values[k]);
      });
  const SamplePath p = simulate(*spec, g, 2718);
  const Adaptation rate = [](const PrefixView& view, std::size_t k) {
    return 1.0 + 0.25 * std::abs(view.values[k]);
  };
  const TimeChangeRealization tc = realize_time_change(rate, p);
  for (double s : {0.01, 0.3, 1.1, 2.4}) {
    bool capped = false;
    const std::size_t k = tc.lookup(s, capped);
    if (capped) continue;
    CHECK(tc.cum[k] >= s);
    if (k > 0) CHECK(tc.cum[k - 1] < s);
  }
}
