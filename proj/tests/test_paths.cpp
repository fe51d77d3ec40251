#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "driftlab/paths.hpp"
#include "driftlab/processes.hpp"
#include "driftlab/rng.hpp"

using namespace driftlab;

namespace {

SamplePath sample_staircase(const TimeGrid& grid) {
  SamplePath p{grid, {}};
  p.values.resize(grid.n_steps + 1);
  for (std::size_t k = 0; k <= grid.n_steps; ++k)
    p.values[k] = staircase_value(grid.time(k));
  return p;
}

}  // namespace

TEST_CASE("grid construction and snapping", "[paths]") {
  const TimeGrid g = make_grid(0.1, 10);
  CHECK(g.horizon() == Catch::Approx(1.0));
  // Times computed as k*dt land exactly on index k despite rounding.
  for (std::size_t k = 0; k <= 10; ++k) CHECK(g.index_at(g.time(k)) == k);
  CHECK(g.index_at(0.34999) == 3);
  CHECK(g.index_at(0.3) == 3);

  CHECK_THROWS_AS(make_grid(0.0, 5), Error);
  CHECK_THROWS_AS(make_grid(0.1, 0), Error);
}

TEST_CASE("cadlag_eval on constant and identity paths", "[paths]") {
  const TimeGrid g = make_grid(0.01, 100);

  SamplePath c{g, std::vector<double>(101, 3.75)};
  CHECK(cadlag_eval(c, 0.0) == 3.75);
  CHECK(cadlag_eval(c, 0.503) == 3.75);
  CHECK(cadlag_eval(c, 1.0) == 3.75);

  SamplePath ident{g, {}};
  ident.values.resize(101);
  for (std::size_t k = 0; k <= 100; ++k) ident.values[k] = g.time(k);
  CHECK(cadlag_eval(ident, g.time(3)) == Catch::Approx(3 * 0.01));
  // Value inside a cell is the left grid value (cadlag convention).
  CHECK(cadlag_eval(ident, 0.0349) == Catch::Approx(0.03));

  CHECK_THROWS_AS(cadlag_eval(ident, -0.5), Error);
  CHECK_THROWS_AS(cadlag_eval(ident, 1.5), Error);
}

TEST_CASE("cadlag_eval hits the staircase plateau", "[paths]") {
  const TimeGrid g = make_grid(0.01, 100);
  const SamplePath p = sample_staircase(g);
  CHECK(cadlag_eval(p, 0.6) == Catch::Approx(0.25));
  CHECK(cadlag_eval(p, 0.0) == 0.0);
}

TEST_CASE("cadlag_eval is exact at every grid point", "[paths]") {
  const TimeGrid g = make_grid(1e-3, 500);
  Rng rng(77);
  SamplePath p{g, {}};
  p.values.resize(g.n_steps + 1);
  for (auto& v : p.values) v = rng.next_gaussian();
  for (std::size_t k = 0; k <= g.n_steps; ++k)
    CHECK(cadlag_eval(p, g.time(k)) == p.values[k]);
}

TEST_CASE("cadlag_eval is monotone for monotone paths", "[paths]") {
  const TimeGrid g = make_grid(0.02, 50);
  Rng rng(123);
  SamplePath p{g, {}};
  p.values.resize(51);
  double acc = 0.0;
  for (auto& v : p.values) {
    acc += rng.next_unit();
    v = acc;
  }
  double prev = cadlag_eval(p, 0.0);
  for (int i = 1; i <= 400; ++i) {
    const double t = i * (1.0 / 400.0);
    const double cur = cadlag_eval(p, t);
    CHECK(cur >= prev);
    prev = cur;
  }
}

TEST_CASE("left_limit_at_stop conventions", "[paths]") {
  const TimeGrid g = make_grid(0.01, 100);
  Rng rng(5);
  SamplePath p{g, {}};
  p.values.resize(101);
  for (auto& v : p.values) v = rng.next_gaussian();

  // T = S returns the anchor value itself.
  CHECK(left_limit_at_stop(p, 40, 40) == p.values[40]);
  // One step back on the grid otherwise.
  CHECK(left_limit_at_stop(p, 40, 50) == p.values[49]);

  CHECK_THROWS_AS(left_limit_at_stop(p, 50, 40), Error);
  CHECK_THROWS_AS(left_limit_at_stop(p, 50, 200), Error);
}

TEST_CASE("left limit on the staircase at t = 1.0 from s = 0", "[paths]") {
  const TimeGrid g = make_grid(0.1, 10);
  const SamplePath p = sample_staircase(g);
  // Left value at index 10 is the value at t = 0.9, on the n = 2 plateau.
  CHECK(left_limit_at_stop(p, 0, 10) == Catch::Approx(0.25));
}

TEST_CASE("ensemble regeneration is bit-identical", "[paths]") {
  const TimeGrid g = make_grid(1e-3, 200);
  const auto spec = brownian(0.0);
  const Ensemble a = make_ensemble(*spec, g, 8, 99, streams::ensemble);
  const Ensemble b = make_ensemble(*spec, g, 8, 99, streams::ensemble);
  REQUIRE(a.paths.size() == b.paths.size());
  for (std::size_t i = 0; i < a.paths.size(); ++i)
    CHECK(a.paths[i].values == b.paths[i].values);

  // A different stream id produces different paths.
  const Ensemble c = make_ensemble(*spec, g, 8, 99, streams::comparison);
  CHECK(a.paths[0].values != c.paths[0].values);
}

TEST_CASE("path csv round trip", "[paths]") {
  const TimeGrid g = make_grid(0.25, 4);
  SamplePath p{g, {0.0, -1.5, 0.1 + 0.2, 2.25, 1e-17}};
  std::ostringstream os;
  write_csv(p, os);
  std::istringstream is(os.str());
  const SamplePath q = read_path_csv(is);
  CHECK(q.grid.n_steps == p.grid.n_steps);
  CHECK(q.grid.dt == Catch::Approx(p.grid.dt));
  CHECK(q.values == p.values);
}
