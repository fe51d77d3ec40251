#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "driftlab/processes.hpp"
#include "driftlab/stats.hpp"

using namespace driftlab;

TEST_CASE("mean_ci basics", "[stats]") {
  SECTION("constant samples give a zero-width interval") {
    const std::vector<double> xs(50, 2.5);
    const CI ci = mean_ci(xs);
    CHECK(ci.mean == 2.5);
    CHECK(ci.halfwidth == 0.0);
  }

  SECTION("Bernoulli halfwidth matches the closed form") {
    std::vector<double> xs;
    for (int i = 0; i < 5000; ++i) {
      xs.push_back(0.0);
      xs.push_back(1.0);
    }
    const CI ci = mean_ci(xs, 0.95);
    CHECK(ci.mean == Catch::Approx(0.5));
    CHECK(ci.halfwidth == Catch::Approx(0.0098).margin(2e-4));
  }

  SECTION("too few samples error") {
    const std::vector<double> one{1.0};
    CHECK_THROWS_AS(mean_ci(one), Error);
    CHECK_THROWS_AS(mean_ci(std::vector<double>{}), Error);
  }

  SECTION("halfwidth scales exactly by 1/sqrt(2) at matched sd") {
    // Both samples have sample sd sqrt(2); only n differs.
    const std::vector<double> a{0.0, 2.0};
    const std::vector<double> b{0.0, 2.0, 1.0 + std::sqrt(2.0),
                                1.0 - std::sqrt(2.0)};
    const CI ca = mean_ci(a);
    const CI cb = mean_ci(b);
    CHECK(cb.halfwidth == Catch::Approx(ca.halfwidth / std::sqrt(2.0)));
  }
}

TEST_CASE("normal cdf accuracy", "[stats]") {
  // Independent oracle: trapezoid quadrature of the density.
  auto quad_cdf = [](double x) {
    const double lo = -10.0;
    const int n = 200000;
    const double h = (x - lo) / n;
    double acc = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double t = lo + i * h;
      const double w = (i == 0 || i == n) ? 0.5 : 1.0;
      acc += w * std::exp(-0.5 * t * t);
    }
    return acc * h / std::sqrt(2.0 * 3.14159265358979323846);
  };
  for (double x : {-2.5, -1.0, -0.2236, 0.0, 0.5, 1.96, 3.1}) {
    CHECK(std::abs(normal_cdf(x) - quad_cdf(x)) < 1e-7);
  }
  CHECK(normal_cdf(0.0) == Catch::Approx(0.5));
  CHECK_THROWS_AS(normal_cdf(0.0, 0.0, -1.0), Error);
}

TEST_CASE("normal quantile inverts the cdf", "[stats]") {
  for (double p : {0.001, 0.025, 0.5, 0.8, 0.975, 0.9999}) {
    CHECK(normal_cdf(normal_quantile(p)) == Catch::Approx(p).margin(1e-9));
  }
  CHECK(z_for_level(0.95) == Catch::Approx(1.959964).margin(1e-5));
}

TEST_CASE("two-sample KS statistic and verdicts", "[stats]") {
  SECTION("identical arrays") {
    std::vector<double> xs(200);
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = std::sin(0.37 * i);
    const KsResult r = ks_two_sample(xs, xs, 0.01);
    CHECK(r.statistic == 0.0);
    CHECK_FALSE(r.reject);
  }

  SECTION("unit mean shift is detected at n = m = 2000") {
    Rng rng(8);
    std::vector<double> a(2000), b(2000);
    for (auto& v : a) v = rng.next_gaussian();
    for (auto& v : b) v = rng.next_gaussian() + 1.0;
    const KsResult r = ks_two_sample(a, b, 0.01);
    // Oracle: sup_x |Phi(x) - Phi(x-1)| = 2 Phi(1/2) - 1 ~ 0.383.
    CHECK(r.statistic == Catch::Approx(0.383).margin(0.06));
    CHECK(r.critical == Catch::Approx(1.628 * std::sqrt(4000.0 / 4.0e6)).margin(1e-4));
    CHECK(r.reject);
  }

  SECTION("statistic is symmetric and bounded") {
    Rng rng(9);
    std::vector<double> a(300), b(150);
    for (auto& v : a) v = rng.next_gaussian();
    for (auto& v : b) v = 2.0 * rng.next_gaussian();
    const KsResult ab = ks_two_sample(a, b);
    const KsResult ba = ks_two_sample(b, a);
    CHECK(ab.statistic == ba.statistic);
    CHECK(ab.statistic >= 0.0);
    CHECK(ab.statistic <= 1.0);
  }

  SECTION("small samples never reject") {
    std::vector<double> a(20, 0.0), b(20, 5.0);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += 1e-3 * i, b[i] += 1e-3 * i;
    const KsResult r = ks_two_sample(a, b, 0.01);
    CHECK(r.statistic == 1.0);
    CHECK_FALSE(r.reject);  // below the minimum sample size
  }

  SECTION("empty input errors") {
    std::vector<double> a{1.0}, empty;
    CHECK_THROWS_AS(ks_two_sample(a, empty), Error);
  }

  SECTION("same-law split halves calibrate at the alpha level") {
    // BM marginals at t = 1, one sample split in two.
    const TimeGrid g = make_grid(0.05, 20);
    const auto bm = brownian(0.0);
    int rejects = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::vector<double> a, b;
      for (std::size_t i = 0; i < 400; ++i) {
        const double v =
            simulate(*bm, g, path_seed(seed, streams::ensemble, i)).values.back();
        (i % 2 == 0 ? a : b).push_back(v);
      }
      if (ks_two_sample(a, b, 0.01).reject) ++rejects;
    }
    CHECK(rejects <= 5);  // no reject in >= 95 of 100 seeded repeats
  }
}

TEST_CASE("one-sample KS against the normal law", "[stats]") {
  SECTION("exact quantiles achieve the minimal statistic 0.5/n") {
    const std::size_t n = 250;
    std::vector<double> xs(n);
    for (std::size_t i = 0; i < n; ++i)
      xs[i] = normal_quantile((static_cast<double>(i) + 0.5) / n);
    const KsResult r = ks_normal(xs, 0.0, 1.0, 0.01);
    CHECK(r.statistic == Catch::Approx(0.5 / n).margin(1e-9));
    CHECK_FALSE(r.reject);
  }

  SECTION("uniform samples are grossly rejected") {
    Rng rng(10);
    std::vector<double> xs(1000);
    for (auto& v : xs) v = rng.next_unit();
    CHECK(ks_normal(xs, 0.0, 1.0, 0.01).reject);
  }

  SECTION("sigma must be positive") {
    std::vector<double> xs(200, 0.0);
    CHECK_THROWS_AS(ks_normal(xs, 0.0, 0.0), Error);
  }

  SECTION("BM unit increments calibrate at the alpha level") {
    const TimeGrid g = make_grid(0.25, 8000);  // 2000 unit increments
    const auto bm = brownian(0.0);
    int rejects = 0;
    for (std::uint64_t seed = 200; seed < 300; ++seed) {
      const SamplePath p = simulate(*bm, g, path_seed(seed, 1, 0));
      std::vector<double> inc;
      inc.reserve(2000);
      for (std::size_t k = 4; k <= g.n_steps; k += 4)
        inc.push_back(p.values[k] - p.values[k - 4]);
      if (ks_normal(inc, 0.0, 1.0, 0.01).reject) ++rejects;
    }
    CHECK(rejects <= 5);
  }
}

TEST_CASE("symmetric eigenvalues by Jacobi iteration", "[stats]") {
  SECTION("2x2 closed form") {
    const std::vector<double> m{2.0, 1.0, 1.0, 2.0};
    const auto eig = sym_eigenvalues(m, 2);
    CHECK(eig[0] == Catch::Approx(1.0));
    CHECK(eig[1] == Catch::Approx(3.0));
  }
  SECTION("3x3 with known spectrum") {
    // diag(1,2,3) conjugated by a rotation in the (0,2) plane.
    const double c = std::cos(0.6), s = std::sin(0.6);
    // A = R diag(1,2,3) R^T
    const std::vector<double> m{
        c * c + 3 * s * s, 0.0, 2 * c * s,
        0.0,               2.0, 0.0,
        2 * c * s,         0.0, s * s + 3 * c * c};
    const auto eig = sym_eigenvalues(m, 3);
    CHECK(eig[0] == Catch::Approx(1.0).margin(1e-9));
    CHECK(eig[1] == Catch::Approx(2.0).margin(1e-9));
    CHECK(eig[2] == Catch::Approx(3.0).margin(1e-9));
  }
}

TEST_CASE("sample correlation sanity", "[stats]") {
  std::vector<double> xs(500), ys(500);
  Rng rng(13);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xs[i] = rng.next_gaussian();
    ys[i] = -xs[i];
  }
  CHECK(sample_corr(xs, ys) == Catch::Approx(-1.0));
}
