#pragma once

// Process generators. A spec is a driver (the process whose dynamics are
// simulated: Brownian motion, an Ito process under Euler-Maruyama, a
// deterministic function, the staircase counterexample, or a correlated
// Brownian vector) plus a chain of observation wrappers (negation, affine
// maps, pointwise maps, stopping, coordinate selection, linear combinations,
// drift-integral removal). Conditioning on F_S is realized by branching: M
// continuations of the driver that agree with the outer path bit-identically
// up to the anchor index.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "driftlab/errors.hpp"
#include "driftlab/paths.hpp"
#include "driftlab/rng.hpp"
#include "driftlab/stopping.hpp"

namespace driftlab {

class ProcessSpec;
using SpecPtr = std::shared_ptr<const ProcessSpec>;

struct BrownianMotion {
  double x0 = 0.0;
};

struct ItoProcess {
  double x0 = 0.0;
  Adaptation drift;      // b(prefix, k)
  Adaptation diffusion;  // sigma(prefix, k)
};

struct Deterministic {
  std::function<double(double)> f;  // time -> value, seed ignored
};

struct Staircase {};

// d-dimensional Brownian motion with the given correlation matrix
// (symmetric PSD, unit diagonal), generated through a lower-triangular
// square-root factor in a fixed factorization order.
struct CorrelatedBM {
  std::size_t dim = 0;
  std::vector<double> corr;  // row-major dim x dim
  std::vector<double> x0;    // per-coordinate start, empty = zeros
};

struct Negated {
  SpecPtr inner;
};

struct ScaledShifted {
  SpecPtr inner;
  double scale = 1.0;
  double shift = 0.0;
};

struct Mapped {
  SpecPtr inner;
  std::function<double(double, double)> map;  // (x, t) -> value
};

struct Stopped {
  SpecPtr inner;
  StoppingRule rule;  // realized on the inner observed path from index 0
};

struct Coordinate {
  SpecPtr inner;  // vector driver
  std::size_t index = 0;
};

struct LinearCombo {
  SpecPtr inner;  // vector driver
  std::vector<double> weights;
};

// inner - integral of rate along the inner observed path (left Riemann).
struct DriftRemoved {
  SpecPtr inner;
  Adaptation rate;
};

class ProcessSpec {
 public:
  using Node = std::variant<BrownianMotion, ItoProcess, Deterministic, Staircase,
                            CorrelatedBM, Negated, ScaledShifted, Mapped, Stopped,
                            Coordinate, LinearCombo, DriftRemoved>;

  explicit ProcessSpec(Node node) : node_(std::move(node)) {}
  const Node& node() const { return node_; }

 private:
  Node node_;
};

// --- factories ---

inline SpecPtr brownian(double x0 = 0.0) {
  return std::make_shared<ProcessSpec>(BrownianMotion{x0});
}

inline SpecPtr ito(double x0, Adaptation drift, Adaptation diffusion) {
  return std::make_shared<ProcessSpec>(
      ItoProcess{x0, std::move(drift), std::move(diffusion)});
}

inline SpecPtr deterministic(std::function<double(double)> f) {
  return std::make_shared<ProcessSpec>(Deterministic{std::move(f)});
}

inline SpecPtr staircase() { return std::make_shared<ProcessSpec>(Staircase{}); }

inline SpecPtr correlated_bm(std::size_t dim, std::vector<double> corr,
                             std::vector<double> x0 = {}) {
  return std::make_shared<ProcessSpec>(
      CorrelatedBM{dim, std::move(corr), std::move(x0)});
}

inline SpecPtr correlated_bm_pair(double rho) {
  return correlated_bm(2, {1.0, rho, rho, 1.0});
}

inline SpecPtr negated(SpecPtr inner) {
  return std::make_shared<ProcessSpec>(Negated{std::move(inner)});
}

inline SpecPtr scaled_shifted(SpecPtr inner, double scale, double shift = 0.0) {
  return std::make_shared<ProcessSpec>(ScaledShifted{std::move(inner), scale, shift});
}

inline SpecPtr mapped(SpecPtr inner, std::function<double(double, double)> map) {
  return std::make_shared<ProcessSpec>(Mapped{std::move(inner), std::move(map)});
}

inline SpecPtr stopped(SpecPtr inner, StoppingRule rule) {
  return std::make_shared<ProcessSpec>(Stopped{std::move(inner), std::move(rule)});
}

inline SpecPtr coordinate(SpecPtr inner, std::size_t index) {
  return std::make_shared<ProcessSpec>(Coordinate{std::move(inner), index});
}

inline SpecPtr linear_combo(SpecPtr inner, std::vector<double> weights) {
  return std::make_shared<ProcessSpec>(LinearCombo{std::move(inner), std::move(weights)});
}

inline SpecPtr drift_removed(SpecPtr inner, Adaptation rate) {
  return std::make_shared<ProcessSpec>(DriftRemoved{std::move(inner), std::move(rate)});
}

// --- the staircase counterexample ---
// 0 at t = 0, and n^-2 on [1/n, 1/(n-1)) for the unique integer n > 0.
inline double staircase_value(double t) {
  require(t >= 0.0, Errc::out_of_range, "staircase_value: t must be >= 0");
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  const double n = std::ceil(1.0 / t - kGridSnap);
  return 1.0 / (n * n);
}

// --- driver access ---

inline const ProcessSpec& driver_of(const ProcessSpec& spec) {
  return std::visit(
      [&](const auto& n) -> const ProcessSpec& {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Negated> || std::is_same_v<T, ScaledShifted> ||
                      std::is_same_v<T, Mapped> || std::is_same_v<T, Stopped> ||
                      std::is_same_v<T, Coordinate> || std::is_same_v<T, LinearCombo> ||
                      std::is_same_v<T, DriftRemoved>)
          return driver_of(*n.inner);
        else
          return spec;
      },
      spec.node());
}

inline bool shares_driver(const ProcessSpec& a, const ProcessSpec& b) {
  return &driver_of(a) == &driver_of(b);
}

inline std::size_t driver_dim(const ProcessSpec& spec) {
  const auto& leaf = driver_of(spec).node();
  if (const auto* c = std::get_if<CorrelatedBM>(&leaf)) return c->dim;
  return 1;
}

namespace detail {

// Lower-triangular square root of a PSD matrix, fixed elimination order.
// Zero/negative pivots (within tolerance) collapse to zero columns so that
// singular correlation matrices (e.g. perfectly correlated coordinates) work.
inline std::vector<double> cholesky_lower(const std::vector<double>& a,
                                          std::size_t d) {
  require(a.size() == d * d, Errc::invalid_parameter, "correlation matrix shape");
  std::vector<double> l(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double sum = a[i * d + j];
      for (std::size_t k = 0; k < j; ++k) sum -= l[i * d + k] * l[j * d + k];
      if (i == j) {
        require(sum > -1e-10, Errc::invalid_parameter,
                "correlation matrix is not positive semi-definite");
        l[i * d + j] = sum > 0.0 ? std::sqrt(sum) : 0.0;
      } else {
        l[i * d + j] = l[j * d + j] > 0.0 ? sum / l[j * d + j] : 0.0;
      }
    }
  }
  return l;
}

inline void check_finite(double v, std::size_t k) {
  if (!std::isfinite(v))
    raise(Errc::numerical_blowup,
          "non-finite value at step index " + std::to_string(k));
}

// Evolve driver coordinates in place from index `from` to index `to`.
inline void evolve_driver(const ProcessSpec::Node& leaf, VectorPath& vp,
                          std::size_t from, std::size_t to, Rng& rng) {
  const double dt = vp.grid.dt;
  const double sqdt = std::sqrt(dt);
  std::visit(
      [&](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, BrownianMotion>) {
          auto& v = vp.coords[0];
          for (std::size_t k = from; k < to; ++k)
            v[k + 1] = v[k] + sqdt * rng.next_gaussian();
        } else if constexpr (std::is_same_v<T, ItoProcess>) {
          auto& v = vp.coords[0];
          for (std::size_t k = from; k < to; ++k) {
            const PrefixView prefix{std::span<const double>(v.data(), k + 1), dt};
            const double b = n.drift(prefix, k);
            const double s = n.diffusion(prefix, k);
            check_finite(b, k);
            check_finite(s, k);
            v[k + 1] = v[k] + b * dt + s * sqdt * rng.next_gaussian();
            check_finite(v[k + 1], k + 1);
          }
        } else if constexpr (std::is_same_v<T, Deterministic>) {
          auto& v = vp.coords[0];
          for (std::size_t k = from; k < to; ++k) {
            v[k + 1] = n.f(vp.grid.time(k + 1));
            check_finite(v[k + 1], k + 1);
          }
        } else if constexpr (std::is_same_v<T, Staircase>) {
          auto& v = vp.coords[0];
          for (std::size_t k = from; k < to; ++k)
            v[k + 1] = staircase_value(vp.grid.time(k + 1));
        } else if constexpr (std::is_same_v<T, CorrelatedBM>) {
          const std::size_t d = n.dim;
          const auto l = cholesky_lower(n.corr, d);
          std::vector<double> xi(d);
          for (std::size_t k = from; k < to; ++k) {
            for (auto& x : xi) x = rng.next_gaussian();
            for (std::size_t i = 0; i < d; ++i) {
              double inc = 0.0;
              for (std::size_t j = 0; j <= i; ++j) inc += l[i * d + j] * xi[j];
              vp.coords[i][k + 1] = vp.coords[i][k] + sqdt * inc;
            }
          }
        } else {
          raise(Errc::scenario_invalid, "evolve_driver: not a driver leaf");
        }
      },
      leaf);
}

inline void init_driver(const ProcessSpec::Node& leaf, VectorPath& vp) {
  std::visit(
      [&](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, BrownianMotion>) {
          vp.coords[0][0] = n.x0;
        } else if constexpr (std::is_same_v<T, ItoProcess>) {
          vp.coords[0][0] = n.x0;
        } else if constexpr (std::is_same_v<T, Deterministic>) {
          vp.coords[0][0] = n.f(0.0);
        } else if constexpr (std::is_same_v<T, Staircase>) {
          vp.coords[0][0] = staircase_value(0.0);
        } else if constexpr (std::is_same_v<T, CorrelatedBM>) {
          for (std::size_t i = 0; i < n.dim; ++i)
            vp.coords[i][0] = n.x0.empty() ? 0.0 : n.x0[i];
        } else {
          raise(Errc::scenario_invalid, "init_driver: not a driver leaf");
        }
      },
      leaf);
}

}  // namespace detail

// Simulate the driver of `spec` on the full grid.
inline VectorPath simulate_driver(const ProcessSpec& spec, const TimeGrid& grid,
                                  std::uint64_t seed) {
  const ProcessSpec& leaf = driver_of(spec);
  const std::size_t d = driver_dim(spec);
  VectorPath vp;
  vp.grid = grid;
  vp.coords.assign(d, std::vector<double>(grid.n_steps + 1, 0.0));
  detail::init_driver(leaf.node(), vp);
  Rng rng(seed);
  detail::evolve_driver(leaf.node(), vp, 0, grid.n_steps, rng);
  return vp;
}

// Observed series of `spec` over a simulated driver path.
inline std::vector<double> materialize_values(const ProcessSpec& spec,
                                              const VectorPath& driver) {
  const double dt = driver.grid.dt;
  return std::visit(
      [&](const auto& n) -> std::vector<double> {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, BrownianMotion> ||
                      std::is_same_v<T, ItoProcess> ||
                      std::is_same_v<T, Deterministic> ||
                      std::is_same_v<T, Staircase>) {
          return driver.coords[0];
        } else if constexpr (std::is_same_v<T, CorrelatedBM>) {
          raise(Errc::scenario_invalid,
                "a vector driver needs a coordinate or combination observable");
        } else if constexpr (std::is_same_v<T, Negated>) {
          auto v = materialize_values(*n.inner, driver);
          for (auto& x : v) x = -x;
          return v;
        } else if constexpr (std::is_same_v<T, ScaledShifted>) {
          auto v = materialize_values(*n.inner, driver);
          for (auto& x : v) x = n.scale * x + n.shift;
          return v;
        } else if constexpr (std::is_same_v<T, Mapped>) {
          auto v = materialize_values(*n.inner, driver);
          for (std::size_t k = 0; k < v.size(); ++k)
            v[k] = n.map(v[k], dt * static_cast<double>(k));
          return v;
        } else if constexpr (std::is_same_v<T, Stopped>) {
          auto v = materialize_values(*n.inner, driver);
          SamplePath inner_path{driver.grid, std::move(v)};
          const RealizedStop rs = realize(n.rule, inner_path, 0);
          auto out = std::move(inner_path.values);
          const double frozen = out[rs.index];
          for (std::size_t k = rs.index + 1; k < out.size(); ++k) out[k] = frozen;
          return out;
        } else if constexpr (std::is_same_v<T, Coordinate>) {
          require(n.index < driver.dim(), Errc::scenario_invalid,
                  "coordinate index beyond driver dimension");
          return driver.coords[n.index];
        } else if constexpr (std::is_same_v<T, LinearCombo>) {
          require(n.weights.size() == driver.dim(), Errc::scenario_invalid,
                  "linear combination weight count mismatch");
          const std::size_t len = driver.coords[0].size();
          std::vector<double> v(len, 0.0);
          for (std::size_t i = 0; i < n.weights.size(); ++i)
            for (std::size_t k = 0; k < len; ++k)
              v[k] += n.weights[i] * driver.coords[i][k];
          return v;
        } else {  // DriftRemoved
          auto v = materialize_values(*n.inner, driver);
          double acc = 0.0;
          std::vector<double> out(v.size());
          out[0] = v[0];
          for (std::size_t k = 0; k + 1 < v.size(); ++k) {
            const PrefixView prefix{std::span<const double>(v.data(), k + 1), dt};
            acc += n.rate(prefix, k) * dt;
            out[k + 1] = v[k + 1] - acc;
          }
          return out;
        }
      },
      spec.node());
}

inline SamplePath materialize(const ProcessSpec& spec, const VectorPath& driver) {
  return SamplePath{driver.grid, materialize_values(spec, driver)};
}

inline SamplePath simulate(const ProcessSpec& spec, const TimeGrid& grid,
                           std::uint64_t seed) {
  return materialize(spec, simulate_driver(spec, grid, seed));
}

inline VectorPath simulate_vector(const ProcessSpec& spec, const TimeGrid& grid,
                                  std::uint64_t seed) {
  return simulate_driver(spec, grid, seed);
}

// --- bundles ---

// One outer driver path plus M branched driver continuations agreeing with it
// bit-identically on [0, s_idx]. Continuations may live on a truncated grid
// (extent_idx steps) when the stopping family never needs to look further.
struct Bundle {
  VectorPath outer;
  std::size_t s_idx = 0;
  std::vector<VectorPath> continuations;
};

inline Bundle branch_continuations(const ProcessSpec& spec, const VectorPath& outer,
                                   std::size_t s_idx, std::size_t m,
                                   std::size_t extent_idx, std::uint64_t seed) {
  require(s_idx <= outer.grid.n_steps, Errc::out_of_range,
          "branch_continuations: s_idx beyond grid");
  require(extent_idx >= s_idx && extent_idx <= outer.grid.n_steps,
          Errc::out_of_range, "branch_continuations: bad extent");
  require(m >= 2, Errc::insufficient_bundle, "need at least 2 continuations");

  const ProcessSpec& leaf = driver_of(spec);
  const std::size_t d = outer.dim();
  const TimeGrid cont_grid{outer.grid.dt, extent_idx};

  Bundle bundle;
  bundle.outer = outer;
  bundle.s_idx = s_idx;
  bundle.continuations.reserve(m);
  for (std::size_t c = 0; c < m; ++c) {
    VectorPath vp;
    vp.grid = cont_grid;
    vp.coords.assign(d, std::vector<double>(extent_idx + 1, 0.0));
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t k = 0; k <= s_idx; ++k) vp.coords[i][k] = outer.coords[i][k];
    Rng rng(hash_combine(seed, c));
    detail::evolve_driver(leaf.node(), vp, s_idx, extent_idx, rng);
    bundle.continuations.push_back(std::move(vp));
  }
  return bundle;
}

// --- ensembles ---

struct Ensemble {
  std::uint64_t master_seed = 0;
  std::uint64_t stream_id = 0;
  std::vector<SamplePath> paths;
};

inline std::uint64_t path_seed(std::uint64_t master, std::uint64_t stream,
                               std::uint64_t index) {
  return substream_seed(master, stream, index);
}

inline Ensemble make_ensemble(const ProcessSpec& spec, const TimeGrid& grid,
                              std::size_t n, std::uint64_t master_seed,
                              std::uint64_t stream_id = streams::ensemble) {
  Ensemble e;
  e.master_seed = master_seed;
  e.stream_id = stream_id;
  e.paths.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    e.paths.push_back(simulate(spec, grid, path_seed(master_seed, stream_id, i)));
  return e;
}

}  // namespace driftlab
