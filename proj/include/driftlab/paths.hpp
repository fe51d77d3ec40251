#pragma once

// Time grids and sample paths with cadlag semantics. A path holds one value
// per grid point; the value at any t in [t_k, t_{k+1}) is values[k], and the
// left limit at a stop is the previous grid value.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "driftlab/errors.hpp"

namespace driftlab {

// Tolerance (in grid cells) when snapping a time to an index, so that times
// computed as k*dt land on index k despite rounding.
inline constexpr double kGridSnap = 1e-9;

struct TimeGrid {
  double dt = 0.0;
  std::size_t n_steps = 0;

  double horizon() const { return dt * static_cast<double>(n_steps); }
  double time(std::size_t k) const { return dt * static_cast<double>(k); }

  // Grid cell containing t (round down, snapped at grid points). Caller
  // guarantees t >= 0.
  std::size_t index_at(double t) const {
    const double q = t / dt + kGridSnap;
    auto k = static_cast<std::size_t>(q < 0.0 ? 0.0 : std::floor(q));
    return k > n_steps ? n_steps : k;
  }
};

inline TimeGrid make_grid(double dt, std::size_t n_steps) {
  require(dt > 0.0, Errc::invalid_parameter, "grid dt must be positive");
  require(n_steps >= 1, Errc::invalid_parameter, "grid needs at least one step");
  return TimeGrid{dt, n_steps};
}

inline TimeGrid grid_for_horizon(double dt, double horizon) {
  require(dt > 0.0 && horizon > 0.0, Errc::invalid_parameter,
          "grid dt and horizon must be positive");
  auto n = static_cast<std::size_t>(std::llround(horizon / dt));
  return make_grid(dt, n == 0 ? 1 : n);
}

struct SamplePath {
  TimeGrid grid;
  std::vector<double> values;  // length n_steps + 1

  std::size_t size() const { return values.size(); }
};

struct VectorPath {
  TimeGrid grid;
  std::vector<std::vector<double>> coords;  // coords[i] has length n_steps + 1

  std::size_t dim() const { return coords.size(); }
};

// Read-only view of a path prefix; values spans indices 0..k inclusive when
// an adaptation is evaluated at k.
struct PrefixView {
  std::span<const double> values;
  double dt = 0.0;

  double time(std::size_t k) const { return dt * static_cast<double>(k); }
  double back() const { return values.back(); }
};

// Non-anticipating path functional: value at index k may depend only on
// values[0..k]. The span passed to the call covers exactly those indices.
using Adaptation = std::function<double(const PrefixView&, std::size_t)>;

inline Adaptation constant_adaptation(double c) {
  return [c](const PrefixView&, std::size_t) { return c; };
}

inline double cadlag_eval(const SamplePath& path, double t) {
  require(t >= -kGridSnap * path.grid.dt && t <= path.grid.horizon() * (1.0 + kGridSnap) + path.grid.dt * kGridSnap,
          Errc::out_of_range, "cadlag_eval: t outside [0, horizon]");
  if (t < 0.0) t = 0.0;
  const std::size_t k = path.grid.index_at(t);
  return path.values[k];
}

// X_{T-} with the convention X_{S-} := X_S at the anchor.
inline double left_limit_at_stop(const SamplePath& path, std::size_t s_idx,
                                 std::size_t t_idx) {
  require(s_idx <= t_idx, Errc::invalid_stop_order,
          "left_limit_at_stop: t_idx before s_idx");
  require(t_idx < path.values.size(), Errc::invalid_stop_order,
          "left_limit_at_stop: t_idx beyond grid");
  if (t_idx == s_idx) return path.values[s_idx];
  return path.values[t_idx - 1];
}

// --- CSV serialization (full double precision) ---

inline std::string format_full(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_csv(const SamplePath& path, std::ostream& os) {
  os << "t,x\n";
  for (std::size_t k = 0; k < path.values.size(); ++k) {
    os << format_full(path.grid.time(k)) << ',' << format_full(path.values[k])
       << '\n';
  }
}

inline void write_csv(const VectorPath& path, std::ostream& os) {
  os << 't';
  for (std::size_t i = 0; i < path.dim(); ++i) os << ",x" << (i + 1);
  os << '\n';
  const std::size_t n = path.coords.empty() ? 0 : path.coords[0].size();
  for (std::size_t k = 0; k < n; ++k) {
    os << format_full(path.grid.time(k));
    for (std::size_t i = 0; i < path.dim(); ++i)
      os << ',' << format_full(path.coords[i][k]);
    os << '\n';
  }
}

inline SamplePath read_path_csv(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), Errc::config_error,
          "path csv: missing header");
  std::vector<double> times;
  std::vector<double> values;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    require(comma != std::string::npos, Errc::config_error,
            "path csv: malformed row");
    times.push_back(std::stod(line.substr(0, comma)));
    values.push_back(std::stod(line.substr(comma + 1)));
  }
  require(values.size() >= 2, Errc::config_error, "path csv: too few rows");
  const double dt = times[1] - times[0];
  return SamplePath{make_grid(dt, values.size() - 1), std::move(values)};
}

}  // namespace driftlab
