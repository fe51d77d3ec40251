#pragma once

// Declarative stopping-time constructions and their per-path realization as
// grid indices. Every realization satisfies T >= S; first-approach scans use
// the t± convention (current value or previous grid value triggers).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <variant>
#include <vector>

#include "driftlab/errors.hpp"
#include "driftlab/paths.hpp"

namespace driftlab {

struct RealizedStop {
  std::size_t index = 0;
  bool capped = false;  // the cap or the horizon fired, not the target set
};

// Predicate over the conditioning prefix values[0..s_idx]; must not look past
// s_idx (that is the caller's promise, mirrored by the prefix-only view).
using PrefixPredicate = std::function<bool(const PrefixView&, std::size_t)>;

class StoppingRule;

struct AtTime {
  double t = 0.0;
};

struct OffsetFromS {
  double h = 0.0;  // positive duration
};

// First approach beyond S to {x : |x - X_S| >= radius}, with a finite cap.
struct FirstExit {
  double radius = 0.0;
  double cap = 1.0;
};

// First t >= S with X_t >= level (or left value >= level beyond S).
struct Debut {
  double level = 0.0;
};

struct MinOf {
  std::vector<StoppingRule> rules;
};

// Sample-level sum_i 1_{P_i} T_i over a prefix-measurable partition.
struct PartitionGlue {
  std::vector<PrefixPredicate> events;
  std::vector<StoppingRule> rules;
};

class StoppingRule {
 public:
  using Node = std::variant<AtTime, OffsetFromS, FirstExit, Debut, MinOf, PartitionGlue>;

  StoppingRule() : node_(AtTime{0.0}) {}
  StoppingRule(AtTime r) : node_(r) {}
  StoppingRule(OffsetFromS r) : node_(r) {}
  StoppingRule(FirstExit r) : node_(r) {}
  StoppingRule(Debut r) : node_(r) {}
  StoppingRule(MinOf r) : node_(std::move(r)) {}
  StoppingRule(PartitionGlue r) : node_(std::move(r)) {}

  const Node& node() const { return node_; }

 private:
  Node node_;
};

namespace detail {

inline std::size_t offset_steps(double h, double dt) {
  const double q = h / dt + kGridSnap;
  return q <= 0.0 ? 0 : static_cast<std::size_t>(std::floor(q));
}

}  // namespace detail

inline RealizedStop realize(const StoppingRule& rule, const SamplePath& path,
                            std::size_t s_idx);

namespace detail {

inline RealizedStop realize_at_time(const AtTime& r, const SamplePath& path,
                                    std::size_t s_idx) {
  std::size_t k = path.grid.index_at(r.t < 0.0 ? 0.0 : r.t);
  bool capped = false;
  if (r.t > path.grid.horizon() * (1.0 + kGridSnap)) {
    k = path.grid.n_steps;
    capped = true;
  }
  if (k < s_idx) k = s_idx;  // preserve T >= S
  return {k, capped};
}

inline RealizedStop realize_offset(const OffsetFromS& r, const SamplePath& path,
                                   std::size_t s_idx) {
  const std::size_t steps = offset_steps(r.h, path.grid.dt);
  const std::size_t target = s_idx + steps;
  if (target >= path.grid.n_steps)
    return {path.grid.n_steps, target > path.grid.n_steps};
  return {target, false};
}

inline RealizedStop realize_first_exit(const FirstExit& r, const SamplePath& path,
                                       std::size_t s_idx) {
  require(r.radius > 0.0, Errc::invalid_rule, "FirstExit radius must be positive");
  require(r.cap > 0.0, Errc::invalid_rule, "FirstExit requires a finite positive cap");
  const double x_s = path.values[s_idx];
  const std::size_t cap_idx =
      std::min(path.grid.n_steps, s_idx + offset_steps(r.cap, path.grid.dt));
  for (std::size_t k = s_idx + 1; k <= cap_idx; ++k) {
    if (std::abs(path.values[k] - x_s) >= r.radius ||
        std::abs(path.values[k - 1] - x_s) >= r.radius)
      return {k, false};
  }
  return {cap_idx, true};
}

inline RealizedStop realize_debut(const Debut& r, const SamplePath& path,
                                  std::size_t s_idx) {
  if (path.values[s_idx] >= r.level) return {s_idx, false};
  for (std::size_t k = s_idx + 1; k <= path.grid.n_steps; ++k) {
    if (path.values[k] >= r.level || path.values[k - 1] >= r.level)
      return {k, false};
  }
  return {path.grid.n_steps, true};
}

inline RealizedStop realize_min(const MinOf& r, const SamplePath& path,
                                std::size_t s_idx) {
  require(!r.rules.empty(), Errc::invalid_rule, "Min over empty rule list");
  RealizedStop best{std::numeric_limits<std::size_t>::max(), true};
  for (const auto& sub : r.rules) {
    const RealizedStop rs = realize(sub, path, s_idx);
    if (rs.index < best.index)
      best = rs;
    else if (rs.index == best.index && !rs.capped)
      best.capped = false;  // a genuine stop at the same index wins the flag
  }
  return best;
}

inline std::size_t select_partition_branch(const std::vector<PrefixPredicate>& events,
                                           const SamplePath& path,
                                           std::size_t s_idx) {
  require(!events.empty(), Errc::invalid_rule, "partition with no events");
  const PrefixView prefix{std::span<const double>(path.values.data(), s_idx + 1),
                          path.grid.dt};
  std::size_t hit = events.size();
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i](prefix, s_idx)) {
      require(hit == events.size(), Errc::partition_violation,
              "two partition events hold on one path");
      hit = i;
    }
  }
  require(hit < events.size(), Errc::partition_violation,
          "no partition event holds on a path");
  return hit;
}

inline RealizedStop realize_glue(const PartitionGlue& r, const SamplePath& path,
                                 std::size_t s_idx) {
  require(r.events.size() == r.rules.size(), Errc::invalid_rule,
          "partition events/rules size mismatch");
  const std::size_t branch = select_partition_branch(r.events, path, s_idx);
  return realize(r.rules[branch], path, s_idx);
}

}  // namespace detail

inline RealizedStop realize(const StoppingRule& rule, const SamplePath& path,
                            std::size_t s_idx) {
  require(s_idx <= path.grid.n_steps, Errc::out_of_range,
          "realize: s_idx beyond grid");
  return std::visit(
      [&](const auto& r) -> RealizedStop {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, AtTime>)
          return detail::realize_at_time(r, path, s_idx);
        else if constexpr (std::is_same_v<T, OffsetFromS>)
          return detail::realize_offset(r, path, s_idx);
        else if constexpr (std::is_same_v<T, FirstExit>)
          return detail::realize_first_exit(r, path, s_idx);
        else if constexpr (std::is_same_v<T, Debut>)
          return detail::realize_debut(r, path, s_idx);
        else if constexpr (std::is_same_v<T, MinOf>)
          return detail::realize_min(r, path, s_idx);
        else
          return detail::realize_glue(r, path, s_idx);
      },
      rule.node());
}

// Sample-level partition property: picks, per path, the realization whose
// event holds. `realized` must be the per-branch realizations on this path.
inline RealizedStop glue_partition(const std::vector<PrefixPredicate>& events,
                                   const std::vector<RealizedStop>& realized,
                                   const SamplePath& path, std::size_t s_idx) {
  require(events.size() == realized.size(), Errc::invalid_rule,
          "glue_partition: events/realizations size mismatch");
  const std::size_t branch = detail::select_partition_branch(events, path, s_idx);
  return realized[branch];
}

// --- time changes ---

// Realized monotone map s -> R_s as grid lookups, backed by the cumulative
// integral table Cum[k] = sum_{j<k} a(prefix, j) * dt (left Riemann).
struct TimeChangeRealization {
  std::vector<double> cum;  // length n_steps + 1, cum[0] = 0, nondecreasing
  double dt = 0.0;

  double intrinsic_horizon() const { return cum.back(); }

  // Smallest grid index k with Cum[k] >= s; capped = no such index. The
  // accumulated table can sit a few ulp below an exactly representable s, so
  // the comparison carries the grid snap slack.
  std::size_t lookup(double s, bool& capped) const {
    capped = false;
    if (s <= 0.0) return 0;
    const double slack = kGridSnap * (std::abs(s) + dt);
    auto it = std::lower_bound(cum.begin(), cum.end(), s - slack);
    if (it == cum.end()) {
      capped = true;
      return cum.size() - 1;
    }
    return static_cast<std::size_t>(it - cum.begin());
  }
};

// Negative rates are rejected; zero rates are allowed and produce a flat
// cumulative table (lookups beyond it come back capped).
inline TimeChangeRealization realize_time_change(const Adaptation& a,
                                                 const SamplePath& path) {
  const std::size_t n = path.grid.n_steps;
  TimeChangeRealization tc;
  tc.dt = path.grid.dt;
  tc.cum.resize(n + 1);
  tc.cum[0] = 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const PrefixView prefix{std::span<const double>(path.values.data(), k + 1),
                            path.grid.dt};
    const double rate = a(prefix, k);
    require(rate >= 0.0, Errc::non_positive_rate,
            "time-change rate is negative at index " + std::to_string(k));
    acc += rate * path.grid.dt;
    tc.cum[k + 1] = acc;
  }
  return tc;
}

}  // namespace driftlab
