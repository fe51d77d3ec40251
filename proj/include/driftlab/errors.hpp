#pragma once

#include <stdexcept>
#include <string>

namespace driftlab {

enum class Errc {
  out_of_range,
  invalid_stop_order,
  numerical_blowup,
  invalid_rule,
  partition_violation,
  non_positive_rate,
  insufficient_bundle,
  degenerate_stopping_family,
  insufficient_samples,
  invalid_parameter,
  insufficient_intrinsic_time,
  scenario_invalid,
  config_error,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::out_of_range: return "OutOfRange";
    case Errc::invalid_stop_order: return "InvalidStopOrder";
    case Errc::numerical_blowup: return "NumericalBlowup";
    case Errc::invalid_rule: return "InvalidRule";
    case Errc::partition_violation: return "PartitionViolation";
    case Errc::non_positive_rate: return "NonPositiveRate";
    case Errc::insufficient_bundle: return "InsufficientBundle";
    case Errc::degenerate_stopping_family: return "DegenerateStoppingFamily";
    case Errc::insufficient_samples: return "InsufficientSamples";
    case Errc::invalid_parameter: return "InvalidParameter";
    case Errc::insufficient_intrinsic_time: return "InsufficientIntrinsicTime";
    case Errc::scenario_invalid: return "ScenarioInvalid";
    case Errc::config_error: return "ConfigError";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool ok, Errc code, const std::string& what) {
  if (!ok) raise(code, what);
}

}  // namespace driftlab
