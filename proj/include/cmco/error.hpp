#pragma once

#include <stdexcept>
#include <string>

namespace cmco {

// Invalid configuration, shapes of user-facing inputs, or unreadable paths.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values surfaced during training or inference.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Calibration set too small for the requested miscoverage level.
class InfeasibleCalibration : public ConfigError {
 public:
  InfeasibleCalibration(std::size_t n, std::size_t minimum_n, double alpha)
      : ConfigError("infeasible calibration: n_cal = " + std::to_string(n) +
                    " but alpha = " + std::to_string(alpha) +
                    " needs at least " + std::to_string(minimum_n) +
                    " calibration samples"),
        n_(n),
        minimum_n_(minimum_n) {}

  std::size_t n() const { return n_; }
  std::size_t minimum_n() const { return minimum_n_; }

 private:
  std::size_t n_;
  std::size_t minimum_n_;
};

// A stored artifact was produced under different settings than requested.
class ProvenanceMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cmco
