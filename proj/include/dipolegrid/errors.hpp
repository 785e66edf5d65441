#pragma once

#include <stdexcept>
#include <string>

namespace dipolegrid {

/// Bad input: malformed configuration, inconsistent dimensions, invalid
/// geometry. The CLI maps these to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numerical failure during computation (singular systems, underflow,
/// singular forward geometry). The CLI maps these to exit code 1.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by EM when an iteration lowers the objective beyond tolerance.
class MonotonicityViolation : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace dipolegrid
