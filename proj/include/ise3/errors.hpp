#pragma once

#include <stdexcept>
#include <string>

namespace ise3 {

/// Precondition violated by a caller-supplied value (degree out of range,
/// shape mismatch, invalid rotation, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Relative position too short to define a direction.
class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent model / experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value encountered (checked tapes, training loss).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure to produce a valid random instance.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File or stream problem; message carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ise3
