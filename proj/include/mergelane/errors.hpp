#pragma once

#include <stdexcept>
#include <string>

namespace mergelane {

// Caller-fixable input problems. The CLI maps these to exit code 1.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidGeometry : ValidationError {
  using ValidationError::ValidationError;
};

struct OutOfRange : ValidationError {
  using ValidationError::ValidationError;
};

struct ParseError : ValidationError {
  using ValidationError::ValidationError;
};

struct InvalidScale : ValidationError {
  using ValidationError::ValidationError;
};

struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};

struct NoRestrictedLane : ValidationError {
  using ValidationError::ValidationError;
};

struct IncompleteRecord : ValidationError {
  using ValidationError::ValidationError;
};

struct EmptyInput : ValidationError {
  using ValidationError::ValidationError;
};

// Environment/runtime failures. The CLI maps these to exit code 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SimulationStalled : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mergelane
