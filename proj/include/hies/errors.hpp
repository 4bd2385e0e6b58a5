#pragma once

#include <stdexcept>
#include <string>

namespace hies {

// Base for all library errors so callers can catch one type at the CLI boundary.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimension mismatches; message names the offending shapes.
struct ShapeError : Error {
  using Error::Error;
};

// Bad runtime inputs: empty batches, off-simplex vectors, out-of-range labels.
struct InputError : Error {
  using Error::Error;
};

// Invalid configuration or parameter values (alpha out of range, bad budget, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Training diverged (NaN loss); message carries the step index.
struct TrainError : Error {
  using Error::Error;
};

// File read/write failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace hies
