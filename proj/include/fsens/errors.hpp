#pragma once

#include <stdexcept>
#include <string>

namespace fsens {

// Shape or dimension disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Argument outside its documented domain.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Non-finite values produced or consumed by a computation.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file or payload.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operation invoked on an object in the wrong state (e.g. an empty dataset).
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fsens
