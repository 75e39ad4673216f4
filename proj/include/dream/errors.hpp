#pragma once

#include <stdexcept>
#include <string>

namespace dream {

// Base of every error raised by the library. The CLI maps these onto exit
// codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An argument outside its documented domain (temperature <= 0, etc).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Operation invoked on an object in the wrong state (consumed graph,
// missing gradients, desynchronized caches).
class StateError : public Error {
 public:
  using Error::Error;
};

// Malformed input data: non-stochastic attention, bad config keys, bad files.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace dream
