#pragma once

#include <stdexcept>
#include <string>

namespace ditopt {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An invalid model, attention, MoE or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad user-supplied data: out-of-range labels, missing files, malformed input.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Operation not defined for the given attention variant.
class UnsupportedVariantError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API contract (e.g. requested gradients of a frozen teacher).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace ditopt
