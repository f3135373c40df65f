#pragma once

#include <stdexcept>
#include <string>

namespace relprop {

/// Base of every error thrown by the library. The CLI maps subclasses to
/// exit codes: ConfigError/InputError -> 2, everything else -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed user data (token id out of range, unparsable file line, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace relprop
