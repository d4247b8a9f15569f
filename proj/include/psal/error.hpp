#pragma once

#include <stdexcept>
#include <string>

namespace psal {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, zero-norm degeneracies, divergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (bad magic, truncation, CRC mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required file or artifact does not exist.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace psal
