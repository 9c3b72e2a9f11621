#pragma once

#include <stdexcept>
#include <string>

namespace skyrm {

// Error categories map one-to-one onto CLI exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value, unknown key, or inconsistent settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad input data: unreadable files, invalid mask values, mismatched sets.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Unsupported or malformed image file.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// NaN/Inf encountered in a loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Broken internal invariant (stale tape, index out of range).
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace skyrm
