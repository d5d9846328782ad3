// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moelpr {

/// Base class for all library errors. Subclasses map onto CLI exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument combination (exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed or insufficient input data (exit code 3).
struct DataError : Error {
  using Error::Error;
};

/// Numeric failure: NaN/Inf loss or gradient, non-finite activations (exit code 4).
struct NumericError : Error {
  using Error::Error;
};

/// Filesystem / serialization failure (exit code 5).
struct IoError : Error {
  using Error::Error;
};

/// Tensor shape mismatch; names the op and the offending dimensions.
struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};

// Checkpoint loading failures, kept distinct so callers can tell them apart.
struct FormatError : IoError {
  using IoError::IoError;
};
struct VersionError : IoError {
  using IoError::IoError;
};
struct TruncatedError : IoError {
  using IoError::IoError;
};
struct ChecksumError : IoError {
  using IoError::IoError;
};

}  // namespace moelpr
