// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cbb {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents, invalid axis, broadcast failure.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Factorization failure, non-finite results.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// API misuse: non-scalar loss, missing gradient, stale cache.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or domain description.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Conditioning on an event of probability zero.
class ConditioningError : public Error {
 public:
  using Error::Error;
};

/// Training diverged.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or JSON document.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace cbb
