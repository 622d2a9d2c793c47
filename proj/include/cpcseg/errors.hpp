// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <stdexcept>
#include <string>

namespace cpcseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or sequence lengths that violate an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values, unknown keys, violated config invariants.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported input files and annotations.
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced during a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cpcseg
