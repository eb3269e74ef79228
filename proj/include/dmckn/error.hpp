#pragma once

#include <stdexcept>
#include <string>

namespace dmckn {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf was produced where strict checking is enabled.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument to a library call (bad grid size, odd encoding width, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// An iteration failed to reach its tolerance.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input files.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace dmckn
