#pragma once

#include <stdexcept>
#include <string>

namespace kpat {

// Every library exception maps onto one CLI exit code:
//   1 validation, 2 failed mathematical check, 3 I/O or network.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// Exact enumeration requested beyond the supported cube dimension.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Training loss blew past the guard threshold or a parameter went non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class VerificationFailure : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

}  // namespace kpat
