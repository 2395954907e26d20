#pragma once

#include <stdexcept>
#include <string>

namespace ntk {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed network spec or experiment configuration.
class SpecError : public Error {
 public:
  using Error::Error;
};

// Operand shapes do not fit the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Factorization failure, correlation outside [-1, 1], non-finite values.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// An operation needed a finite NTK but got the naive-standard marker.
class DivergentKernelError : public Error {
 public:
  DivergentKernelError()
      : Error("naive standard parameterization has no NTK limit") {}
  explicit DivergentKernelError(const std::string& what) : Error(what) {}
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ntk
