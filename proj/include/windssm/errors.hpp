#pragma once

#include <stdexcept>
#include <string>

namespace windssm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid parameters or inputs (preconditions, invariants, stage tags).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Factorization failure, non-convergence that cannot be reported as a flag,
/// or any other breakdown of a numerical routine.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed files, unreadable or unwritable paths.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace windssm
