#pragma once

#include <stdexcept>
#include <string>

namespace skipgs {

// Base class for everything this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: non-finite values, out-of-range configuration, malformed files.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// The caller broke an ordering or once-only rule of an API.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace skipgs
