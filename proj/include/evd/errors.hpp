#pragma once

#include <stdexcept>
#include <string>

namespace evd {

/// A caller broke a documented precondition (bad shape, bad range, bad spec).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Reading or writing files failed, or a file was malformed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf appeared during optimization.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evd
