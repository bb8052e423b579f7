#pragma once

#include <stdexcept>
#include <string>

namespace tspsae {

// Shape or length disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A scalar argument outside its documented domain (n < 3, temperature <= 0, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller broke a precondition that is not a plain parameter range check.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Problem size exceeds what an algorithm supports.
class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Malformed or mismatched file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File truncated or checksum mismatch.
class IntegrityError : public FormatError {
 public:
  using FormatError::FormatError;
};

// NaN/Inf produced where a finite value was required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tspsae
