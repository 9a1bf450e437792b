#pragma once

#include <stdexcept>
#include <string>

namespace encap {

/// Incompatible tensor extents.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside an operation's mathematical domain (log/sqrt of negative).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Invalid layer, network, or training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse: non-scalar loss, freed graph, mixed dtypes.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad user input such as an out-of-range label.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Payload shorter than its header promises.
class LengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A non-finite value appeared while anomaly detection was on.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string op, const std::string& what)
      : std::runtime_error(what), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

}  // namespace encap
