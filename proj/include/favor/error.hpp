#pragma once

#include <stdexcept>
#include <string>

namespace favor {

/// Raised when a caller breaks an operation's precondition (shape or id mismatch).
class ContractViolation : public std::logic_error {
public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// Raised for malformed or inconsistent external data (manifests, configs, checkpoints).
class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when training produces a non-finite loss or gradient.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace favor
