#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sbanet {

// Base of every error thrown by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (divisibility, bin counts, unknown keys).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller broke a precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

// API misuse such as a second backward over a consumed tape.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Bad input data: out-of-vocabulary words, non-binary masks, unreadable files.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or failed gradient checks.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed binary container; carries the byte offset where parsing failed.
class FormatError : public DataError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace sbanet
