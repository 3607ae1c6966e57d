#pragma once

#include <stdexcept>
#include <string>

namespace tvo {

// Base of every error thrown by the library. The CLI maps the concrete type to
// an exit code, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or lengths that do not line up (tape nodes, tables, schedules).
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// API called out of order, e.g. backward before forward.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Argument outside its mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or degenerate weights encountered while computing.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Requested combination is not supported (e.g. plain REINFORCE at beta > 0).
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent run or objective configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tvo
