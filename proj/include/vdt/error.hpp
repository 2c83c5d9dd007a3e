#pragma once

#include <stdexcept>
#include <string>

namespace vdt {

// Base of every error thrown by the library. The component name is kept so
// the CLI can report which stage failed.
class Error : public std::runtime_error {
 public:
  Error(std::string component, const std::string& what)
      : std::runtime_error(component + ": " + what), component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

// Shapes that do not line up (matmul inner dims, feature widths, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid model/generator/trainer configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad caller-supplied data: labels out of range, wrong image sizes.
class InputError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced or received at an operation boundary.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::string component, const std::string& what, std::size_t line)
      : Error(std::move(component), "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class CheckpointError : public Error {
 public:
  enum class Kind { kMagicMismatch, kTruncated, kShapeMismatch, kUnsupported };

  CheckpointError(Kind kind, const std::string& what) : Error("checkpoint", what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace vdt
