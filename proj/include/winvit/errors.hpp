#pragma once

#include <stdexcept>
#include <string>

namespace winvit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Token grid / window geometry that cannot be tiled.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Invalid model, training or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward from a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite value detected by the debug finite check.
class NumericError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { Io, Magic, Version, Truncated, Shape };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class DataError : public Error {
 public:
  enum class Kind { MissingFile, MalformedPpm, LabelOutOfRange, MalformedRow, Empty };

  DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace winvit
