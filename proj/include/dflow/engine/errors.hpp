#pragma once

#include <stdexcept>
#include <string>

namespace dflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity showed up where a finite value is required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Raised by the backward pass when a recorded primitive has no derivative rule.
class UnsupportedPrimitive : public Error {
 public:
  explicit UnsupportedPrimitive(std::string primitive)
      : Error("unsupported primitive in gradient graph: " + primitive), primitive_(std::move(primitive)) {}
  const std::string& primitive() const noexcept { return primitive_; }

 private:
  std::string primitive_;
};

/// The requested quantity does not exist for this object (e.g. log Z of an unnormalized target).
class UnavailableError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration; `key()` names the offending setting.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what) : Error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace dflow
