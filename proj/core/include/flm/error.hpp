#pragma once

#include <stdexcept>
#include <string>

namespace flm {

// Every library failure derives from Error. ValidationError marks failures
// caused by bad inputs (arguments, configs, files); the CLI maps those to
// exit code 2 and everything else to 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ClassificationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class EmptyShingleError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class PlanningError : public Error {
 public:
  PlanningError(std::string domain, const std::string& what)
      : Error(what), domain_(std::move(domain)) {}
  const std::string& domain() const noexcept { return domain_; }

 private:
  std::string domain_;
};

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

}  // namespace flm
