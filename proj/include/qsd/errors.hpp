#pragma once

#include <stdexcept>
#include <string>

namespace qsd {

/// Base class of every error raised by the library. `module()` names the
/// component that raised it so the CLI can report provenance.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(module + ": " + what), module_(std::move(module)) {}
  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

/// Model definition is unusable (non-finite growth rate, bad parameters).
class ModelError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// An evaluator returned NaN; carries the offending abscissa.
class EvaluationError : public Error {
 public:
  EvaluationError(std::string module, const std::string& what, double abscissa)
      : Error(std::move(module), what + " at x=" + std::to_string(abscissa)),
        abscissa_(abscissa) {}
  double abscissa() const noexcept { return abscissa_; }

 private:
  double abscissa_;
};

/// A numerical procedure could not deliver a trustworthy answer
/// (eigenvalue clustering, tail-dominated kernel, underflow, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Operation called outside its documented precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Configuration file or command-line validation failure.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace qsd
