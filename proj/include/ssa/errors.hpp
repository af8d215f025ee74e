#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace ssa {

// Operand shapes do not agree for the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A NaN or infinity showed up where a finite number was required.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& what, std::size_t step = 0)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Argument outside the mathematical domain of a function.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// An index or identifier that does not exist.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A configuration value is missing, malformed or out of range.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// An iterative method ran out of iterations.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, std::size_t iterations)
      : std::runtime_error(what), iterations_(iterations) {}
  std::size_t iterations() const { return iterations_; }

 private:
  std::size_t iterations_;
};

// A theoretical guarantee that should hold did not.
class TheoryViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ssa
