#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fixslot {

// Common base so callers can catch everything this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes violate an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An API precondition unrelated to shapes was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

// A computation produced non-finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A fixed-point solve failed; carries the residual history up to the failure.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : Error(what), trace_(std::move(trace)) {}
  const std::vector<double>& residual_trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

// Rejection sampling ran out of attempts.
class GenerationError : public Error {
 public:
  using Error::Error;
};

// Filesystem / stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Bad config file, key, or value (maps to CLI usage errors).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace fixslot
