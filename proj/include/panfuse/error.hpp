#pragma once

#include <stdexcept>
#include <string>

namespace panfuse {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller handed in something that violates a precondition (shape, range, size).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Tensor shapes incompatible for an autodiff op.
class ShapeError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

// Malformed file contents.
class FormatError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

// Input is well formed but statistically degenerate (zero variance, zero mean).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergence : public NumericalError {
 public:
  TrainingDivergence(const std::string& what, long iteration)
      : NumericalError(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}

  long iteration() const noexcept { return iteration_; }

 private:
  long iteration_;
};

}  // namespace panfuse
