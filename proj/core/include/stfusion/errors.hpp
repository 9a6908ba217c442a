#pragma once

#include <stdexcept>
#include <string>

namespace stf {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape disagreement (wrong rank, mismatched dimensions).
struct ShapeError : Error {
  using Error::Error;
};

// A caller violated a documented precondition.
struct ContractError : Error {
  using Error::Error;
};

// Invalid model, corpus, or run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// A forward or backward pass produced a non-finite value.
struct NumericError : Error {
  using Error::Error;
};

// File I/O or parsing failure; the message carries the path or line.
struct IoError : Error {
  using Error::Error;
};

}  // namespace stf
