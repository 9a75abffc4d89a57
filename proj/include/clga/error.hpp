#pragma once

#include <stdexcept>
#include <string>

namespace clga {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf was produced. The message names the op that produced it.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or inconsistent on-disk data.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A precondition on the arguments does not hold.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace clga
