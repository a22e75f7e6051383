#pragma once

#include <stdexcept>
#include <string>

namespace freqtune {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an operation's rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, zero norms and other degenerate numerics.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid arguments, configuration values or call sequences.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable files.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace freqtune
