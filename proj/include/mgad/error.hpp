#pragma once

#include <stdexcept>
#include <string>

namespace mgad {

// Precondition and configuration failures use std::invalid_argument /
// std::out_of_range. The two types below cover the remaining failure classes
// the CLI maps onto distinct exit codes.

/// A computation produced a non-finite value or diverged.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// A file could not be read, written or parsed.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mgad
