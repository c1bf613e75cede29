#pragma once

#include <stdexcept>
#include <string>

namespace presem {

/// Malformed or missing input data (files, directories, images).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf produced during evaluation or optimization.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace presem
