#pragma once

#include <stdexcept>
#include <string>

namespace hcfusion {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or image sizes that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid or contradictory configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing, unreadable or unsupported input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace hcfusion
