#pragma once

#include <stdexcept>
#include <string>

namespace hyperdys {

// Root of every error thrown by the library. `exit_code()` maps the error
// family onto the CLI contract: 1 validation, 2 data, 3 internal.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 3; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

// Bad argument values (zero rates, even delta widths, empty test sets...).
class ParameterError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LabelError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class StratificationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class VersionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class UnsupportedError : public DataError {
 public:
  using DataError::DataError;
};

class EmptyInputError : public DataError {
 public:
  using DataError::DataError;
};

class TooShortError : public DataError {
 public:
  using DataError::DataError;
};

class IncompatibleWeightsError : public DataError {
 public:
  using DataError::DataError;
};

class CorruptionError : public DataError {
 public:
  using DataError::DataError;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hyperdys
