#pragma once

#include <stdexcept>
#include <string>

namespace fcm {

// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Token id or tensor index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where a finite value is required, or a degenerate numeric input.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of the gradient tape (e.g. a second backward pass).
class TapeError : public Error {
 public:
  using Error::Error;
};

// Prompt plus continuation exceeds the model context.
class ContextOverflowError : public Error {
 public:
  using Error::Error;
};

// Malformed corpus, task or config input.
class FormatError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace fcm
