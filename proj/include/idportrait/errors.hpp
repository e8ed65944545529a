#pragma once

#include <stdexcept>
#include <string>

namespace idportrait {

/// Tensor or parameter dimensions disagree with an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Zero-norm vectors and similar inputs for which a quantity is undefined.
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class InvalidBBoxError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CorruptCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// A loss term became NaN or infinite during training.
class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NotImplementedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace idportrait
