#pragma once

#include <stdexcept>
#include <string>

namespace fusekit {

/// Malformed or inconsistent input data (files, matrices, alignments).
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Bad caller-supplied settings: out-of-range hyperparameters, missing
/// paths, incompatible option combinations.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint problems that can be pinned to a single tensor.
class CheckpointError : public DataError {
public:
  CheckpointError(std::string tensor, const std::string& what)
      : DataError(tensor.empty() ? what : what + " (tensor '" + tensor + "')"),
        tensor_(std::move(tensor)) {}

  const std::string& tensor() const noexcept { return tensor_; }

private:
  std::string tensor_;
};

class AlignmentError : public DataError {
public:
  using DataError::DataError;
};

}  // namespace fusekit
