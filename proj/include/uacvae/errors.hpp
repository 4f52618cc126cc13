#pragma once

#include <stdexcept>
#include <string>

namespace uacvae {

/// Shape mismatch between operands of a tensor op.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NaN/Inf produced or consumed somewhere it must not be.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input data (corpus lines, vocab, checkpoints).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint manifest and blob disagree, or the blob is unreadable.
struct CheckpointError : DataError {
  using DataError::DataError;
};

/// An NLI backend could not produce a judgment.
struct JudgeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace uacvae
