#pragma once

#include <stdexcept>
#include <string>

namespace covnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Out-of-domain hyperparameter or argument (dropout rate >= 1, empty input, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf activations or losses, degenerate statistics.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Unreadable or malformed input files, manifests and masks.
class DataError : public Error {
 public:
  using Error::Error;
};

enum class CheckpointErrorCode {
  kIo,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kConfigHashMismatch,
  kLayoutMismatch,
};

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorCode code, const std::string& what)
      : Error(what), code_(code) {}
  CheckpointErrorCode code() const { return code_; }

 private:
  CheckpointErrorCode code_;
};

}  // namespace covnet
