#pragma once

#include <stdexcept>
#include <string>

namespace cvrnet {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor rank/extent mismatches and invalid operator geometry.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument values (hyperparameters, probabilities, label encodings).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Malformed files: images, checkpoints, fold plans, confusion CSVs.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures (missing paths, unwritable outputs).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where training must abort; carries the diagnostic text.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Loaded artifact does not match the target (checkpoint vs. model config).
class MismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace cvrnet
