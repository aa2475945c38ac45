#pragma once

#include <stdexcept>
#include <string>

namespace bagforge {

/// Root of every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input or configuration rejected before any work was done (CLI exit code 1).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. running backward on a tape without a recorded loss.
class UsageError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// File is not in the expected container format (bad magic or version).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Checksum mismatch on a container payload.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// A training or evaluation run could not continue (CLI exit code 2).
class RunAbort : public Error {
 public:
  using Error::Error;
};

}  // namespace bagforge
