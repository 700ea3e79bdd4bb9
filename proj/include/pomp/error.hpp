#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pomp {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Zero or non-finite norm where a direction was required.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// A class feature collapsed to zero before normalization.
class DegenerateFeatureError : public DegenerateInputError {
 public:
  DegenerateFeatureError(int class_id, const std::string& what)
      : DegenerateInputError("class " + std::to_string(class_id) + ": " + what),
        class_id_(class_id) {}
  int class_id() const noexcept { return class_id_; }

 private:
  int class_id_;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Binary or text payload does not follow its declared layout. Carries the
/// byte (or line) offset where the problem was detected.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ShapeError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DigestMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class MeterStateError : public Error {
 public:
  using Error::Error;
};

/// Wraps a failure inside the training loop with the step that triggered it.
class TrainingError : public Error {
 public:
  TrainingError(std::uint64_t step, const std::string& what)
      : Error("training aborted at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::uint64_t step() const noexcept { return step_; }

 private:
  std::uint64_t step_;
};

}  // namespace pomp
