#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mtl {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/layer shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside its documented domain (bad label, bad hyperparameter, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Invalid experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Problems reading or writing data files.
class DataError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedError : public DataError {
 public:
  TruncatedError(std::size_t offset, const std::string& what)
      : DataError(what + " (truncated at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Failure inside a training iteration; carries the 1-based iteration index.
class TrainingError : public Error {
 public:
  TrainingError(std::size_t iteration, const std::string& what)
      : Error("iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}

  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

}  // namespace mtl
