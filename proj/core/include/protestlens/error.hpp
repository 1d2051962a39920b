#pragma once

#include <stdexcept>
#include <string>

namespace protestlens {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor rank/dimension mismatch.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Invalid argument value (bad ratio, non-positive count, eps <= 0, ...).
class ValueError : public Error {
public:
  using Error::Error;
};

/// Out-of-range index (class target, token position, ...).
class IndexError : public Error {
public:
  using Error::Error;
};

/// Operation attempted in an invalid state (double backward, missing grad).
class StateError : public Error {
public:
  using Error::Error;
};

/// Non-finite value where a finite one is required.
class NumericError : public Error {
public:
  using Error::Error;
};

/// Token id outside the vocabulary.
class VocabError : public Error {
public:
  using Error::Error;
};

/// Invalid model or run configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed or unreadable input data (CSV, JSONL, image files).
class DataError : public Error {
public:
  using Error::Error;
};

/// Corrupt or inconsistent serialized state (checkpoints, manifests).
class IntegrityError : public Error {
public:
  using Error::Error;
};

/// Serialized state from an incompatible format version.
class VersionError : public IntegrityError {
public:
  using IntegrityError::IntegrityError;
};

}  // namespace protestlens
