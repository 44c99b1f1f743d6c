#pragma once

#include <stdexcept>
#include <string>

namespace vigilnet {

// Shape or rank disagreement between tensors handed to an operation.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration value (out-of-range multiplier, bad epsilon, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// API misuse (backward on an empty tape, grad before backward, ...).
struct UsageError : std::logic_error {
  explicit UsageError(const std::string& what) : std::logic_error(what) {}
};

// Base for every file-format problem; subclasses distinguish the cause.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct BadMagicError : IoError {
  explicit BadMagicError(const std::string& what) : IoError(what) {}
};

struct BadVersionError : IoError {
  explicit BadVersionError(const std::string& what) : IoError(what) {}
};

struct TruncatedError : IoError {
  explicit TruncatedError(const std::string& what) : IoError(what) {}
};

// Stored tensor list does not match the shapes the model expects.
struct ManifestMismatchError : IoError {
  explicit ManifestMismatchError(const std::string& what) : IoError(what) {}
};

// Record payload decodes but violates the container contract (bad label, ...).
struct CorruptRecordError : IoError {
  explicit CorruptRecordError(const std::string& what) : IoError(what) {}
};

// Loss became non-finite during optimization.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace vigilnet
