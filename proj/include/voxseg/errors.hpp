#pragma once

#include <stdexcept>
#include <string>

namespace voxseg {

/// Base class for all voxseg errors. Subclasses map to CLI exit codes:
/// ConfigError -> 2, everything else -> 3.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid user-supplied configuration (bad key, bad value, incompatible spec).
struct ConfigError : Error {
  using Error::Error;
};

/// File could not be read/written.
struct IoError : Error {
  using Error::Error;
};

/// Malformed file header; message names the offending field.
struct FormatError : Error {
  using Error::Error;
};

/// Header and payload disagree.
struct CorruptionError : Error {
  using Error::Error;
};

/// Tensor/volume shapes incompatible for the requested operation.
struct ShapeError : Error {
  using Error::Error;
};

/// Bad numeric argument (non-positive spacing, gamma <= 0, ...).
struct InvalidArgument : Error {
  using Error::Error;
};

/// Phantom placement could not satisfy the config after bounded retries.
struct GenerationError : Error {
  using Error::Error;
};

/// Operation would exceed a configured memory/voxel budget.
struct CapacityError : Error {
  using Error::Error;
};

}  // namespace voxseg
