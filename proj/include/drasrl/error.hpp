#pragma once

#include <stdexcept>
#include <string>

namespace drasrl {

/// Invalid user-supplied configuration (layouts, hyperparameters, shapes).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical routine produced a non-finite value or a failed solve.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem or serialization failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stored data does not match its recorded checksum.
class ChecksumError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace drasrl
