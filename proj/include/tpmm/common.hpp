#pragma once

#include <stdexcept>
#include <string>

namespace tpmm {

inline constexpr const char* kToolVersion = "0.1.0";

// Error taxonomy. The CLI maps ConfigError/ValidationError to exit code 2
// and everything else to exit code 1.

// Bad declarative input: config files, CLI flags, out-of-range knobs.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Structurally invalid domain object (model spec, token sequence, ...).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad runtime argument to an operation (token out of range, empty batch, ...).
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corrupt or mismatched on-disk artifact.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / OS failure.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tpmm
