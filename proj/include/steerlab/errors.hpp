#pragma once

#include <stdexcept>
#include <string>

namespace steerlab {

// Base of every error the library throws. The CLI maps the concrete type to
// a process exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable bundle files.
class BundleError : public Error {
 public:
  using Error::Error;
};

// Structurally readable input that violates a shape/format contract.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class TokenError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class ComponentError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

namespace exit_codes {
inline constexpr int ok = 0;
inline constexpr int usage = 2;
inline constexpr int validation = 3;
inline constexpr int io = 4;
}  // namespace exit_codes

inline int exit_code(const Error& e) {
  if (dynamic_cast<const UsageError*>(&e)) return exit_codes::usage;
  if (dynamic_cast<const BundleError*>(&e)) return exit_codes::io;
  return exit_codes::validation;
}

}  // namespace steerlab
