#pragma once

#include <stdexcept>
#include <string>

namespace tcip {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is outside its valid range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A computation produced a non-finite value where one is not allowed.
class NumericError : public Error {
 public:
  using Error::Error;
};

enum class IoErrorKind { Unreadable, Unwritable, MalformedHeader, TruncatedPayload, DimensionOverflow };

inline const char* to_string(IoErrorKind kind) {
  switch (kind) {
    case IoErrorKind::Unreadable: return "unreadable";
    case IoErrorKind::Unwritable: return "unwritable";
    case IoErrorKind::MalformedHeader: return "malformed-header";
    case IoErrorKind::TruncatedPayload: return "truncated-payload";
    case IoErrorKind::DimensionOverflow: return "dimension-overflow";
  }
  return "unknown";
}

class IoError : public Error {
 public:
  IoError(IoErrorKind kind, const std::string& path, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + path + ": " + what), kind_(kind), path_(path) {}

  IoErrorKind kind() const noexcept { return kind_; }
  const std::string& path() const noexcept { return path_; }

 private:
  IoErrorKind kind_;
  std::string path_;
};

}  // namespace tcip
