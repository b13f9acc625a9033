#pragma once

#include <stdexcept>
#include <string>

namespace icrit {

/// Error categories. Each maps to a distinct CLI exit code (see exit_code()).
enum class ErrorKind {
  kDimension,
  kDomain,
  kConfig,
  kNumeric,
  kStaging,
  kIntegrity,
  kUsage,
  kMissingTrace,
  kDegenerateRow,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorKind::kDimension, what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(ErrorKind::kDomain, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::kNumeric, what) {}
};

class StagingError : public Error {
 public:
  explicit StagingError(const std::string& what) : Error(ErrorKind::kStaging, what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::kUsage, what) {}
};

class MissingTraceError : public Error {
 public:
  explicit MissingTraceError(const std::string& what) : Error(ErrorKind::kMissingTrace, what) {}
};

class DegenerateRowError : public Error {
 public:
  explicit DegenerateRowError(const std::string& what) : Error(ErrorKind::kDegenerateRow, what) {}
};

/// Raised when a binary artifact fails validation on load.
class IntegrityError : public Error {
 public:
  enum class Reason { kBadMagic, kVersion, kChecksum, kTruncated, kMalformed };

  IntegrityError(Reason reason, const std::string& what)
      : Error(ErrorKind::kIntegrity, what), reason_(reason) {}
  Reason reason() const noexcept { return reason_; }

 private:
  Reason reason_;
};

// Exit codes: 0 ok, 1 unexpected, 2 usage/config, 3 staging, 4 integrity, 5 numeric.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage:
    case ErrorKind::kConfig:
      return 2;
    case ErrorKind::kStaging:
      return 3;
    case ErrorKind::kIntegrity:
      return 4;
    case ErrorKind::kNumeric:
      return 5;
    default:
      return 1;
  }
}

}  // namespace icrit
