#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ontoext {

// Failure categories surfaced to callers and to the CLI's machine-readable
// error line.
enum class ErrorKind {
  kSyntax,
  kDuplicateId,
  kDanglingReference,
  kCycle,
  kUnknownId,
  kInvalidArgument,
  kEmptyResult,
  kMalformedRow,
  kLabelMismatch,
  kTooLong,
  kInvalidToken,
  kNumeric,
  kIo,
  kVersion,
  kUnimplemented,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kSyntax: return "syntax";
    case ErrorKind::kDuplicateId: return "duplicate_id";
    case ErrorKind::kDanglingReference: return "dangling_reference";
    case ErrorKind::kCycle: return "cycle";
    case ErrorKind::kUnknownId: return "unknown_id";
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kEmptyResult: return "empty_result";
    case ErrorKind::kMalformedRow: return "malformed_row";
    case ErrorKind::kLabelMismatch: return "label_mismatch";
    case ErrorKind::kTooLong: return "too_long";
    case ErrorKind::kInvalidToken: return "invalid_token";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kVersion: return "version";
    case ErrorKind::kUnimplemented: return "unimplemented";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Parse failures carry the 1-based line they occurred on.
class ParseError : public Error {
 public:
  ParseError(ErrorKind kind, std::size_t line, const std::string& message)
      : Error(kind, "line " + std::to_string(line) + ": " + message), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace ontoext
