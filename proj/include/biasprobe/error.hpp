#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace biasprobe {

enum class ErrorKind {
  UnbalancedTag,
  UnknownTag,
  OverlappingTags,
  MalformedRecord,
  DuplicateId,
  BackendError,
  RoundTripMismatch,
  CategoryMismatch,
  EmptyVocabulary,
  InsufficientSources,
  ArityError,
  ModeExemplarMismatch,
  EmptyGeneration,
  CassetteMiss,
  AuthMissing,
  EmptyInput,
  NoCompletePairs,
  InsufficientGroups,
  NonPositiveBaseline,
  IoError,
  ManifestMismatch,
  EmptyReport,
  MissingRun,
  InvalidArgument,
  Interrupted,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::UnbalancedTag: return "UnbalancedTag";
    case ErrorKind::UnknownTag: return "UnknownTag";
    case ErrorKind::OverlappingTags: return "OverlappingTags";
    case ErrorKind::MalformedRecord: return "MalformedRecord";
    case ErrorKind::DuplicateId: return "DuplicateId";
    case ErrorKind::BackendError: return "BackendError";
    case ErrorKind::RoundTripMismatch: return "RoundTripMismatch";
    case ErrorKind::CategoryMismatch: return "CategoryMismatch";
    case ErrorKind::EmptyVocabulary: return "EmptyVocabulary";
    case ErrorKind::InsufficientSources: return "InsufficientSources";
    case ErrorKind::ArityError: return "ArityError";
    case ErrorKind::ModeExemplarMismatch: return "ModeExemplarMismatch";
    case ErrorKind::EmptyGeneration: return "EmptyGeneration";
    case ErrorKind::CassetteMiss: return "CassetteMiss";
    case ErrorKind::AuthMissing: return "AuthMissing";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::NoCompletePairs: return "NoCompletePairs";
    case ErrorKind::InsufficientGroups: return "InsufficientGroups";
    case ErrorKind::NonPositiveBaseline: return "NonPositiveBaseline";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ManifestMismatch: return "ManifestMismatch";
    case ErrorKind::EmptyReport: return "EmptyReport";
    case ErrorKind::MissingRun: return "MissingRun";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::Interrupted: return "Interrupted";
  }
  return "Unknown";
}

inline ErrorKind error_kind_from_string(std::string_view name) {
  for (int k = 0; k <= static_cast<int>(ErrorKind::Interrupted); ++k) {
    auto kind = static_cast<ErrorKind>(k);
    if (to_string(kind) == name) return kind;
  }
  return ErrorKind::InvalidArgument;
}

/// Every failure raised by the library carries one of the kinds above so
/// callers (and the CLI exit-code mapping) can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        message_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

/// Value form of an Error, used where failures are collected rather than thrown.
struct ErrorRecord {
  ErrorKind kind = ErrorKind::InvalidArgument;
  std::string message;

  static ErrorRecord from(const Error& e) { return {e.kind(), e.message()}; }
  std::string describe() const { return std::string(to_string(kind)) + ": " + message; }
  bool operator==(const ErrorRecord&) const = default;
};

}  // namespace biasprobe
