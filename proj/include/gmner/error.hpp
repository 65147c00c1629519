#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gmner {

enum class ErrorKind {
  kEmptyInput,
  kSchemaViolation,
  kSpanAlignment,
  kOverlappingSpans,
  kDimMismatch,
  kNonFinite,
  kDuplicateKey,
  kMissingKey,
  kZeroNorm,
  kInvalidLabel,
  kInvalidArgument,
  kEmptyDataset,
  kDivergence,
  kCacheMiss,
  kHttp,
  kProviderPayload,
  kIo,
  kFormat,
  kConfig,
  kDependency,
  kProvenance,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kEmptyInput: return "empty input";
    case ErrorKind::kSchemaViolation: return "schema violation";
    case ErrorKind::kSpanAlignment: return "span alignment";
    case ErrorKind::kOverlappingSpans: return "overlapping spans";
    case ErrorKind::kDimMismatch: return "dim mismatch";
    case ErrorKind::kNonFinite: return "non-finite value";
    case ErrorKind::kDuplicateKey: return "duplicate key";
    case ErrorKind::kMissingKey: return "missing key";
    case ErrorKind::kZeroNorm: return "zero norm";
    case ErrorKind::kInvalidLabel: return "invalid label";
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kEmptyDataset: return "empty dataset";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kCacheMiss: return "cache miss";
    case ErrorKind::kHttp: return "http failure";
    case ErrorKind::kProviderPayload: return "provider payload";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kDependency: return "stage dependency";
    case ErrorKind::kProvenance: return "provenance";
  }
  return "unknown";
}

/// Every failure raised by the library. `kind()` lets callers branch
/// without parsing the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace gmner
