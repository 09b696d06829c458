#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace obs {

enum class ErrorCode {
  MalformedInput,
  SchemaViolation,
  UnknownLabel,
  InvalidRatio,
  EmptyInput,
  ProviderUnavailable,
  ProviderMismatch,
  DimensionMismatch,
  ZeroNorm,
  EmptyTrainingSet,
  EmptyModel,
  EmptyTestSet,
  EmptyIndex,
  InconsistentCorpus,
  NotFound,
  IoFailure,
  CorruptFile,
  GraphUnavailable,
  BackendUnavailable,
  UnparseableResponse,
  ImageRequiredButUnsupported,
  TemplateError,
  EmptyReference,
  ProblemTooLarge,
  LengthMismatch,
  IncompleteMatrix,
  NoPairableValues,
  AlignmentError,
  ConfigError,
};

std::string_view to_string(ErrorCode code);

/// Domain error carrying a machine-checkable code. `location` holds the
/// offending shape index, byte offset, or record number when one applies.
class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> location = std::nullopt);

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> location() const noexcept { return location_; }

private:
  ErrorCode code_;
  std::optional<std::size_t> location_;
};

}  // namespace obs
