#include "obs/error.hpp"

namespace obs {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedInput: return "MalformedInput";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::InvalidRatio: return "InvalidRatio";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ProviderUnavailable: return "ProviderUnavailable";
    case ErrorCode::ProviderMismatch: return "ProviderMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ZeroNorm: return "ZeroNorm";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::EmptyModel: return "EmptyModel";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::EmptyIndex: return "EmptyIndex";
    case ErrorCode::InconsistentCorpus: return "InconsistentCorpus";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::GraphUnavailable: return "GraphUnavailable";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::UnparseableResponse: return "UnparseableResponse";
    case ErrorCode::ImageRequiredButUnsupported: return "ImageRequiredButUnsupported";
    case ErrorCode::TemplateError: return "TemplateError";
    case ErrorCode::EmptyReference: return "EmptyReference";
    case ErrorCode::ProblemTooLarge: return "ProblemTooLarge";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::IncompleteMatrix: return "IncompleteMatrix";
    case ErrorCode::NoPairableValues: return "NoPairableValues";
    case ErrorCode::AlignmentError: return "AlignmentError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message,
             std::optional<std::size_t> location)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      code_(code),
      location_(location) {}

}  // namespace obs
