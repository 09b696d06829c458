#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "obs/chat.hpp"
#include "obs/classifier.hpp"
#include "obs/dataset.hpp"
#include "obs/retrieval.hpp"
#include "obs/util.hpp"

namespace obs {

enum class Language { Zh, En };
enum class InferenceMode { Vlm, MultiAgent };

std::string_view to_string(Language lang);
std::optional<Language> parse_language(std::string_view text);
std::string_view to_string(InferenceMode mode);
std::optional<InferenceMode> parse_inference_mode(std::string_view text);

/// Placed in prompts when retrieval produced nothing.
inline constexpr std::string_view kNoEvidenceMarker = "[no retrieved evidence]";

enum class ResponseKind { TypedClassification, Interpretation, JudgeScore };

struct ParsedResponse {
  std::optional<InscriptionType> type;
  std::string reason;
  std::string interpretation;
  std::optional<double> score;
};

/// Extracts `TYPE:`, `REASON:`, `INTERPRETATION:` and `Score:` fields.
/// Markers may follow prose and markdown emphasis. Throws
/// UnparseableResponse with the byte offset of the first violation.
ParsedResponse parse_model_response(std::string_view raw, ResponseKind expected);

struct InferenceOptions {
  std::string model = "default";
  double temperature = 0.0;
  Language lang = Language::En;
  /// Whether the multi-agent retriever sees the image as well.
  bool retriever_sees_image = false;
};

struct TypeInference {
  InscriptionType type = InscriptionType::Ideographic;
  std::string reasoning;
  TokenUsage usage;
  bool retried = false;
  std::string template_id;
};

struct InterpretationResult {
  std::string character_ref;
  std::optional<InscriptionType> inscription_type;
  std::string reasoning_trace;
  std::string interpretation;
  std::vector<std::size_t> evidence_used;
  InferenceMode mode = InferenceMode::Vlm;
  TokenUsage token_usage;
  std::map<std::string, TokenUsage> usage_by_agent;
  std::vector<std::string> backend_names;
  Language language = Language::En;
  std::vector<std::string> template_ids;
  /// Multi-agent only: the planner's output was unusable and the fixed
  /// cascade ran instead.
  bool plan_fallback = false;
  bool type_retried = false;
  std::optional<EvidenceBundle> evidence;
};

nlohmann::json to_json(const InterpretationResult& result);

/// `- <label> [d=<distance>]` per prediction, four decimals.
std::string render_predictions(const RankedPrediction& predicted, std::size_t limit = SIZE_MAX);

/// One call plus at most one corrective retry.
TypeInference infer_relationship(ChatBackend& backend, const std::optional<Bytes>& image,
                                 const RankedPrediction& predicted, const EvidenceBundle& evidence,
                                 const InferenceOptions& options);

/// Exactly one backend call conditioned on the image, predictions and
/// rendered evidence.
InterpretationResult generate_interpretation_vlm(ChatBackend& backend, const Bytes& image,
                                                 const RankedPrediction& predicted, const EvidenceBundle& evidence,
                                                 const InferenceOptions& options);

/// Parses `CALL: tool(argument)` lines. Returns nothing when any line names
/// another tool, is malformed, or no call is present.
std::optional<std::vector<ToolCall>> parse_plan(std::string_view raw);

/// Retriever agent plans tool calls (falling back to the fixed cascade on
/// a bad plan), then the reasoner composes the interpretation.
InterpretationResult generate_interpretation_multiagent(ChatBackend& retriever, ChatBackend& reasoner,
                                                        const std::optional<Bytes>& image, const GraphTools& tools,
                                                        const RankedPrediction& predicted, SemanticCache* cache,
                                                        const RetrievalConfig& config,
                                                        const InferenceOptions& options,
                                                        std::string character_ref = "");

/// Judge request with temperature pinned to 0.
ChatRequest make_judge_request(std::string_view reference, std::string_view candidate, const std::string& model);

struct JudgeResult {
  double score = 0.0;
  TokenUsage usage;
};

JudgeResult judge_score(ChatBackend& backend, std::string_view reference, std::string_view candidate,
                        const std::string& model);

}  // namespace obs
