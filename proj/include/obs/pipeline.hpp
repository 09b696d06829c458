#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "obs/chat.hpp"
#include "obs/classifier.hpp"
#include "obs/dataset.hpp"
#include "obs/embedding.hpp"
#include "obs/inference.hpp"
#include "obs/knowledge_graph.hpp"
#include "obs/retrieval.hpp"

namespace obs {

/// Layered settings for every subcommand. Precedence is flags, then
/// environment, then config file, then these defaults.
struct PipelineConfig {
  Language lang = Language::En;
  /// "vlm", "multi_agent" or "both".
  std::string mode = "vlm";
  std::size_t top_k = 5;
  std::size_t workers = 1;
  std::string chat_model = "default";
  std::string judge_model = "judge";
  double temperature = 0.0;
  bool retriever_sees_image = false;
  int embed_dim = kDefaultEmbeddingDim;
  int max_in_flight = 4;
  int timeout_seconds = 120;
  std::set<std::string> metrics{"rouge1", "embedding_f1", "mover"};
  RetrievalConfig retrieval;

  std::optional<std::string> embed_url;
  std::optional<std::string> chat_url;
  std::optional<std::string> retriever_url;
  std::optional<std::string> reasoner_url;
  /// Environment only; never read from or written to files.
  std::optional<std::string> chat_key;

  bool mock = false;
  std::optional<std::filesystem::path> replay;

  /// Overlays keys from a config document. Unknown keys, secrets and
  /// ill-typed values are ConfigError.
  void apply_json(const nlohmann::json& doc);
  /// Overlays OBS_* environment variables through `getenv`.
  void apply_env(const std::function<const char*(const char*)>& getenv);
  void validate() const;
  /// Non-secret settings, for run manifests.
  nlohmann::json to_json() const;
};

struct Backends {
  std::shared_ptr<ChatBackend> chat;
  std::shared_ptr<ChatBackend> retriever;
  std::shared_ptr<ChatBackend> reasoner;
};

/// Mock, replay or HTTP backends. Without any of them configured this is
/// BackendUnavailable ("backend not configured").
Backends make_backends(const PipelineConfig& config);

/// Top-k component predictions for one character. Each annotated crop is
/// classified and every label keeps its smallest distance; a character
/// without crops is classified from its whole image.
RankedPrediction predict_components(const ClassifierModel& model, const EmbeddingProvider& provider,
                                    const Corpus& corpus, const CharacterRecord& character, std::size_t k);

/// Stages b to d for one character in "vlm" or "multi_agent" mode: fixed or
/// planned retrieval, inscription-type inference and interpretation.
InterpretationResult interpret_character(const PipelineConfig& config, Backends& backends, const KnowledgeGraph* graph,
                                         const Bytes& image, const RankedPrediction& predicted,
                                         const std::string& mode, SemanticCache* cache,
                                         const std::string& character_ref);

struct CharacterFailure {
  std::string character_id;
  std::string mode;
  ErrorCode code = ErrorCode::MalformedInput;
  std::string message;
};

struct RunOutcome {
  /// Per mode, in character order.
  std::map<std::string, std::vector<InterpretationResult>> results;
  std::vector<CharacterFailure> failures;
  nlohmann::json manifest;
  std::string manifest_hash;
};

struct RunInputs {
  const Corpus* characters = nullptr;
  const ClassifierModel* model = nullptr;
  const KnowledgeGraph* graph = nullptr;
  std::shared_ptr<const EmbeddingProvider> provider;
  /// Content hashes recorded in the manifest.
  std::string manifest_sha256;
  std::string model_sha256;
  std::string graph_sha256;
};

/// Classify, retrieve, infer the inscription type and interpret each
/// character. Failures are isolated per character. When `out_dir` is set,
/// results and run_manifest.json are written there atomically.
RunOutcome run_pipeline(const PipelineConfig& config, const RunInputs& inputs, Backends& backends,
                        const std::vector<std::string>& character_ids,
                        const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Reads the fields evaluation needs back from a result file.
InterpretationResult result_from_json(const nlohmann::json& doc);

}  // namespace obs
