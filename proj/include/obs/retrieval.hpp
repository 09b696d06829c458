#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "obs/classifier.hpp"
#include "obs/embedding.hpp"
#include "obs/knowledge_graph.hpp"

namespace obs {

enum class ToolKind { ComponentExplanation, CharactersByComponent };
enum class EvidenceKind { ComponentExplanation, ContainingCharacter, Variant, ModernMapping };
enum class EvidenceSource { Tool, Internal, Cache };

std::string_view to_string(ToolKind tool);
std::string_view to_string(EvidenceKind kind);
std::string_view to_string(EvidenceSource source);
std::optional<ToolKind> parse_tool_kind(std::string_view text);

struct ToolCall {
  ToolKind tool = ToolKind::ComponentExplanation;
  std::string argument;
  /// Logical tick, strictly increasing within one bundle. A wall clock
  /// would break byte-identical reruns.
  std::uint64_t issued_at = 0;
  bool operator==(const ToolCall&) const = default;
};

struct EvidenceItem {
  EvidenceKind kind = EvidenceKind::ComponentExplanation;
  std::string subject;
  std::string content;
  EvidenceSource source = EvidenceSource::Tool;
  std::size_t rank = 0;
  /// Component labels of a containing character, used for overlap ranking.
  std::vector<std::string> components;
  bool empty_explanation = false;
  bool operator==(const EvidenceItem&) const = default;
};

struct EvidenceBundle {
  std::string character_ref;
  std::vector<RankedEntry> predicted_components;
  std::vector<EvidenceItem> items;
  std::vector<ToolCall> trace;
  bool sufficient = false;
  std::size_t min_evidence = 0;
  std::size_t cache_hits = 0;
  bool operator==(const EvidenceBundle&) const = default;
};

nlohmann::json to_json(const EvidenceBundle& bundle);
EvidenceBundle bundle_from_json(const nlohmann::json& doc);
/// Canonical serialization used for determinism checks and `--dump-evidence`.
std::string serialize_bundle(const EvidenceBundle& bundle);

/// Plain-text rendering placed into prompts. Empty bundles render as "".
std::string render_evidence(const EvidenceBundle& bundle);

struct RetrievalConfig {
  std::size_t top_m = 3;
  std::size_t min_evidence = 3;
  std::size_t max_items = 12;
  double cache_threshold = 0.95;
  std::size_t cache_capacity = 1024;

  /// Throws ConfigError on unknown keys or out-of-range values.
  static RetrievalConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
  void validate() const;
};

struct CacheHit {
  std::vector<EvidenceItem> result;
  double similarity = 0.0;
  std::string stored_query;
};

/// Query cache keyed on embedded query text. Lookups and inserts are
/// serialized by one mutex, so LRU state is never torn.
class SemanticCache {
public:
  SemanticCache(std::size_t capacity, double threshold, std::shared_ptr<const EmbeddingProvider> provider);

  /// Best entry by cosine similarity if it reaches the threshold.
  std::optional<CacheHit> lookup(std::string_view query);
  void insert(std::string_view query, std::vector<EvidenceItem> result);

  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  double threshold() const { return threshold_; }
  /// Stored query texts, least recently used first.
  std::vector<std::string> keys_by_recency() const;

private:
  struct Entry {
    Embedding key;
    std::string query;
    std::vector<EvidenceItem> result;
    std::uint64_t last_used = 0;
  };

  std::size_t capacity_;
  double threshold_;
  std::shared_ptr<const EmbeddingProvider> provider_;
  mutable std::mutex mu_;
  std::vector<Entry> entries_;
  std::uint64_t clock_ = 0;
};

/// Graph access used by the cascade. The first two methods are the
/// externally callable tools; the others are internal lookups.
class GraphTools {
public:
  virtual ~GraphTools() = default;
  virtual ComponentExplanation component_explanation(std::string_view label) const = 0;
  virtual std::vector<ContainingCharacter> characters_by_component(std::string_view label) const = 0;
  virtual std::vector<std::string> variant_lookup(std::string_view character_id) const = 0;
  virtual std::optional<std::string> modern_mapping(std::string_view character_id) const = 0;
};

class KnowledgeGraphTools : public GraphTools {
public:
  /// A null graph makes every call fail with GraphUnavailable.
  explicit KnowledgeGraphTools(const KnowledgeGraph* graph) : graph_(graph) {}

  ComponentExplanation component_explanation(std::string_view label) const override;
  std::vector<ContainingCharacter> characters_by_component(std::string_view label) const override;
  std::vector<std::string> variant_lookup(std::string_view character_id) const override;
  std::optional<std::string> modern_mapping(std::string_view character_id) const override;

private:
  const KnowledgeGraph& graph() const;
  const KnowledgeGraph* graph_;
};

/// Fixed cascade: tool calls for the top-m predicted components, then
/// internal variant and modern lookups when evidence is short. `cache` may
/// be null.
EvidenceBundle retrieve_evidence(const GraphTools& tools, const RankedPrediction& predicted,
                                 SemanticCache* cache, const RetrievalConfig& config,
                                 std::string character_ref = "");
EvidenceBundle retrieve_evidence(const KnowledgeGraph* graph, const RankedPrediction& predicted,
                                 SemanticCache* cache, const RetrievalConfig& config,
                                 std::string character_ref = "");

/// Same as retrieve_evidence but stage 1 runs a caller-supplied plan (for
/// instance one produced by a planning agent) instead of the fixed order.
EvidenceBundle retrieve_with_plan(const GraphTools& tools, const RankedPrediction& predicted,
                                  const std::vector<ToolCall>& plan, SemanticCache* cache,
                                  const RetrievalConfig& config, std::string character_ref = "");

/// The fixed stage-1 plan for a prediction.
std::vector<ToolCall> default_plan(const RankedPrediction& predicted, const RetrievalConfig& config);

/// Dedup by (kind, subject), fixed-priority ordering, truncation and rank
/// assignment. Output does not depend on input order.
std::vector<EvidenceItem> synthesize_bundle(const std::vector<EvidenceItem>& stage1,
                                            const std::vector<EvidenceItem>& stage2,
                                            const RankedPrediction& predicted, const RetrievalConfig& config);

}  // namespace obs
