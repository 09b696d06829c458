#include "obs/retrieval.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <set>
#include <tuple>

#include "obs/error.hpp"

namespace obs {

using nlohmann::json;

std::string_view to_string(ToolKind tool) {
  switch (tool) {
    case ToolKind::ComponentExplanation: return "component_explanation";
    case ToolKind::CharactersByComponent: return "characters_by_component";
  }
  return "";
}

std::string_view to_string(EvidenceKind kind) {
  switch (kind) {
    case EvidenceKind::ComponentExplanation: return "component_explanation";
    case EvidenceKind::ContainingCharacter: return "containing_character";
    case EvidenceKind::Variant: return "variant";
    case EvidenceKind::ModernMapping: return "modern_mapping";
  }
  return "";
}

std::string_view to_string(EvidenceSource source) {
  switch (source) {
    case EvidenceSource::Tool: return "tool";
    case EvidenceSource::Internal: return "internal";
    case EvidenceSource::Cache: return "cache";
  }
  return "";
}

std::optional<ToolKind> parse_tool_kind(std::string_view text) {
  if (text == "component_explanation") return ToolKind::ComponentExplanation;
  if (text == "characters_by_component") return ToolKind::CharactersByComponent;
  return std::nullopt;
}

namespace {

std::optional<EvidenceKind> parse_evidence_kind(std::string_view text) {
  for (auto k : {EvidenceKind::ComponentExplanation, EvidenceKind::ContainingCharacter, EvidenceKind::Variant,
                 EvidenceKind::ModernMapping}) {
    if (to_string(k) == text) return k;
  }
  return std::nullopt;
}

std::optional<EvidenceSource> parse_evidence_source(std::string_view text) {
  for (auto s : {EvidenceSource::Tool, EvidenceSource::Internal, EvidenceSource::Cache}) {
    if (to_string(s) == text) return s;
  }
  return std::nullopt;
}

int source_priority(EvidenceSource s) {
  switch (s) {
    case EvidenceSource::Tool: return 0;
    case EvidenceSource::Cache: return 1;
    case EvidenceSource::Internal: return 2;
  }
  return 3;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string cache_key(const ToolCall& call) { return std::string(to_string(call.tool)) + ":" + call.argument; }

std::vector<EvidenceItem> run_tool(const GraphTools& tools, const ToolCall& call) {
  std::vector<EvidenceItem> out;
  try {
    if (call.tool == ToolKind::ComponentExplanation) {
      const auto e = tools.component_explanation(call.argument);
      EvidenceItem item;
      item.kind = EvidenceKind::ComponentExplanation;
      item.subject = call.argument;
      item.content = e.explanation;
      item.empty_explanation = e.explanation.empty();
      out.push_back(std::move(item));
    } else {
      for (const auto& c : tools.characters_by_component(call.argument)) {
        EvidenceItem item;
        item.kind = EvidenceKind::ContainingCharacter;
        item.subject = c.character_id;
        item.content = c.interpretation;
        item.empty_explanation = c.interpretation.empty();
        item.components = c.co_components;
        item.components.push_back(call.argument);
        std::sort(item.components.begin(), item.components.end());
        out.push_back(std::move(item));
      }
    }
  } catch (const Error& e) {
    // Undeciphered or unseen components are expected; skip them.
    if (e.code() != ErrorCode::NotFound) throw;
  }
  return out;
}

std::vector<EvidenceItem> internal_lookups(const GraphTools& tools, const std::vector<EvidenceItem>& stage1) {
  std::set<std::string> candidates;
  for (const auto& item : stage1) {
    if (item.kind == EvidenceKind::ContainingCharacter) candidates.insert(item.subject);
  }
  std::vector<EvidenceItem> out;
  for (const auto& cid : candidates) {
    try {
      const auto variants = tools.variant_lookup(cid);
      if (!variants.empty()) {
        out.push_back({EvidenceKind::Variant, cid, join(variants, ", "), EvidenceSource::Internal, 0, {}, false});
      }
      if (const auto modern = tools.modern_mapping(cid)) {
        out.push_back({EvidenceKind::ModernMapping, cid, *modern, EvidenceSource::Internal, 0, {}, false});
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NotFound) throw;
    }
  }
  return out;
}

std::vector<EvidenceItem> dedup(const std::vector<EvidenceItem>& a, const std::vector<EvidenceItem>& b) {
  std::map<std::pair<EvidenceKind, std::string>, EvidenceItem> best;
  auto preference = [](const EvidenceItem& x) {
    return std::tie(x.content, x.components, x.empty_explanation);
  };
  for (const auto* list : {&a, &b}) {
    for (const auto& item : *list) {
      auto [it, inserted] = best.try_emplace({item.kind, item.subject}, item);
      if (inserted) continue;
      const auto& cur = it->second;
      const int pi = source_priority(item.source), pc = source_priority(cur.source);
      if (pi < pc || (pi == pc && preference(item) < preference(cur))) it->second = item;
    }
  }
  std::vector<EvidenceItem> out;
  for (auto& [key, item] : best) out.push_back(std::move(item));
  return out;
}

}  // namespace

std::vector<EvidenceItem> synthesize_bundle(const std::vector<EvidenceItem>& stage1,
                                            const std::vector<EvidenceItem>& stage2,
                                            const RankedPrediction& predicted, const RetrievalConfig& config) {
  auto items = dedup(stage1, stage2);

  std::map<std::string, std::size_t, std::less<>> position;
  for (std::size_t i = 0; i < predicted.entries.size(); ++i) position.try_emplace(predicted.entries[i].label, i);
  std::set<std::string, std::less<>> top;
  for (std::size_t i = 0; i < predicted.entries.size() && i < config.top_m; ++i) top.insert(predicted.entries[i].label);

  auto overlap = [&](const EvidenceItem& item) {
    return static_cast<std::size_t>(
        std::count_if(item.components.begin(), item.components.end(), [&](const auto& l) { return top.contains(l); }));
  };
  auto key = [&](const EvidenceItem& item) {
    std::size_t secondary = 0;
    if (item.kind == EvidenceKind::ComponentExplanation) {
      auto it = position.find(item.subject);
      secondary = it == position.end() ? std::numeric_limits<std::size_t>::max() : it->second;
    } else if (item.kind == EvidenceKind::ContainingCharacter) {
      secondary = std::numeric_limits<std::size_t>::max() - overlap(item);
    }
    return std::make_tuple(static_cast<int>(item.kind), secondary, item.subject);
  };
  std::sort(items.begin(), items.end(), [&](const auto& a, const auto& b) { return key(a) < key(b); });

  if (items.size() > config.max_items) items.resize(config.max_items);
  for (std::size_t i = 0; i < items.size(); ++i) items[i].rank = i;
  return items;
}

// --- config ---

RetrievalConfig RetrievalConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw Error(ErrorCode::ConfigError, "retrieval config must be a JSON object");
  RetrievalConfig c;
  try {
    for (const auto& [k, v] : doc.items()) {
      if (k == "top_m") c.top_m = v.get<std::size_t>();
      else if (k == "min_evidence") c.min_evidence = v.get<std::size_t>();
      else if (k == "max_items") c.max_items = v.get<std::size_t>();
      else if (k == "cache_threshold") c.cache_threshold = v.get<double>();
      else if (k == "cache_capacity") c.cache_capacity = v.get<std::size_t>();
      else throw Error(ErrorCode::ConfigError, "unknown retrieval config key " + k);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("retrieval config: ") + e.what());
  }
  c.validate();
  return c;
}

json RetrievalConfig::to_json() const {
  return {{"top_m", top_m},
          {"min_evidence", min_evidence},
          {"max_items", max_items},
          {"cache_threshold", cache_threshold},
          {"cache_capacity", cache_capacity}};
}

void RetrievalConfig::validate() const {
  if (top_m == 0) throw Error(ErrorCode::ConfigError, "top_m must be positive");
  if (max_items == 0) throw Error(ErrorCode::ConfigError, "max_items must be positive");
  if (!(cache_threshold > 0.0 && cache_threshold <= 1.0)) {
    throw Error(ErrorCode::ConfigError, "cache_threshold must lie in (0, 1]");
  }
}

// --- cache ---

SemanticCache::SemanticCache(std::size_t capacity, double threshold, std::shared_ptr<const EmbeddingProvider> provider)
    : capacity_(capacity), threshold_(threshold), provider_(std::move(provider)) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw Error(ErrorCode::ConfigError, "cache threshold must lie in (0, 1]");
  if (capacity_ > 0 && !provider_) throw Error(ErrorCode::ProviderUnavailable, "semantic cache needs an embedding provider");
}

std::optional<CacheHit> SemanticCache::lookup(std::string_view query) {
  if (capacity_ == 0) return std::nullopt;
  const auto key = provider_->embed_text(query);
  std::lock_guard lock(mu_);
  Entry* best = nullptr;
  double best_sim = -2.0;
  for (auto& e : entries_) {
    const double sim = cosine_similarity(key, e.key);
    if (sim > best_sim) {
      best_sim = sim;
      best = &e;
    }
  }
  if (!best || best_sim < threshold_) return std::nullopt;
  best->last_used = ++clock_;
  return CacheHit{best->result, best_sim, best->query};
}

void SemanticCache::insert(std::string_view query, std::vector<EvidenceItem> result) {
  if (capacity_ == 0) return;
  auto key = provider_->embed_text(query);
  std::lock_guard lock(mu_);
  for (auto& e : entries_) {
    if (e.query == query) {
      e.result = std::move(result);
      e.last_used = ++clock_;
      return;
    }
  }
  if (entries_.size() >= capacity_) {
    auto lru = std::min_element(entries_.begin(), entries_.end(),
                                [](const Entry& a, const Entry& b) { return a.last_used < b.last_used; });
    entries_.erase(lru);
  }
  entries_.push_back({std::move(key), std::string(query), std::move(result), ++clock_});
}

std::size_t SemanticCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::vector<std::string> SemanticCache::keys_by_recency() const {
  std::lock_guard lock(mu_);
  auto sorted = entries_;
  std::sort(sorted.begin(), sorted.end(), [](const Entry& a, const Entry& b) { return a.last_used < b.last_used; });
  std::vector<std::string> out;
  for (const auto& e : sorted) out.push_back(e.query);
  return out;
}

// --- tools ---

const KnowledgeGraph& KnowledgeGraphTools::graph() const {
  if (!graph_) throw Error(ErrorCode::GraphUnavailable, "no knowledge graph loaded");
  return *graph_;
}

ComponentExplanation KnowledgeGraphTools::component_explanation(std::string_view label) const {
  return graph().component_explanation(label);
}

std::vector<ContainingCharacter> KnowledgeGraphTools::characters_by_component(std::string_view label) const {
  return graph().characters_by_component(label);
}

std::vector<std::string> KnowledgeGraphTools::variant_lookup(std::string_view character_id) const {
  return graph().variant_lookup(character_id);
}

std::optional<std::string> KnowledgeGraphTools::modern_mapping(std::string_view character_id) const {
  return graph().modern_mapping(character_id);
}

// --- cascade ---

std::vector<ToolCall> default_plan(const RankedPrediction& predicted, const RetrievalConfig& config) {
  std::vector<ToolCall> plan;
  for (std::size_t i = 0; i < predicted.entries.size() && i < config.top_m; ++i) {
    plan.push_back({ToolKind::ComponentExplanation, predicted.entries[i].label, 0});
    plan.push_back({ToolKind::CharactersByComponent, predicted.entries[i].label, 0});
  }
  return plan;
}

EvidenceBundle retrieve_with_plan(const GraphTools& tools, const RankedPrediction& predicted,
                                  const std::vector<ToolCall>& plan, SemanticCache* cache,
                                  const RetrievalConfig& config, std::string character_ref) {
  config.validate();
  if (predicted.empty()) throw Error(ErrorCode::EmptyInput, "retrieval needs at least one predicted component");

  EvidenceBundle bundle;
  bundle.character_ref = std::move(character_ref);
  bundle.predicted_components = predicted.entries;
  bundle.min_evidence = config.min_evidence;

  std::vector<EvidenceItem> stage1;
  std::uint64_t tick = 0;
  for (const auto& planned : plan) {
    const auto key = cache_key(planned);
    if (cache) {
      if (auto hit = cache->lookup(key)) {
        ++bundle.cache_hits;
        for (auto& item : hit->result) {
          item.source = EvidenceSource::Cache;
          stage1.push_back(std::move(item));
        }
        continue;
      }
    }
    ToolCall call = planned;
    call.issued_at = tick++;
    bundle.trace.push_back(call);
    auto items = run_tool(tools, call);
    if (cache) cache->insert(key, items);
    stage1.insert(stage1.end(), items.begin(), items.end());
  }

  std::vector<EvidenceItem> stage2;
  if (dedup(stage1, {}).size() < config.min_evidence) stage2 = internal_lookups(tools, stage1);

  bundle.items = synthesize_bundle(stage1, stage2, predicted, config);
  bundle.sufficient = bundle.items.size() >= config.min_evidence;
  return bundle;
}

EvidenceBundle retrieve_evidence(const GraphTools& tools, const RankedPrediction& predicted, SemanticCache* cache,
                                 const RetrievalConfig& config, std::string character_ref) {
  return retrieve_with_plan(tools, predicted, default_plan(predicted, config), cache, config,
                            std::move(character_ref));
}

EvidenceBundle retrieve_evidence(const KnowledgeGraph* graph, const RankedPrediction& predicted, SemanticCache* cache,
                                 const RetrievalConfig& config, std::string character_ref) {
  if (!graph) throw Error(ErrorCode::GraphUnavailable, "no knowledge graph loaded");
  return retrieve_evidence(KnowledgeGraphTools(graph), predicted, cache, config, std::move(character_ref));
}

// --- serialization ---

json to_json(const EvidenceBundle& bundle) {
  json predicted = json::array();
  for (const auto& e : bundle.predicted_components) predicted.push_back({{"label", e.label}, {"distance", e.distance}});
  json items = json::array();
  for (const auto& i : bundle.items) {
    items.push_back({{"rank", i.rank},
                     {"kind", to_string(i.kind)},
                     {"subject", i.subject},
                     {"content", i.content},
                     {"source", to_string(i.source)},
                     {"components", i.components},
                     {"empty_explanation", i.empty_explanation}});
  }
  json trace = json::array();
  for (const auto& t : bundle.trace) {
    trace.push_back({{"tool", to_string(t.tool)}, {"argument", t.argument}, {"issued_at", t.issued_at}});
  }
  return {{"character_ref", bundle.character_ref},
          {"predicted_components", predicted},
          {"items", items},
          {"trace", trace},
          {"sufficient", bundle.sufficient},
          {"min_evidence", bundle.min_evidence},
          {"cache_hits", bundle.cache_hits}};
}

EvidenceBundle bundle_from_json(const json& doc) {
  try {
    EvidenceBundle b;
    b.character_ref = doc.at("character_ref").get<std::string>();
    for (const auto& p : doc.at("predicted_components")) {
      b.predicted_components.push_back({p.at("label").get<std::string>(), p.at("distance").get<double>()});
    }
    for (const auto& j : doc.at("items")) {
      EvidenceItem i;
      auto kind = parse_evidence_kind(j.at("kind").get<std::string>());
      auto source = parse_evidence_source(j.at("source").get<std::string>());
      if (!kind || !source) throw Error(ErrorCode::MalformedInput, "unknown evidence kind or source");
      i.kind = *kind;
      i.source = *source;
      i.rank = j.at("rank").get<std::size_t>();
      i.subject = j.at("subject").get<std::string>();
      i.content = j.at("content").get<std::string>();
      i.components = j.value("components", std::vector<std::string>{});
      i.empty_explanation = j.value("empty_explanation", false);
      b.items.push_back(std::move(i));
    }
    for (const auto& j : doc.at("trace")) {
      auto tool = parse_tool_kind(j.at("tool").get<std::string>());
      if (!tool) throw Error(ErrorCode::MalformedInput, "unknown tool in trace");
      b.trace.push_back({*tool, j.at("argument").get<std::string>(), j.at("issued_at").get<std::uint64_t>()});
    }
    b.sufficient = doc.at("sufficient").get<bool>();
    b.min_evidence = doc.value("min_evidence", std::size_t{0});
    b.cache_hits = doc.value("cache_hits", std::size_t{0});
    return b;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedInput, std::string("evidence bundle: ") + e.what());
  }
}

std::string serialize_bundle(const EvidenceBundle& bundle) { return to_json(bundle).dump(); }

std::string render_evidence(const EvidenceBundle& bundle) {
  std::string out;
  for (const auto& i : bundle.items) {
    out += std::to_string(i.rank + 1) + ". ";
    switch (i.kind) {
      case EvidenceKind::ComponentExplanation:
        out += "Component " + i.subject + ": " + (i.empty_explanation ? "(no recorded explanation)" : i.content);
        break;
      case EvidenceKind::ContainingCharacter:
        out += "Character " + i.subject + " (components: " + join(i.components, ", ") +
               "): " + (i.empty_explanation ? "(no recorded interpretation)" : i.content);
        break;
      case EvidenceKind::Variant:
        out += "Variants of " + i.subject + ": " + i.content;
        break;
      case EvidenceKind::ModernMapping:
        out += "Modern form of " + i.subject + ": " + i.content;
        break;
    }
    out += '\n';
  }
  return out;
}

}  // namespace obs
