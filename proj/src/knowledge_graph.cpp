#include "obs/knowledge_graph.hpp"

#include <algorithm>

#include <json.hpp>

#include "obs/error.hpp"
#include "obs/util.hpp"

namespace obs {

using nlohmann::json;

namespace {

constexpr int kGraphVersion = 1;

std::optional<NodeKind> parse_node_kind(std::string_view s) {
  if (s == "Component") return NodeKind::Component;
  if (s == "Character") return NodeKind::Character;
  if (s == "ModernCharacter") return NodeKind::ModernCharacter;
  return std::nullopt;
}

std::optional<Relation> parse_relation(std::string_view s) {
  if (s == "CONTAINS") return Relation::Contains;
  if (s == "VARIANT_OF") return Relation::VariantOf;
  if (s == "MAPS_TO") return Relation::MapsTo;
  return std::nullopt;
}

std::pair<NodeKind, NodeKind> endpoint_kinds(Relation r) {
  switch (r) {
    case Relation::Contains: return {NodeKind::Character, NodeKind::Component};
    case Relation::VariantOf: return {NodeKind::Character, NodeKind::Character};
    case Relation::MapsTo: return {NodeKind::Character, NodeKind::ModernCharacter};
  }
  return {NodeKind::Character, NodeKind::Character};
}

Error inconsistent(const std::string& what) { return Error(ErrorCode::InconsistentCorpus, what); }

}  // namespace

std::string_view to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::Component: return "Component";
    case NodeKind::Character: return "Character";
    case NodeKind::ModernCharacter: return "ModernCharacter";
  }
  return "";
}

std::string_view to_string(Relation relation) {
  switch (relation) {
    case Relation::Contains: return "CONTAINS";
    case Relation::VariantOf: return "VARIANT_OF";
    case Relation::MapsTo: return "MAPS_TO";
  }
  return "";
}

std::string character_node_id(std::string_view character_id) { return "char:" + std::string(character_id); }
std::string component_node_id(std::string_view label) { return "comp:" + std::string(label); }
std::string modern_node_id(std::string_view form) { return "modern:" + std::string(form); }

KnowledgeGraph::KnowledgeGraph(std::vector<Node> nodes, std::vector<Edge> edges, std::string source_split)
    : nodes_(std::move(nodes)), edges_(std::move(edges)), source_split_(std::move(source_split)) {
  std::sort(nodes_.begin(), nodes_.end(), [](const Node& a, const Node& b) { return a.node_id < b.node_id; });
  std::sort(edges_.begin(), edges_.end());

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (!node_index_.emplace(n.node_id, i).second) throw inconsistent("duplicate node id " + n.node_id);
    if (n.kind == NodeKind::Component && n.label.empty()) {
      throw inconsistent("component node " + n.node_id + " has no label");
    }
  }
  if (std::adjacent_find(edges_.begin(), edges_.end()) != edges_.end()) {
    throw inconsistent("duplicate edge triple");
  }

  for (const auto& e : edges_) {
    const auto* from = find_node(e.from);
    const auto* to = find_node(e.to);
    if (!from || !to) throw inconsistent("edge " + e.from + " -> " + e.to + " references a missing node");
    const auto [want_from, want_to] = endpoint_kinds(e.relation);
    if (from->kind != want_from || to->kind != want_to) {
      throw inconsistent(std::string(to_string(e.relation)) + " edge " + e.from + " -> " + e.to +
                         " has incompatible endpoint kinds");
    }
    switch (e.relation) {
      case Relation::Contains:
        characters_by_label_[to->label].push_back(from->label);
        labels_by_character_[from->label].push_back(to->label);
        break;
      case Relation::VariantOf:
        if (!std::binary_search(edges_.begin(), edges_.end(), Edge{e.to, e.from, Relation::VariantOf})) {
          throw inconsistent("VARIANT_OF edge " + e.from + " -> " + e.to + " lacks its reverse");
        }
        variants_[from->label].push_back(to->label);
        break;
      case Relation::MapsTo:
        if (!modern_.emplace(from->label, to->label).second) {
          throw inconsistent("character " + from->label + " maps to several modern forms");
        }
        break;
    }
  }
  for (auto* index : {&characters_by_label_, &labels_by_character_, &variants_}) {
    for (auto& [key, values] : *index) {
      std::sort(values.begin(), values.end());
      values.erase(std::unique(values.begin(), values.end()), values.end());
    }
  }
}

const Node* KnowledgeGraph::find_node(std::string_view node_id) const {
  auto it = node_index_.find(node_id);
  return it == node_index_.end() ? nullptr : &nodes_[it->second];
}

const Node* KnowledgeGraph::find_character(std::string_view character_id) const {
  return find_node(character_node_id(character_id));
}

ComponentExplanation KnowledgeGraph::component_explanation(std::string_view label) const {
  const auto* node = find_node(component_node_id(label));
  if (!node) throw Error(ErrorCode::NotFound, "component " + std::string(label));
  return {node->node_id, node->explanation};
}

std::vector<ContainingCharacter> KnowledgeGraph::characters_by_component(std::string_view label) const {
  if (!find_node(component_node_id(label))) throw Error(ErrorCode::NotFound, "component " + std::string(label));
  std::vector<ContainingCharacter> out;
  auto it = characters_by_label_.find(label);
  if (it == characters_by_label_.end()) return out;
  for (const auto& cid : it->second) {
    ContainingCharacter c;
    c.character_id = cid;
    c.interpretation = find_character(cid)->explanation;
    for (const auto& other : labels_by_character_.at(cid)) {
      if (other != label) c.co_components.push_back(other);
    }
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<std::string> KnowledgeGraph::variant_lookup(std::string_view character_id) const {
  if (!find_character(character_id)) throw Error(ErrorCode::NotFound, "character " + std::string(character_id));
  auto it = variants_.find(character_id);
  return it == variants_.end() ? std::vector<std::string>{} : it->second;
}

std::optional<std::string> KnowledgeGraph::modern_mapping(std::string_view character_id) const {
  if (!find_character(character_id)) throw Error(ErrorCode::NotFound, "character " + std::string(character_id));
  auto it = modern_.find(character_id);
  if (it == modern_.end()) return std::nullopt;
  return it->second;
}

bool KnowledgeGraph::operator==(const KnowledgeGraph& other) const {
  return nodes_ == other.nodes_ && edges_ == other.edges_ && source_split_ == other.source_split_;
}

KnowledgeGraph build_graph(const Corpus& train_corpus,
                           const std::map<std::string, std::string, std::less<>>& explanations,
                           std::string source_split) {
  std::vector<Node> nodes;
  std::vector<Edge> edges;

  std::map<std::string, std::string> record_explanations;
  for (const auto& comp : train_corpus.components) {
    if (!train_corpus.vocabulary.contains(comp.label)) {
      throw inconsistent("component " + comp.component_id + " has label outside the vocabulary: " + comp.label);
    }
    if (!comp.explanation.empty()) record_explanations.try_emplace(comp.label, comp.explanation);
  }
  for (const auto& label : train_corpus.vocabulary) {
    Node n;
    n.node_id = component_node_id(label);
    n.kind = NodeKind::Component;
    n.label = label;
    if (auto it = explanations.find(label); it != explanations.end()) {
      n.explanation = it->second;
    } else if (auto rec = record_explanations.find(label); rec != record_explanations.end()) {
      n.explanation = rec->second;
    }
    nodes.push_back(std::move(n));
  }

  std::map<std::string, std::vector<std::string>> groups;
  std::set<std::string> modern_forms;
  for (const auto& c : train_corpus.characters) {
    Node n;
    n.node_id = character_node_id(c.character_id);
    n.kind = NodeKind::Character;
    n.label = c.character_id;
    n.explanation = c.interpretation;
    n.attributes["identity"] = c.identity;
    if (!c.image_ref.empty()) n.attributes["image_ref"] = c.image_ref;
    if (c.inscription_type) n.attributes["inscription_type"] = std::string(to_string(*c.inscription_type));
    nodes.push_back(std::move(n));

    std::set<std::string> labels;
    for (const auto& label : c.component_labels) {
      if (!train_corpus.vocabulary.contains(label)) {
        throw inconsistent("character " + c.character_id + " contains unknown component " + label);
      }
      if (labels.insert(label).second) {
        edges.push_back({character_node_id(c.character_id), component_node_id(label), Relation::Contains});
      }
    }
    if (c.variant_group) groups[*c.variant_group].push_back(c.character_id);
    if (c.modern_form) {
      modern_forms.insert(*c.modern_form);
      edges.push_back({character_node_id(c.character_id), modern_node_id(*c.modern_form), Relation::MapsTo});
    }
  }
  for (const auto& form : modern_forms) {
    nodes.push_back({modern_node_id(form), NodeKind::ModernCharacter, form, "", {}});
  }
  for (const auto& [group, members] : groups) {
    for (const auto& a : members) {
      for (const auto& b : members) {
        if (a != b) edges.push_back({character_node_id(a), character_node_id(b), Relation::VariantOf});
      }
    }
  }
  return KnowledgeGraph(std::move(nodes), std::move(edges), std::move(source_split));
}

std::map<std::string, std::string, std::less<>> parse_explanations(std::string_view text) {
  try {
    const auto doc = json::parse(text);
    if (!doc.is_object()) throw Error(ErrorCode::SchemaViolation, "explanations must be a JSON object");
    std::map<std::string, std::string, std::less<>> out;
    for (const auto& [label, value] : doc.items()) out[label] = value.get<std::string>();
    return out;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedInput, std::string("explanations: ") + e.what());
  }
}

std::string serialize_graph(const KnowledgeGraph& graph) {
  std::string out;
  out += json{{"t", "meta"}, {"v", kGraphVersion}, {"source_split", graph.source_split()}}.dump();
  out += '\n';
  for (const auto& n : graph.nodes()) {
    out += json{{"t", "node"},
                {"id", n.node_id},
                {"kind", to_string(n.kind)},
                {"label", n.label},
                {"explanation", n.explanation},
                {"attributes", n.attributes}}
               .dump();
    out += '\n';
  }
  for (const auto& e : graph.edges()) {
    out += json{{"t", "edge"}, {"from", e.from}, {"to", e.to}, {"rel", to_string(e.relation)}}.dump();
    out += '\n';
  }
  out += json{{"t", "checksum"}, {"sha256", sha256_hex(out)}}.dump();
  out += '\n';
  return out;
}

KnowledgeGraph parse_graph(std::string_view text) {
  auto corrupt = [](const std::string& what) { return Error(ErrorCode::CorruptFile, what); };

  auto body_end = text.size();
  while (body_end > 0 && (text[body_end - 1] == '\n' || text[body_end - 1] == '\r')) --body_end;
  const auto last_nl = text.rfind('\n', body_end == 0 ? 0 : body_end - 1);
  const auto checksum_start = last_nl == std::string_view::npos ? 0 : last_nl + 1;
  const auto checksum_line = text.substr(checksum_start, body_end - checksum_start);
  const auto body = text.substr(0, checksum_start);

  try {
    const auto trailer = json::parse(checksum_line);
    if (trailer.value("t", "") != "checksum") throw corrupt("missing checksum record");
    if (trailer.at("sha256").get<std::string>() != sha256_hex(body)) throw corrupt("checksum mismatch");
  } catch (const json::exception&) {
    throw corrupt("missing or unreadable checksum record");
  }

  std::vector<Node> nodes;
  std::vector<Edge> edges;
  std::string source_split;
  bool saw_meta = false;
  const auto lines = split_lines(body);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      const auto rec = json::parse(lines[i]);
      const auto t = rec.at("t").get<std::string>();
      if (t == "meta") {
        if (rec.at("v").get<int>() != kGraphVersion) throw corrupt("unsupported graph version");
        source_split = rec.value("source_split", "");
        saw_meta = true;
      } else if (t == "node") {
        Node n;
        n.node_id = rec.at("id").get<std::string>();
        auto kind = parse_node_kind(rec.at("kind").get<std::string>());
        if (!kind) throw corrupt("unknown node kind on line " + std::to_string(i + 1));
        n.kind = *kind;
        n.label = rec.at("label").get<std::string>();
        n.explanation = rec.value("explanation", "");
        n.attributes = rec.value("attributes", std::map<std::string, std::string>{});
        nodes.push_back(std::move(n));
      } else if (t == "edge") {
        auto rel = parse_relation(rec.at("rel").get<std::string>());
        if (!rel) throw corrupt("unknown relation on line " + std::to_string(i + 1));
        edges.push_back({rec.at("from").get<std::string>(), rec.at("to").get<std::string>(), *rel});
      } else {
        throw corrupt("unknown record type " + t);
      }
    } catch (const json::exception& e) {
      throw corrupt("line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  if (!saw_meta) throw corrupt("missing meta record");
  try {
    return KnowledgeGraph(std::move(nodes), std::move(edges), std::move(source_split));
  } catch (const Error& e) {
    throw corrupt(e.what());
  }
}

void save_graph(const KnowledgeGraph& graph, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_graph(graph));
}

KnowledgeGraph load_graph(const std::filesystem::path& path) { return parse_graph(read_file_text(path)); }

}  // namespace obs
