#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "obs/dataset.hpp"

namespace obs {

enum class NodeKind { Component, Character, ModernCharacter };
enum class Relation { Contains, VariantOf, MapsTo };

std::string_view to_string(NodeKind kind);
std::string_view to_string(Relation relation);

struct Node {
  std::string node_id;
  NodeKind kind = NodeKind::Component;
  std::string label;
  /// Component meaning, or the character's interpretation. May be empty.
  std::string explanation;
  std::map<std::string, std::string> attributes;
  bool operator==(const Node&) const = default;
};

struct Edge {
  std::string from;
  std::string to;
  Relation relation = Relation::Contains;
  auto operator<=>(const Edge&) const = default;
};

struct ComponentExplanation {
  std::string node_id;
  std::string explanation;
};

struct ContainingCharacter {
  std::string character_id;
  std::string interpretation;
  std::vector<std::string> co_components;
  bool operator==(const ContainingCharacter&) const = default;
};

/// Immutable typed graph with an in-memory adjacency index. Construction
/// validates referential integrity, relation endpoint kinds, duplicate
/// triples and VARIANT_OF symmetry.
class KnowledgeGraph {
public:
  KnowledgeGraph() = default;
  KnowledgeGraph(std::vector<Node> nodes, std::vector<Edge> edges, std::string source_split);

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::string& source_split() const { return source_split_; }

  const Node* find_node(std::string_view node_id) const;
  /// The Character node for a corpus character id, or nullptr.
  const Node* find_character(std::string_view character_id) const;

  ComponentExplanation component_explanation(std::string_view label) const;
  std::vector<ContainingCharacter> characters_by_component(std::string_view label) const;
  std::vector<std::string> variant_lookup(std::string_view character_id) const;
  std::optional<std::string> modern_mapping(std::string_view character_id) const;

  bool operator==(const KnowledgeGraph& other) const;

private:
  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  std::string source_split_;

  std::map<std::string, std::size_t, std::less<>> node_index_;
  std::map<std::string, std::vector<std::string>, std::less<>> characters_by_label_;
  std::map<std::string, std::vector<std::string>, std::less<>> labels_by_character_;
  std::map<std::string, std::vector<std::string>, std::less<>> variants_;
  std::map<std::string, std::string, std::less<>> modern_;
};

std::string character_node_id(std::string_view character_id);
std::string component_node_id(std::string_view label);
std::string modern_node_id(std::string_view form);

/// One Character node per character, one Component node per vocabulary
/// label, one ModernCharacter node per distinct modern form.
KnowledgeGraph build_graph(const Corpus& train_corpus,
                           const std::map<std::string, std::string, std::less<>>& explanations,
                           std::string source_split = "");

/// Explanations file: a JSON object mapping component label to text.
std::map<std::string, std::string, std::less<>> parse_explanations(std::string_view text);

/// LDJSON: a meta record, nodes and edges in canonical order, then
/// {"t":"checksum","sha256":...} over every preceding byte.
std::string serialize_graph(const KnowledgeGraph& graph);
KnowledgeGraph parse_graph(std::string_view text);

void save_graph(const KnowledgeGraph& graph, const std::filesystem::path& path);
KnowledgeGraph load_graph(const std::filesystem::path& path);

}  // namespace obs
