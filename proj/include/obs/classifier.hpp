#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "obs/embedding.hpp"

namespace obs {

struct LabeledEmbedding {
  std::string label;
  Embedding vector;
};

/// Mean embedding of one class's support set.
struct Prototype {
  std::string label;
  Embedding mean;
  std::size_t support_count = 0;
};

/// Immutable set of prototypes sharing one dimension, ordered by label.
class ClassifierModel {
public:
  ClassifierModel(std::vector<Prototype> prototypes, std::string provider_name, bool normalized);

  int dim() const { return dim_; }
  std::size_t size() const { return prototypes_.size(); }
  bool empty() const { return prototypes_.empty(); }
  const std::vector<Prototype>& prototypes() const { return prototypes_; }
  const Prototype& prototype(std::string_view label) const;
  const std::string& provider_name() const { return provider_name_; }
  /// Whether embeddings are L2-normalized before averaging and querying.
  bool normalized() const { return normalized_; }

private:
  std::vector<Prototype> prototypes_;
  std::string provider_name_;
  bool normalized_;
  int dim_ = 0;
};

ClassifierModel build_prototypes(std::span<const LabeledEmbedding> train, std::string provider_name,
                                 bool normalize = false);

struct RankedEntry {
  std::string label;
  double distance = 0.0;
  bool operator==(const RankedEntry&) const = default;
};

/// Ascending by distance; equal distances ordered by label.
struct RankedPrediction {
  std::vector<RankedEntry> entries;

  bool empty() const { return entries.empty(); }
  const std::string& top() const { return entries.front().label; }
  bool contains_within(std::string_view label, std::size_t k) const;
  bool operator==(const RankedPrediction&) const = default;
};

RankedPrediction classify_topk(const ClassifierModel& model, const Embedding& query, std::size_t k);

/// Fraction of test items whose label is among the top-k predictions, per k.
std::map<std::size_t, double> evaluate_topk(const ClassifierModel& model,
                                            std::span<const LabeledEmbedding> test,
                                            std::span<const std::size_t> ks);

struct IndexedEmbedding {
  std::string character_id;
  Embedding vector;
};

struct VariantHit {
  std::string character_id;
  double distance = 0.0;
  bool operator==(const VariantHit&) const = default;
};

/// Exact nearest neighbours over per-character embeddings (no prototypes).
std::vector<VariantHit> variant_search(std::span<const IndexedEmbedding> index, const Embedding& query,
                                       std::size_t k);

/// Binary little-endian model file: magic "OBSPROTO", version, dim,
/// normalized flag, provider name, class count, then per class the label,
/// support count and `dim` doubles.
std::string serialize_model(const ClassifierModel& model);
ClassifierModel parse_model(std::string_view bytes);

void save_model(const std::filesystem::path& path, const ClassifierModel& model);
/// Throws ProviderMismatch when `expected_provider` differs from the stored name.
ClassifierModel load_model(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_provider = std::nullopt);

}  // namespace obs
