#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "obs/chat.hpp"
#include "obs/classifier.hpp"
#include "obs/dataset.hpp"
#include "obs/embedding.hpp"
#include "obs/inference.hpp"

namespace obs {

using TokenSequence = std::vector<std::string>;

/// zh: one token per code point, whitespace and punctuation dropped.
/// en: lowercase, whitespace split, ASCII punctuation removed.
TokenSequence tokenize(std::string_view text, Language lang);

double rouge1_f1(const TokenSequence& candidate, const TokenSequence& reference);

/// Greedy max-cosine matching over per-token embeddings, no IDF.
double embedding_f1(const TokenSequence& candidate, const TokenSequence& reference, const EmbeddingProvider& provider);

struct MoverOptions {
  /// Token weights; tokens absent from the map weigh 1. Unset means uniform.
  std::optional<std::map<std::string, double, std::less<>>> idf;
  std::size_t max_types = 64;
};

/// Exact optimal-transport cost between two discrete distributions with
/// cost[i][j]. Masses must each sum to the same positive total.
double transport_cost(const std::vector<double>& supply, const std::vector<double>& demand,
                      const std::vector<std::vector<double>>& cost);

/// 1 - exact transport cost between unigram distributions, Euclidean
/// distance on L2-normalized token embeddings.
double mover_score(const TokenSequence& candidate, const TokenSequence& reference, const EmbeddingProvider& provider,
                   const MoverOptions& options = {});

double topk_accuracy(const std::vector<RankedPrediction>& predictions, const std::vector<std::string>& gold,
                     std::size_t k);
double classification_accuracy(const std::vector<InscriptionType>& predicted, const std::vector<InscriptionType>& gold);

/// Judge score in [0, 1], two decimals.
double llm_judge(ChatBackend& backend, std::string_view candidate, std::string_view reference,
                 const std::string& model);

/// items x raters; nullopt marks a missing rating.
struct RatingMatrix {
  std::vector<std::vector<std::optional<double>>> values;

  std::size_t items() const { return values.size(); }
  std::size_t raters() const { return values.empty() ? 0 : values.front().size(); }
};

/// CSV with one row per item and one column per rater. A header row is
/// detected when its first non-empty cell is not numeric. Empty cells and
/// NA mean missing. Values must be integers 1..5.
RatingMatrix parse_ratings_csv(std::string_view text);

struct AgreementResult {
  double value = 0.0;
  /// No variance to explain; value is 0 by convention.
  bool degenerate = false;
};

/// ICC(3,1): two-way mixed, consistency, single measure.
AgreementResult icc3(const RatingMatrix& ratings);

enum class AlphaLevel { Ordinal, Interval };
std::optional<AlphaLevel> parse_alpha_level(std::string_view text);

AgreementResult krippendorff_alpha(const RatingMatrix& ratings, AlphaLevel level);

struct EvaluationConfig {
  std::set<std::string> metrics{"rouge1", "embedding_f1", "mover"};
  Language lang = Language::En;
  const EmbeddingProvider* provider = nullptr;
  ChatBackend* judge = nullptr;
  std::string judge_model = "judge";
  nlohmann::json metadata = nlohmann::json::object();
};

/// Recognised metric names.
const std::set<std::string>& known_metrics();

struct MetricReport {
  nlohmann::json doc;
  std::string table;
};

/// Scores each result against the gold interpretation of the character
/// with the same id. Type accuracy is added whenever both sides carry an
/// inscription type.
MetricReport evaluate_run(const std::vector<InterpretationResult>& results, const std::vector<CharacterRecord>& gold,
                          const EvaluationConfig& config);

}  // namespace obs
