#include "obs/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "obs/error.hpp"
#include "obs/util.hpp"

namespace obs {

using nlohmann::json;

// --- tokenization ---

namespace {

/// Decodes one UTF-8 code point at `i`, advancing it. Invalid bytes decode
/// as themselves so tokenization never fails.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  int len = b0 < 0x80 ? 1 : (b0 >> 5) == 0x6 ? 2 : (b0 >> 4) == 0xE ? 3 : (b0 >> 3) == 0x1E ? 4 : 1;
  if (i + len > s.size()) len = 1;
  char32_t cp = len == 1 ? b0 : len == 2 ? (b0 & 0x1F) : len == 3 ? (b0 & 0x0F) : (b0 & 0x07);
  for (int k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) {
      len = 1;
      cp = b0;
      break;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  i += len;
  return cp;
}

bool is_unicode_space(char32_t c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v' || c == 0x3000 || c == 0xA0;
}

bool is_unicode_punct(char32_t c) {
  if (c < 0x80) return std::ispunct(static_cast<int>(c)) != 0;
  return (c >= 0x2000 && c <= 0x206F) || (c >= 0x3000 && c <= 0x303F) || (c >= 0xFF01 && c <= 0xFF0F) ||
         (c >= 0xFF1A && c <= 0xFF20) || (c >= 0xFF3B && c <= 0xFF40) || (c >= 0xFF5B && c <= 0xFF65) ||
         c == 0x00B7 || c == 0x2E3A;
}

}  // namespace

TokenSequence tokenize(std::string_view text, Language lang) {
  TokenSequence out;
  if (lang == Language::Zh) {
    std::size_t i = 0;
    while (i < text.size()) {
      const auto start = i;
      const auto cp = next_code_point(text, i);
      if (is_unicode_space(cp) || is_unicode_punct(cp)) continue;
      std::string tok(text.substr(start, i - start));
      if (tok.size() == 1) tok[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(tok[0])));
      out.push_back(std::move(tok));
    }
    return out;
  }
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (!std::ispunct(c)) {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  flush();
  return out;
}

// --- text metrics ---

double rouge1_f1(const TokenSequence& candidate, const TokenSequence& reference) {
  if (reference.empty()) throw Error(ErrorCode::EmptyReference, "ROUGE-1 needs a non-empty reference");
  if (candidate.empty()) return 0.0;
  std::map<std::string_view, std::size_t> ref_counts, cand_counts;
  for (const auto& t : reference) ++ref_counts[t];
  for (const auto& t : candidate) ++cand_counts[t];
  std::size_t overlap = 0;
  for (const auto& [tok, n] : cand_counts) {
    auto it = ref_counts.find(tok);
    if (it != ref_counts.end()) overlap += std::min(n, it->second);
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(candidate.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

namespace {

std::map<std::string, Embedding, std::less<>> embed_tokens(const TokenSequence& a, const TokenSequence& b,
                                                           const EmbeddingProvider& provider) {
  std::map<std::string, Embedding, std::less<>> out;
  for (const auto* seq : {&a, &b}) {
    for (const auto& t : *seq) {
      if (!out.contains(t)) out.emplace(t, l2_normalized(provider.embed_text(t)));
    }
  }
  return out;
}

}  // namespace

double embedding_f1(const TokenSequence& candidate, const TokenSequence& reference, const EmbeddingProvider& provider) {
  if (candidate.empty() || reference.empty()) throw Error(ErrorCode::EmptyInput, "embedding F1 needs two non-empty sequences");
  const auto emb = embed_tokens(candidate, reference, provider);
  std::vector<std::vector<double>> sim(candidate.size(), std::vector<double>(reference.size()));
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    for (std::size_t j = 0; j < reference.size(); ++j) {
      sim[i][j] = cosine_similarity(emb.at(candidate[i]), emb.at(reference[j]));
    }
  }
  double p = 0, r = 0;
  for (std::size_t i = 0; i < candidate.size(); ++i) p += *std::max_element(sim[i].begin(), sim[i].end());
  for (std::size_t j = 0; j < reference.size(); ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidate.size(); ++i) best = std::max(best, sim[i][j]);
    r += best;
  }
  p /= static_cast<double>(candidate.size());
  r /= static_cast<double>(reference.size());
  // The harmonic mean is only meaningful for positive P and R.
  if (p > 0 && r > 0) return 2.0 * p * r / (p + r);
  return std::min(p, r);
}

double transport_cost(const std::vector<double>& supply, const std::vector<double>& demand,
                      const std::vector<std::vector<double>>& cost) {
  const std::size_t L = supply.size(), R = demand.size();
  if (L == 0 || R == 0) throw Error(ErrorCode::EmptyInput, "transport needs non-empty marginals");
  if (cost.size() != L) throw Error(ErrorCode::DimensionMismatch, "cost matrix rows != supply size");
  for (const auto& row : cost) {
    if (row.size() != R) throw Error(ErrorCode::DimensionMismatch, "cost matrix columns != demand size");
  }
  const double total = std::accumulate(supply.begin(), supply.end(), 0.0);
  const double total_d = std::accumulate(demand.begin(), demand.end(), 0.0);
  if (!(total > 0) || std::abs(total - total_d) > 1e-9 * total) {
    throw Error(ErrorCode::MalformedInput, "transport marginals must have equal positive mass");
  }

  // Successive shortest paths on the residual graph s -> supply -> demand -> t.
  struct Arc {
    std::size_t to;
    double cap;
    double cost;
    std::size_t rev;
  };
  const std::size_t n = L + R + 2, s = L + R, t = L + R + 1;
  std::vector<std::vector<Arc>> g(n);
  auto add = [&](std::size_t u, std::size_t v, double cap, double c) {
    g[u].push_back({v, cap, c, g[v].size()});
    g[v].push_back({u, 0.0, -c, g[u].size() - 1});
  };
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < L; ++i) add(s, i, supply[i] / total, 0.0);
  for (std::size_t j = 0; j < R; ++j) add(L + j, t, demand[j] / total_d, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < R; ++j) add(i, L + j, inf, cost[i][j]);
  }

  const double eps = 1e-15;
  double flow = 0.0, result = 0.0;
  std::vector<double> dist(n);
  std::vector<std::pair<std::size_t, std::size_t>> parent(n);
  while (flow < 1.0 - 1e-12) {
    std::fill(dist.begin(), dist.end(), inf);
    dist[s] = 0.0;
    for (std::size_t round = 0; round + 1 < n; ++round) {
      bool changed = false;
      for (std::size_t u = 0; u < n; ++u) {
        if (dist[u] == inf) continue;
        for (std::size_t k = 0; k < g[u].size(); ++k) {
          const auto& a = g[u][k];
          if (a.cap > eps && dist[u] + a.cost < dist[a.to] - 1e-15) {
            dist[a.to] = dist[u] + a.cost;
            parent[a.to] = {u, k};
            changed = true;
          }
        }
      }
      if (!changed) break;
    }
    if (dist[t] == inf) break;
    double push = inf;
    for (auto v = t; v != s; v = parent[v].first) push = std::min(push, g[parent[v].first][parent[v].second].cap);
    for (auto v = t; v != s; v = parent[v].first) {
      auto& a = g[parent[v].first][parent[v].second];
      a.cap -= push;
      g[a.to][a.rev].cap += push;
    }
    flow += push;
    result += push * dist[t];
  }
  return result * total;
}

double mover_score(const TokenSequence& candidate, const TokenSequence& reference, const EmbeddingProvider& provider,
                   const MoverOptions& options) {
  if (candidate.empty() || reference.empty()) throw Error(ErrorCode::EmptyInput, "mover score needs two non-empty sequences");
  auto masses = [&](const TokenSequence& seq) {
    std::map<std::string, double, std::less<>> m;
    for (const auto& tok : seq) {
      double w = 1.0;
      if (options.idf) {
        auto it = options.idf->find(tok);
        if (it != options.idf->end()) w = it->second;
      }
      m[tok] += w;
    }
    return m;
  };
  const auto a = masses(candidate), b = masses(reference);
  if (a.size() > options.max_types || b.size() > options.max_types) {
    throw Error(ErrorCode::ProblemTooLarge, "mover score supports at most " + std::to_string(options.max_types) +
                                                " distinct tokens per side");
  }
  const auto emb = embed_tokens(candidate, reference, provider);
  std::vector<double> supply, demand;
  std::vector<std::vector<double>> cost;
  for (const auto& [ta, wa] : a) {
    supply.push_back(wa);
    auto& row = cost.emplace_back();
    for (const auto& [tb, wb] : b) row.push_back(ta == tb ? 0.0 : euclidean_distance(emb.at(ta), emb.at(tb)));
  }
  for (const auto& [tb, wb] : b) demand.push_back(wb);
  const double sa = std::accumulate(supply.begin(), supply.end(), 0.0);
  const double sb = std::accumulate(demand.begin(), demand.end(), 0.0);
  if (!(sa > 0) || !(sb > 0)) throw Error(ErrorCode::MalformedInput, "token weights must be positive");
  for (auto& x : supply) x /= sa;
  for (auto& x : demand) x /= sb;
  return 1.0 - transport_cost(supply, demand, cost);
}

// --- classification metrics ---

double topk_accuracy(const std::vector<RankedPrediction>& predictions, const std::vector<std::string>& gold,
                     std::size_t k) {
  if (predictions.size() != gold.size()) throw Error(ErrorCode::LengthMismatch, "predictions and gold differ in length");
  if (gold.empty()) throw Error(ErrorCode::EmptyInput, "no predictions to score");
  if (k == 0) throw Error(ErrorCode::MalformedInput, "k must be positive");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predictions[i].contains_within(gold[i], k);
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

double classification_accuracy(const std::vector<InscriptionType>& predicted, const std::vector<InscriptionType>& gold) {
  if (predicted.size() != gold.size()) throw Error(ErrorCode::LengthMismatch, "predictions and gold differ in length");
  if (gold.empty()) throw Error(ErrorCode::EmptyInput, "no predictions to score");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predicted[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

double llm_judge(ChatBackend& backend, std::string_view candidate, std::string_view reference,
                 const std::string& model) {
  return judge_score(backend, reference, candidate, model).score;
}

// --- agreement ---

namespace {

bool is_missing_cell(std::string_view cell) {
  return cell.empty() || cell == "NA" || cell == "na" || cell == "N/A" || cell == ".";
}

std::optional<double> parse_number(std::string_view cell) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) return std::nullopt;
  return v;
}

std::vector<std::string> split_csv_row(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto cell = trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (cell.size() >= 2 && cell.front() == '"' && cell.back() == '"') cell = cell.substr(1, cell.size() - 2);
    cells.push_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

}  // namespace

RatingMatrix parse_ratings_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& line : split_lines(text)) {
    if (trim(line).empty()) continue;
    rows.push_back(split_csv_row(line));
  }
  if (rows.empty()) throw Error(ErrorCode::EmptyInput, "ratings file has no rows");

  std::size_t first_row = 0;
  auto first_cell = std::find_if(rows[0].begin(), rows[0].end(), [](const auto& c) { return !c.empty(); });
  if (first_cell != rows[0].end() && !is_missing_cell(*first_cell) && !parse_number(*first_cell)) first_row = 1;

  // A leading id column holds non-numeric labels in the data rows.
  bool id_column = false;
  for (std::size_t r = first_row; r < rows.size(); ++r) {
    if (!is_missing_cell(rows[r][0]) && !parse_number(rows[r][0])) id_column = true;
  }

  RatingMatrix m;
  std::size_t width = 0;
  for (std::size_t r = first_row; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::size_t skip = id_column ? 1 : 0;
    if (row.size() <= skip) throw Error(ErrorCode::MalformedInput, "ratings row without values", r + 1);
    if (width == 0) width = row.size();
    if (row.size() != width) throw Error(ErrorCode::MalformedInput, "ratings rows differ in width", r + 1);
    auto& out = m.values.emplace_back();
    for (std::size_t c = skip; c < row.size(); ++c) {
      if (is_missing_cell(row[c])) {
        out.push_back(std::nullopt);
        continue;
      }
      const auto v = parse_number(row[c]);
      if (!v || *v != std::floor(*v) || *v < 1 || *v > 5) {
        throw Error(ErrorCode::SchemaViolation, "rating '" + row[c] + "' is not an integer in 1..5", r + 1);
      }
      out.push_back(*v);
    }
  }
  if (m.values.empty()) throw Error(ErrorCode::EmptyInput, "ratings file has no data rows");
  return m;
}

namespace {

void check_shape(const RatingMatrix& m) {
  if (m.raters() < 2) throw Error(ErrorCode::MalformedInput, "agreement needs at least two raters");
  for (std::size_t i = 0; i < m.items(); ++i) {
    if (m.values[i].size() != m.raters()) throw Error(ErrorCode::MalformedInput, "ragged rating matrix", i);
    for (const auto& v : m.values[i]) {
      if (v && !std::isfinite(*v)) throw Error(ErrorCode::MalformedInput, "non-finite rating", i);
    }
  }
}

}  // namespace

AgreementResult icc3(const RatingMatrix& ratings) {
  check_shape(ratings);
  const std::size_t n = ratings.items(), k = ratings.raters();
  if (n < 2) throw Error(ErrorCode::MalformedInput, "ICC3 needs at least two items");
  Eigen::MatrixXd x(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (!ratings.values[i][j]) throw Error(ErrorCode::IncompleteMatrix, "ICC3 needs a complete matrix", i);
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = *ratings.values[i][j];
    }
  }
  const double grand = x.mean();
  const double ss_total = (x.array() - grand).square().sum();
  const double ss_rows = static_cast<double>(k) * (x.rowwise().mean().array() - grand).square().sum();
  const double ss_cols = static_cast<double>(n) * (x.colwise().mean().array() - grand).square().sum();
  const double ss_err = ss_total - ss_rows - ss_cols;
  const double ms_rows = ss_rows / static_cast<double>(n - 1);
  const double ms_err = ss_err / static_cast<double>((n - 1) * (k - 1));
  const double denom = ms_rows + static_cast<double>(k - 1) * ms_err;
  if (!(std::abs(denom) > 1e-12 * std::max(1.0, ss_total))) return {0.0, true};
  return {(ms_rows - ms_err) / denom, false};
}

std::optional<AlphaLevel> parse_alpha_level(std::string_view text) {
  if (text == "ordinal") return AlphaLevel::Ordinal;
  if (text == "interval") return AlphaLevel::Interval;
  return std::nullopt;
}

AgreementResult krippendorff_alpha(const RatingMatrix& ratings, AlphaLevel level) {
  check_shape(ratings);
  std::vector<double> values;
  for (const auto& row : ratings.values) {
    for (const auto& v : row) {
      if (v) values.push_back(*v);
    }
  }
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  const auto V = values.size();
  auto index = [&](double v) {
    return static_cast<std::size_t>(std::lower_bound(values.begin(), values.end(), v) - values.begin());
  };

  // Coincidence matrix over pairable units.
  Eigen::MatrixXd o = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(V), static_cast<Eigen::Index>(V));
  for (const auto& row : ratings.values) {
    std::vector<std::size_t> present;
    for (const auto& v : row) {
      if (v) present.push_back(index(*v));
    }
    const auto m = present.size();
    if (m < 2) continue;
    for (std::size_t a = 0; a < m; ++a) {
      for (std::size_t b = 0; b < m; ++b) {
        if (a != b) o(static_cast<Eigen::Index>(present[a]), static_cast<Eigen::Index>(present[b])) += 1.0 / static_cast<double>(m - 1);
      }
    }
  }
  const Eigen::VectorXd nc = o.rowwise().sum();
  const double n = nc.sum();
  if (n == 0) throw Error(ErrorCode::NoPairableValues, "no item has two or more ratings");

  Eigen::MatrixXd delta(static_cast<Eigen::Index>(V), static_cast<Eigen::Index>(V));
  for (std::size_t c = 0; c < V; ++c) {
    for (std::size_t k = 0; k < V; ++k) {
      double d = 0;
      if (level == AlphaLevel::Interval) {
        d = values[c] - values[k];
      } else {
        const auto lo = std::min(c, k), hi = std::max(c, k);
        d = nc.segment(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo + 1)).sum() -
            (nc[static_cast<Eigen::Index>(c)] + nc[static_cast<Eigen::Index>(k)]) / 2.0;
      }
      delta(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) = d * d;
    }
  }
  const double d_obs = (o.array() * delta.array()).sum() / n;
  const double d_exp = (nc * nc.transpose()).cwiseProduct(delta).sum() / (n * (n - 1.0));
  if (!(d_exp > 0)) return {0.0, true};
  return {1.0 - d_obs / d_exp, false};
}

// --- run evaluation ---

const std::set<std::string>& known_metrics() {
  static const std::set<std::string> names{"rouge1", "embedding_f1", "mover", "judge"};
  return names;
}

namespace {

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

MetricReport evaluate_run(const std::vector<InterpretationResult>& results, const std::vector<CharacterRecord>& gold,
                          const EvaluationConfig& config) {
  if (results.empty()) throw Error(ErrorCode::AlignmentError, "no results to evaluate");
  for (const auto& m : config.metrics) {
    if (!known_metrics().contains(m)) throw Error(ErrorCode::ConfigError, "unknown metric " + m);
  }
  const bool needs_provider = config.metrics.contains("embedding_f1") || config.metrics.contains("mover");
  if (needs_provider && !config.provider) throw Error(ErrorCode::ConfigError, "embedding metrics need a provider");
  if (config.metrics.contains("judge") && !config.judge) throw Error(ErrorCode::ConfigError, "judge metric needs a backend");

  std::map<std::string, const CharacterRecord*, std::less<>> by_id;
  for (const auto& g : gold) by_id.emplace(g.character_id, &g);

  json per_item = json::array();
  std::map<std::string, std::pair<double, std::size_t>> sums;
  for (const auto& r : results) {
    auto it = by_id.find(r.character_ref);
    if (it == by_id.end()) throw Error(ErrorCode::AlignmentError, "no gold record for " + r.character_ref);
    const auto& ref_text = it->second->interpretation;
    const auto cand = tokenize(r.interpretation, config.lang);
    const auto ref = tokenize(ref_text, config.lang);
    if (ref.empty()) throw Error(ErrorCode::EmptyReference, "gold interpretation of " + r.character_ref + " is empty");

    json scores = json::object();
    auto record = [&](const std::string& name, double v) {
      scores[name] = v;
      auto& [sum, count] = sums[name];
      sum += v;
      ++count;
    };
    if (config.metrics.contains("rouge1")) record("rouge1", rouge1_f1(cand, ref));
    if (config.metrics.contains("embedding_f1")) {
      record("embedding_f1", cand.empty() ? 0.0 : embedding_f1(cand, ref, *config.provider));
    }
    if (config.metrics.contains("mover")) {
      record("mover", cand.empty() ? 0.0 : mover_score(cand, ref, *config.provider));
    }
    if (config.metrics.contains("judge")) {
      record("judge", llm_judge(*config.judge, r.interpretation, ref_text, config.judge_model));
    }
    if (r.inscription_type && it->second->inscription_type) {
      record("type_accuracy", *r.inscription_type == *it->second->inscription_type ? 1.0 : 0.0);
    }
    per_item.push_back({{"character_ref", r.character_ref}, {"scores", scores}});
  }

  json aggregate = json::object();
  for (const auto& [name, sc] : sums) aggregate[name] = sc.first / static_cast<double>(sc.second);

  json metadata = config.metadata;
  metadata["tokenizer"] = config.lang == Language::Zh ? "zh-char" : "en-lower-whitespace";
  metadata["language"] = to_string(config.lang);
  metadata["metrics"] = config.metrics;
  if (config.provider) metadata["embedding_provider"] = config.provider->name();
  if (config.judge) {
    metadata["judge_backend"] = config.judge->name();
    metadata["judge_model"] = config.judge_model;
    metadata["judge_template"] = "judge_system_v1+judge_user_v1";
  }
  metadata["labels"] = {{"embedding_f1", "embedding-F1 (BERTScore-style, static embeddings, no IDF)"},
                        {"mover", "1 - exact transport cost (MoverScore-style, uniform mass)"}};

  MetricReport report;
  report.doc = {{"schema_version", 1}, {"metadata", metadata}, {"per_item", per_item}, {"aggregate", aggregate}};

  std::vector<std::string> cols;
  for (const auto& [name, sc] : sums) cols.push_back(name);
  std::string table = "character";
  for (const auto& c : cols) table += "\t" + c;
  table += '\n';
  for (const auto& item : per_item) {
    table += item["character_ref"].get<std::string>();
    for (const auto& c : cols) table += "\t" + (item["scores"].contains(c) ? fmt4(item["scores"][c].get<double>()) : "-");
    table += '\n';
  }
  table += "mean";
  for (const auto& c : cols) table += "\t" + fmt4(aggregate[c].get<double>());
  table += '\n';
  report.table = std::move(table);
  return report;
}

}  // namespace obs
