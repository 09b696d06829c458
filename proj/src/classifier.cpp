#include "obs/classifier.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <numeric>

#include "obs/util.hpp"

namespace obs {

namespace {

constexpr std::string_view kMagic = "OBSPROTO";
constexpr std::uint32_t kModelVersion = 1;

class Writer {
public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

private:
  std::string out_;
};

class Reader {
public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u32();
    return std::string(take(n));
  }
  std::string_view take(std::size_t n) {
    if (n > in_.size() - pos_) throw Error(ErrorCode::CorruptFile, "model file truncated", pos_);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

ClassifierModel::ClassifierModel(std::vector<Prototype> prototypes, std::string provider_name, bool normalized)
    : prototypes_(std::move(prototypes)), provider_name_(std::move(provider_name)), normalized_(normalized) {
  std::sort(prototypes_.begin(), prototypes_.end(),
            [](const Prototype& a, const Prototype& b) { return a.label < b.label; });
  for (std::size_t i = 0; i < prototypes_.size(); ++i) {
    const auto& p = prototypes_[i];
    if (i > 0 && prototypes_[i - 1].label == p.label) {
      throw Error(ErrorCode::MalformedInput, "duplicate prototype label " + p.label);
    }
    if (p.support_count == 0) throw Error(ErrorCode::MalformedInput, "prototype " + p.label + " has no support");
    if (i == 0) dim_ = static_cast<int>(p.mean.size());
    if (p.mean.size() != dim_) {
      throw Error(ErrorCode::DimensionMismatch, "prototype " + p.label + " has dimension " +
                                                    std::to_string(p.mean.size()));
    }
  }
}

const Prototype& ClassifierModel::prototype(std::string_view label) const {
  auto it = std::lower_bound(prototypes_.begin(), prototypes_.end(), label,
                             [](const Prototype& p, std::string_view l) { return p.label < l; });
  if (it == prototypes_.end() || it->label != label) {
    throw Error(ErrorCode::NotFound, "no prototype for " + std::string(label));
  }
  return *it;
}

ClassifierModel build_prototypes(std::span<const LabeledEmbedding> train, std::string provider_name,
                                 bool normalize) {
  if (train.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no training embeddings");
  const auto dim = train.front().vector.size();

  std::map<std::string, std::pair<Embedding, std::size_t>> sums;
  for (const auto& item : train) {
    if (item.vector.size() != dim) {
      throw Error(ErrorCode::DimensionMismatch, "training embedding for " + item.label + " has dimension " +
                                                    std::to_string(item.vector.size()));
    }
    auto [it, inserted] = sums.try_emplace(item.label, Embedding::Zero(dim), 0);
    it->second.first += normalize ? l2_normalized(item.vector) : Embedding(item.vector);
    ++it->second.second;
  }

  std::vector<Prototype> prototypes;
  prototypes.reserve(sums.size());
  for (auto& [label, acc] : sums) {
    prototypes.push_back({label, acc.first / static_cast<double>(acc.second), acc.second});
  }
  return ClassifierModel(std::move(prototypes), std::move(provider_name), normalize);
}

bool RankedPrediction::contains_within(std::string_view label, std::size_t k) const {
  const auto n = std::min(k, entries.size());
  return std::any_of(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(n),
                     [&](const RankedEntry& e) { return e.label == label; });
}

RankedPrediction classify_topk(const ClassifierModel& model, const Embedding& query, std::size_t k) {
  if (model.empty()) throw Error(ErrorCode::EmptyModel, "model has no prototypes");
  if (k == 0) throw Error(ErrorCode::MalformedInput, "k must be positive");
  if (query.size() != model.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "query dimension " + std::to_string(query.size()) +
                                                  ", model dimension " + std::to_string(model.dim()));
  }
  const Embedding q = model.normalized() ? l2_normalized(query) : query;

  RankedPrediction out;
  out.entries.reserve(model.size());
  for (const auto& p : model.prototypes()) out.entries.push_back({p.label, euclidean_distance(q, p.mean)});
  // Prototypes are label-ordered, so a stable sort breaks ties lexicographically.
  std::stable_sort(out.entries.begin(), out.entries.end(),
                   [](const RankedEntry& a, const RankedEntry& b) { return a.distance < b.distance; });
  out.entries.resize(std::min(k, out.entries.size()));
  return out;
}

std::map<std::size_t, double> evaluate_topk(const ClassifierModel& model, std::span<const LabeledEmbedding> test,
                                            std::span<const std::size_t> ks) {
  if (test.empty()) throw Error(ErrorCode::EmptyTestSet, "no test embeddings");
  if (ks.empty()) throw Error(ErrorCode::MalformedInput, "no k values requested");
  const auto max_k = *std::max_element(ks.begin(), ks.end());

  std::map<std::size_t, std::size_t> hits;
  for (auto k : ks) hits[k] = 0;
  for (const auto& item : test) {
    const auto ranked = classify_topk(model, item.vector, max_k);
    for (auto& [k, count] : hits) count += ranked.contains_within(item.label, k) ? 1 : 0;
  }
  std::map<std::size_t, double> acc;
  for (const auto& [k, count] : hits) acc[k] = static_cast<double>(count) / static_cast<double>(test.size());
  return acc;
}

std::vector<VariantHit> variant_search(std::span<const IndexedEmbedding> index, const Embedding& query,
                                       std::size_t k) {
  if (index.empty()) throw Error(ErrorCode::EmptyIndex, "variant index is empty");
  std::vector<VariantHit> hits;
  hits.reserve(index.size());
  for (const auto& item : index) hits.push_back({item.character_id, euclidean_distance(query, item.vector)});
  std::sort(hits.begin(), hits.end(), [](const VariantHit& a, const VariantHit& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.character_id < b.character_id;
  });
  hits.resize(std::min(k, hits.size()));
  return hits;
}

std::string serialize_model(const ClassifierModel& model) {
  Writer w;
  w.raw(kMagic);
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(model.dim()));
  w.u8(model.normalized() ? 1 : 0);
  w.str(model.provider_name());
  w.u32(static_cast<std::uint32_t>(model.size()));
  for (const auto& p : model.prototypes()) {
    w.str(p.label);
    w.u64(p.support_count);
    for (Eigen::Index i = 0; i < p.mean.size(); ++i) w.f64(p.mean[i]);
  }
  return w.take();
}

ClassifierModel parse_model(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < kMagic.size() || r.take(kMagic.size()) != kMagic) {
    throw Error(ErrorCode::CorruptFile, "not a prototype model file");
  }
  if (const auto version = r.u32(); version != kModelVersion) {
    throw Error(ErrorCode::CorruptFile, "unsupported model version " + std::to_string(version));
  }
  const auto dim = r.u32();
  const bool normalized = r.u8() != 0;
  auto provider = r.str();
  const auto classes = r.u32();

  std::vector<Prototype> prototypes;
  for (std::uint32_t c = 0; c < classes; ++c) {
    Prototype p;
    p.label = r.str();
    p.support_count = r.u64();
    p.mean.resize(dim);
    for (std::uint32_t i = 0; i < dim; ++i) p.mean[i] = r.f64();
    prototypes.push_back(std::move(p));
  }
  if (!r.done()) throw Error(ErrorCode::CorruptFile, "trailing bytes after model records");
  try {
    return ClassifierModel(std::move(prototypes), std::move(provider), normalized);
  } catch (const Error& e) {
    throw Error(ErrorCode::CorruptFile, e.what());
  }
}

void save_model(const std::filesystem::path& path, const ClassifierModel& model) {
  write_file_atomic(path, serialize_model(model));
}

ClassifierModel load_model(const std::filesystem::path& path, const std::optional<std::string>& expected_provider) {
  auto model = parse_model(read_file_text(path));
  if (expected_provider && *expected_provider != model.provider_name()) {
    throw Error(ErrorCode::ProviderMismatch, "model was built with " + model.provider_name() +
                                                 ", queried with " + *expected_provider);
  }
  return model;
}

}  // namespace obs
