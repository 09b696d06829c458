#include "obs/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "obs/error.hpp"
#include "obs/util.hpp"

namespace obs {

using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

std::string lower_ascii(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

Error shape_error(std::size_t index, const std::string& what) {
  return Error(ErrorCode::SchemaViolation, "shape " + std::to_string(index) + ": " + what, index);
}

int positive_dimension(const json& doc, const char* key) {
  auto it = doc.find(key);
  if (it == doc.end()) throw Error(ErrorCode::SchemaViolation, std::string("missing field ") + key);
  if (!it->is_number_integer() || it->get<long long>() <= 0) {
    throw Error(ErrorCode::SchemaViolation, std::string(key) + " must be a positive integer");
  }
  return it->get<int>();
}

std::string crop_ref(std::string_view image_path, std::size_t index) {
  std::filesystem::path p{std::string(image_path)};
  auto ext = p.extension().string();
  auto stem = p;
  stem.replace_extension();
  return stem.string() + "_c" + std::to_string(index) + ext;
}

/// Portable Fisher-Yates; std::shuffle differs between standard libraries.
template <typename T>
void seeded_shuffle(std::vector<T>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

std::size_t train_count(double ratio, std::size_t n) {
  if (n == 0) return 0;
  // The epsilon absorbs products such as 0.7 * 20 landing just above an integer.
  auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

std::string relative_ref(const std::string& ref, const std::filesystem::path& base_dir) {
  if (ref.empty()) return ref;
  std::filesystem::path p(ref);
  if (!p.is_absolute()) return p.generic_string();
  const auto base = base_dir.empty() ? std::filesystem::path(".") : base_dir;
  auto rel = p.lexically_relative(std::filesystem::absolute(base).lexically_normal());
  return rel.empty() ? p.generic_string() : rel.generic_string();
}

std::string resolve_ref(const std::string& ref, const std::filesystem::path& base_dir) {
  if (ref.empty()) return ref;
  std::filesystem::path p(ref);
  if (p.is_absolute()) return p.lexically_normal().string();
  const auto base = base_dir.empty() ? std::filesystem::path(".") : base_dir;
  return (std::filesystem::absolute(base) / p).lexically_normal().string();
}

std::optional<std::string> optional_string(const json& doc, const char* key) {
  auto it = doc.find(key);
  if (it == doc.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw Error(ErrorCode::SchemaViolation, std::string(key) + " must be a string");
  return it->get<std::string>();
}

std::string required_string(const json& doc, const char* key) {
  auto it = doc.find(key);
  if (it == doc.end() || !it->is_string()) {
    throw Error(ErrorCode::SchemaViolation, std::string("missing string field ") + key);
  }
  return it->get<std::string>();
}

std::optional<InscriptionType> optional_type(const json& doc) {
  auto text = optional_string(doc, "inscription_type");
  if (!text) return std::nullopt;
  auto type = parse_inscription_type(*text);
  if (!type) throw Error(ErrorCode::SchemaViolation, "unknown inscription_type " + *text);
  return type;
}

}  // namespace

std::string_view to_string(InscriptionType type) {
  switch (type) {
    case InscriptionType::Ideographic: return "ideographic";
    case InscriptionType::Pictographic: return "pictographic";
    case InscriptionType::PhonoSemantic: return "phono-semantic";
  }
  return "";
}

std::optional<InscriptionType> parse_inscription_type(std::string_view text) {
  const auto t = lower_ascii(trim(text));
  if (t == "ideographic" || t == "会意") return InscriptionType::Ideographic;
  if (t == "pictographic" || t == "象形") return InscriptionType::Pictographic;
  if (t == "phono-semantic" || t == "phono_semantic" || t == "形声") {
    return InscriptionType::PhonoSemantic;
  }
  return std::nullopt;
}

void Corpus::validate() const {
  std::unordered_set<std::string> ids;
  for (const auto& c : characters) ids.insert(c.character_id);
  for (std::size_t i = 0; i < components.size(); ++i) {
    const auto& comp = components[i];
    if (!ids.contains(comp.source_character_id)) {
      throw Error(ErrorCode::InconsistentCorpus,
                  comp.component_id + " references missing character " + comp.source_character_id, i);
    }
    if (!vocabulary.contains(comp.label)) {
      throw Error(ErrorCode::InconsistentCorpus,
                  comp.component_id + " has label outside the vocabulary: " + comp.label, i);
    }
  }
}

AnnotationFile parse_annotation(std::string_view raw) {
  json doc;
  try {
    doc = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::MalformedInput, e.what(), e.byte);
  }
  if (!doc.is_object()) throw Error(ErrorCode::MalformedInput, "annotation root is not an object");

  AnnotationFile file;
  file.image_path = required_string(doc, "imagePath");
  file.image_width = positive_dimension(doc, "imageWidth");
  file.image_height = positive_dimension(doc, "imageHeight");

  auto shapes = doc.find("shapes");
  if (shapes == doc.end() || !shapes->is_array()) {
    throw Error(ErrorCode::SchemaViolation, "missing array field shapes");
  }
  if (shapes->empty()) throw Error(ErrorCode::SchemaViolation, "shapes is empty");

  const double w = file.image_width;
  const double h = file.image_height;
  for (std::size_t i = 0; i < shapes->size(); ++i) {
    const auto& s = (*shapes)[i];
    if (!s.is_object()) throw shape_error(i, "not an object");
    auto label = s.find("label");
    if (label == s.end() || !label->is_string()) throw shape_error(i, "missing label");
    auto points = s.find("points");
    if (points == s.end() || !points->is_array()) throw shape_error(i, "missing points");
    if (points->size() < 3) {
      throw shape_error(i, "polygon has " + std::to_string(points->size()) + " points, need at least 3");
    }
    Shape shape;
    shape.label = label->get<std::string>();
    if (shape.label.empty()) throw shape_error(i, "empty label");
    for (const auto& p : *points) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
        throw shape_error(i, "point is not an [x, y] pair");
      }
      Point pt{p[0].get<double>(), p[1].get<double>()};
      if (!(pt.x >= 0.0 && pt.x <= w && pt.y >= 0.0 && pt.y <= h)) {
        throw shape_error(i, "point (" + std::to_string(pt.x) + ", " + std::to_string(pt.y) +
                                 ") outside the image");
      }
      shape.points.push_back(pt);
    }
    file.shapes.push_back(std::move(shape));
  }
  return file;
}

std::vector<ComponentRecord> extract_components(const AnnotationFile& file,
                                                const Vocabulary& vocabulary,
                                                std::string_view character_id) {
  std::vector<ComponentRecord> out;
  out.reserve(file.shapes.size());
  for (std::size_t i = 0; i < file.shapes.size(); ++i) {
    const auto& shape = file.shapes[i];
    if (!vocabulary.contains(shape.label)) {
      throw Error(ErrorCode::UnknownLabel,
                  "shape " + std::to_string(i) + ": label \"" + shape.label + "\" not in vocabulary", i);
    }
    ComponentRecord rec;
    rec.component_id = std::string(character_id) + "#" + std::to_string(i);
    rec.label = shape.label;
    rec.source_character_id = std::string(character_id);
    rec.polygon = shape.points;
    rec.image_ref = crop_ref(file.image_path, i);
    out.push_back(std::move(rec));
  }
  return out;
}

Vocabulary parse_vocabulary(std::string_view text) {
  Vocabulary vocab;
  for (const auto& line : split_lines(text)) {
    auto label = trim(line);
    if (label.empty() || label.front() == '#') continue;
    vocab.insert(std::move(label));
  }
  return vocab;
}

CorpusStats corpus_stats(const Corpus& corpus) {
  std::set<std::string_view> identities;
  std::set<std::string_view> labels;
  for (const auto& c : corpus.characters) identities.insert(c.identity);
  for (const auto& c : corpus.components) labels.insert(c.label);
  return {corpus.characters.size(), identities.size(), corpus.components.size(), labels.size()};
}

std::string_view to_string(SplitUnit unit) {
  return unit == SplitUnit::ByCharacter ? "by_character" : "by_component_class";
}

std::optional<SplitUnit> parse_split_unit(std::string_view text) {
  if (text == "by_character") return SplitUnit::ByCharacter;
  if (text == "by_component_class") return SplitUnit::ByComponentClass;
  return std::nullopt;
}

CorpusSplit split_corpus(const Corpus& corpus, double ratio, std::uint64_t seed, SplitUnit unit) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw Error(ErrorCode::InvalidRatio, "ratio must lie in (0, 1), got " + std::to_string(ratio));
  }
  if (corpus.characters.empty()) throw Error(ErrorCode::EmptyInput, "cannot split an empty corpus");

  std::mt19937_64 rng(seed);
  CorpusSplit out;
  out.train.vocabulary = corpus.vocabulary;
  out.test.vocabulary = corpus.vocabulary;

  if (unit == SplitUnit::ByCharacter) {
    std::vector<std::size_t> order(corpus.characters.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return corpus.characters[a].character_id < corpus.characters[b].character_id;
    });
    seeded_shuffle(order, rng);
    const auto k = train_count(ratio, order.size());
    std::unordered_set<std::string> train_ids;
    for (std::size_t i = 0; i < k; ++i) train_ids.insert(corpus.characters[order[i]].character_id);
    for (const auto& c : corpus.characters) {
      (train_ids.contains(c.character_id) ? out.train : out.test).characters.push_back(c);
    }
    for (const auto& comp : corpus.components) {
      (train_ids.contains(comp.source_character_id) ? out.train : out.test).components.push_back(comp);
    }
    return out;
  }

  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < corpus.components.size(); ++i) {
    by_label[corpus.components[i].label].push_back(i);
  }
  std::vector<bool> in_train(corpus.components.size(), false);
  for (auto& [label, members] : by_label) {
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return corpus.components[a].component_id < corpus.components[b].component_id;
    });
    seeded_shuffle(members, rng);
    const auto k = train_count(ratio, members.size());
    for (std::size_t i = 0; i < k; ++i) in_train[members[i]] = true;
  }

  std::unordered_set<std::string> train_chars;
  std::unordered_set<std::string> test_chars;
  for (std::size_t i = 0; i < corpus.components.size(); ++i) {
    const auto& comp = corpus.components[i];
    if (in_train[i]) {
      out.train.components.push_back(comp);
      train_chars.insert(comp.source_character_id);
    } else {
      out.test.components.push_back(comp);
      test_chars.insert(comp.source_character_id);
    }
  }
  for (const auto& c : corpus.characters) {
    const bool referenced = train_chars.contains(c.character_id) || test_chars.contains(c.character_id);
    if (train_chars.contains(c.character_id) || !referenced) out.train.characters.push_back(c);
    if (test_chars.contains(c.character_id)) out.test.characters.push_back(c);
  }
  return out;
}

std::map<std::string, CharacterMetadata, std::less<>> parse_metadata(std::string_view text) {
  std::map<std::string, CharacterMetadata, std::less<>> out;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    json doc;
    try {
      doc = json::parse(lines[i]);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::MalformedInput, "metadata line " + std::to_string(i + 1) + ": " + e.what(), i);
    }
    CharacterMetadata meta;
    const auto id = required_string(doc, "character_id");
    meta.identity = optional_string(doc, "identity");
    meta.interpretation = optional_string(doc, "interpretation").value_or("");
    meta.inscription_type = optional_type(doc);
    meta.modern_form = optional_string(doc, "modern_form");
    meta.variant_group = optional_string(doc, "variant_group");
    out[id] = std::move(meta);
  }
  return out;
}

Corpus ingest_directory(const std::filesystem::path& dir, const Vocabulary& vocabulary,
                        const std::map<std::string, CharacterMetadata, std::less<>>& metadata) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IoFailure, dir.string() + " is not a directory");

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  Corpus corpus;
  corpus.vocabulary = vocabulary;
  for (const auto& path : files) {
    const auto id = path.stem().string();
    AnnotationFile file;
    std::vector<ComponentRecord> comps;
    try {
      file = parse_annotation(read_file_text(path));
      comps = extract_components(file, vocabulary, id);
    } catch (const Error& e) {
      throw Error(e.code(), path.filename().string() + ": " + e.what(), e.location());
    }
    CharacterRecord rec;
    rec.character_id = id;
    rec.identity = id;
    rec.image_ref = resolve_ref(file.image_path, dir);
    if (auto it = metadata.find(id); it != metadata.end()) {
      rec.identity = it->second.identity.value_or(id);
      rec.interpretation = it->second.interpretation;
      rec.inscription_type = it->second.inscription_type;
      rec.modern_form = it->second.modern_form;
      rec.variant_group = it->second.variant_group;
    }
    for (auto& comp : comps) {
      rec.component_labels.push_back(comp.label);
      comp.image_ref = resolve_ref(comp.image_ref, dir);
      corpus.components.push_back(std::move(comp));
    }
    corpus.characters.push_back(std::move(rec));
  }
  return corpus;
}

std::string serialize_manifest(const Corpus& corpus, const std::filesystem::path& base_dir) {
  std::string out;
  for (const auto& c : corpus.characters) {
    json rec = {{"kind", "character"},
                {"v", kManifestVersion},
                {"character_id", c.character_id},
                {"identity", c.identity},
                {"image_ref", relative_ref(c.image_ref, base_dir)},
                {"component_labels", c.component_labels},
                {"interpretation", c.interpretation}};
    if (c.inscription_type) rec["inscription_type"] = to_string(*c.inscription_type);
    if (c.modern_form) rec["modern_form"] = *c.modern_form;
    if (c.variant_group) rec["variant_group"] = *c.variant_group;
    out += rec.dump();
    out += '\n';
  }
  for (const auto& comp : corpus.components) {
    json polygon = json::array();
    for (const auto& p : comp.polygon) polygon.push_back({p.x, p.y});
    json rec = {{"kind", "component"},
                {"v", kManifestVersion},
                {"component_id", comp.component_id},
                {"label", comp.label},
                {"source_character_id", comp.source_character_id},
                {"polygon", std::move(polygon)},
                {"image_ref", relative_ref(comp.image_ref, base_dir)},
                {"explanation", comp.explanation}};
    out += rec.dump();
    out += '\n';
  }
  return out;
}

Corpus parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  Corpus corpus;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    try {
      const auto doc = json::parse(lines[i]);
      const auto kind = required_string(doc, "kind");
      if (kind == "character") {
        CharacterRecord c;
        c.character_id = required_string(doc, "character_id");
        c.identity = optional_string(doc, "identity").value_or(c.character_id);
        c.image_ref = resolve_ref(optional_string(doc, "image_ref").value_or(""), base_dir);
        c.component_labels = doc.value("component_labels", std::vector<std::string>{});
        c.interpretation = optional_string(doc, "interpretation").value_or("");
        c.inscription_type = optional_type(doc);
        c.modern_form = optional_string(doc, "modern_form");
        c.variant_group = optional_string(doc, "variant_group");
        corpus.vocabulary.insert(c.component_labels.begin(), c.component_labels.end());
        corpus.characters.push_back(std::move(c));
      } else if (kind == "component") {
        ComponentRecord comp;
        comp.component_id = required_string(doc, "component_id");
        comp.label = required_string(doc, "label");
        comp.source_character_id = required_string(doc, "source_character_id");
        for (const auto& p : doc.value("polygon", json::array())) {
          comp.polygon.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        }
        comp.image_ref = resolve_ref(optional_string(doc, "image_ref").value_or(""), base_dir);
        comp.explanation = optional_string(doc, "explanation").value_or("");
        corpus.vocabulary.insert(comp.label);
        corpus.components.push_back(std::move(comp));
      } else {
        throw Error(ErrorCode::SchemaViolation, "unknown record kind " + kind);
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedInput, "manifest line " + std::to_string(i + 1) + ": " + e.what(), i);
    } catch (const Error& e) {
      throw Error(e.code(), "manifest line " + std::to_string(i + 1) + ": " + e.what(), i);
    }
  }
  corpus.validate();
  return corpus;
}

Corpus load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_file_text(path), path.parent_path());
}

void save_manifest(const std::filesystem::path& path, const Corpus& corpus) {
  write_file_atomic(path, serialize_manifest(corpus, path.parent_path()));
}

}  // namespace obs
