#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace obs {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// One labeled polygon from a LabelMe-style annotation.
struct Shape {
  std::string label;
  std::vector<Point> points;
};

struct AnnotationFile {
  std::string image_path;
  int image_width = 0;
  int image_height = 0;
  std::vector<Shape> shapes;
};

enum class InscriptionType { Ideographic, Pictographic, PhonoSemantic };

std::string_view to_string(InscriptionType type);
/// Accepts the canonical names plus "phono_semantic" and the Chinese terms
/// 会意 / 象形 / 形声. Case-insensitive for the Latin forms.
std::optional<InscriptionType> parse_inscription_type(std::string_view text);

struct ComponentRecord {
  std::string component_id;
  std::string label;
  std::string source_character_id;
  std::vector<Point> polygon;
  std::string image_ref;
  std::string explanation;
  bool operator==(const ComponentRecord&) const = default;
};

struct CharacterRecord {
  std::string character_id;
  /// Character identity; several images may depict the same character.
  std::string identity;
  std::string image_ref;
  std::vector<std::string> component_labels;
  std::string interpretation;
  std::optional<InscriptionType> inscription_type;
  std::optional<std::string> modern_form;
  std::optional<std::string> variant_group;
  bool operator==(const CharacterRecord&) const = default;
};

using Vocabulary = std::set<std::string, std::less<>>;

struct Corpus {
  std::vector<CharacterRecord> characters;
  std::vector<ComponentRecord> components;
  Vocabulary vocabulary;

  /// Throws InconsistentCorpus when a component references a missing
  /// character or carries a label outside the vocabulary.
  void validate() const;
};

/// Parses the minimal LabelMe subset: imagePath, imageWidth, imageHeight and
/// shapes[{label, points}]. Other fields are ignored.
AnnotationFile parse_annotation(std::string_view raw);

/// One record per shape; ids are `<character_id>#<shape index>`. The crop
/// image for shape i of `char.png` is expected at `char_c<i>.png`.
std::vector<ComponentRecord> extract_components(const AnnotationFile& file,
                                                const Vocabulary& vocabulary,
                                                std::string_view character_id);

/// One label per line; blank lines and lines starting with '#' are skipped.
Vocabulary parse_vocabulary(std::string_view text);

struct CorpusStats {
  std::size_t character_images = 0;
  std::size_t unique_characters = 0;
  std::size_t component_images = 0;
  std::size_t distinct_components = 0;
  bool operator==(const CorpusStats&) const = default;
};

CorpusStats corpus_stats(const Corpus& corpus);

enum class SplitUnit { ByComponentClass, ByCharacter };

std::string_view to_string(SplitUnit unit);
std::optional<SplitUnit> parse_split_unit(std::string_view text);

struct CorpusSplit {
  Corpus train;
  Corpus test;
};

/// Deterministic split. ByComponentClass stratifies component records per
/// label with ceil(ratio * n) in train; each side also carries the character
/// records its components reference. ByCharacter partitions characters
/// globally and components follow their character.
CorpusSplit split_corpus(const Corpus& corpus, double ratio, std::uint64_t seed,
                         SplitUnit unit);

/// Per-character fields that LabelMe files do not carry.
struct CharacterMetadata {
  std::optional<std::string> identity;
  std::string interpretation;
  std::optional<InscriptionType> inscription_type;
  std::optional<std::string> modern_form;
  std::optional<std::string> variant_group;
};

/// Parses LDJSON records {character_id, identity?, interpretation?,
/// inscription_type?, modern_form?, variant_group?}.
std::map<std::string, CharacterMetadata, std::less<>> parse_metadata(std::string_view text);

/// Ingests every `*.json` annotation in `dir` (sorted by name). The
/// character id is the file stem. Image refs are resolved against `dir`.
Corpus ingest_directory(const std::filesystem::path& dir, const Vocabulary& vocabulary,
                        const std::map<std::string, CharacterMetadata, std::less<>>& metadata = {});

/// Line-delimited JSON, one record per character then per component. Image
/// refs are written relative to `base_dir`.
std::string serialize_manifest(const Corpus& corpus, const std::filesystem::path& base_dir);
/// Relative image refs are resolved against `base_dir`. The vocabulary is
/// the set of labels the records mention.
Corpus parse_manifest(std::string_view text, const std::filesystem::path& base_dir);

Corpus load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const Corpus& corpus);

}  // namespace obs
