#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

#include "obs/dataset.hpp"
#include "obs/error.hpp"
#include "obs/util.hpp"
#include "test_support.hpp"

using namespace obs;

namespace {

const char* kMinimal = R"({
  "version": "5.2.1",
  "imagePath": "c1.png",
  "imageWidth": 100,
  "imageHeight": 80,
  "imageData": null,
  "shapes": [{"label": "hand", "points": [[0, 0], [100, 0], [100, 80], [10, 70]], "shape_type": "polygon"}]
})";

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an obs::Error");
  return ErrorCode::ConfigError;
}

/// 10 characters, 3 of which repeat another's identity, 25 components over 7 labels.
Corpus synthetic_corpus() {
  Corpus c;
  const std::vector<std::string> labels = {"a", "b", "c", "d", "e", "f", "g"};
  c.vocabulary = Vocabulary(labels.begin(), labels.end());
  for (int i = 0; i < 10; ++i) {
    CharacterRecord ch;
    ch.character_id = "ch" + std::to_string(i);
    ch.identity = i < 7 ? ch.character_id : "ch" + std::to_string(i - 7);
    c.characters.push_back(ch);
  }
  for (int j = 0; j < 25; ++j) {
    ComponentRecord comp;
    comp.source_character_id = "ch" + std::to_string(j % 10);
    comp.component_id = comp.source_character_id + "#" + std::to_string(j / 10);
    comp.label = labels[static_cast<std::size_t>(j % 7)];
    c.components.push_back(comp);
    c.characters[static_cast<std::size_t>(j % 10)].component_labels.push_back(comp.label);
  }
  return c;
}

Corpus class_sizes_corpus(const std::vector<std::size_t>& sizes) {
  Corpus c;
  CharacterRecord host;
  host.character_id = "host";
  host.identity = "host";
  c.characters.push_back(host);
  for (std::size_t cls = 0; cls < sizes.size(); ++cls) {
    const auto label = "L" + std::to_string(cls);
    c.vocabulary.insert(label);
    for (std::size_t i = 0; i < sizes[cls]; ++i) {
      ComponentRecord comp;
      comp.component_id = label + "_" + std::to_string(i);
      comp.label = label;
      comp.source_character_id = "host";
      c.components.push_back(comp);
    }
  }
  return c;
}

}  // namespace

TEST_CASE("parse_annotation accepts a minimal LabelMe file") {
  const auto file = parse_annotation(kMinimal);
  CHECK(file.image_path == "c1.png");
  CHECK(file.image_width == 100);
  CHECK(file.image_height == 80);
  REQUIRE(file.shapes.size() == 1);
  CHECK(file.shapes[0].label == "hand");
  CHECK(file.shapes[0].points.size() == 4);
  // Points on the boundary are legal.
  CHECK(file.shapes[0].points[2] == Point{100, 80});
}

TEST_CASE("parse_annotation reports typed errors") {
  SUBCASE("two-point polygon names shape 0") {
    try {
      parse_annotation(R"({"imagePath":"x.png","imageWidth":10,"imageHeight":10,
                          "shapes":[{"label":"hand","points":[[1,1],[2,2]]}]})");
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::SchemaViolation);
      CHECK(e.location() == std::optional<std::size_t>(0));
      CHECK(std::string(e.what()).find("shape 0") != std::string::npos);
    }
  }
  SUBCASE("out-of-bounds point names the shape") {
    try {
      parse_annotation(R"({"imagePath":"x.png","imageWidth":10,"imageHeight":10,"shapes":[
          {"label":"hand","points":[[1,1],[2,2],[3,1]]},
          {"label":"roof","points":[[1,1],[11,2],[3,1]]}]})");
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::SchemaViolation);
      CHECK(e.location() == std::optional<std::size_t>(1));
    }
  }
  CHECK(code_of([] { parse_annotation("{not json"); }) == ErrorCode::MalformedInput);
  CHECK(code_of([] { parse_annotation("[1,2]"); }) == ErrorCode::MalformedInput);
  CHECK(code_of([] { parse_annotation(R"({"imageWidth":1,"imageHeight":1,"shapes":[]})"); }) ==
        ErrorCode::SchemaViolation);
  CHECK(code_of([] { parse_annotation(R"({"imagePath":"a","imageWidth":0,"imageHeight":1,"shapes":[]})"); }) ==
        ErrorCode::SchemaViolation);
  CHECK(code_of([] { parse_annotation(R"({"imagePath":"a","imageWidth":4.5,"imageHeight":1,"shapes":[]})"); }) ==
        ErrorCode::SchemaViolation);
  CHECK(code_of([] { parse_annotation(R"({"imagePath":"a","imageWidth":4,"imageHeight":4,"shapes":[]})"); }) ==
        ErrorCode::SchemaViolation);
  CHECK(code_of([] {
          parse_annotation(R"({"imagePath":"a","imageWidth":4,"imageHeight":4,"shapes":[{"points":[[0,0],[1,1],[2,0]]}]})");
        }) == ErrorCode::SchemaViolation);
  CHECK(code_of([] {
          parse_annotation(R"({"imagePath":"a","imageWidth":4,"imageHeight":4,"shapes":[{"label":"x","points":[[0,0],[1],[2,0]]}]})");
        }) == ErrorCode::SchemaViolation);
}

TEST_CASE("extract_components validates labels and derives ids") {
  const Vocabulary vocab{"hand", "roof"};
  auto file = parse_annotation(R"({"imagePath":"img/c7.png","imageWidth":10,"imageHeight":10,"shapes":[
      {"label":"hand","points":[[0,0],[1,1],[2,0]]},
      {"label":"roof","points":[[0,0],[5,5],[9,0]]}]})");

  const auto recs = extract_components(file, vocab, "c7");
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].component_id == "c7#0");
  CHECK(recs[1].component_id == "c7#1");
  CHECK(recs[1].label == "roof");
  CHECK(recs[1].image_ref == "img/c7_c1.png");
  CHECK(extract_components(file, vocab, "c7") == recs);

  file.shapes[1].label = "rooof";
  try {
    extract_components(file, vocab, "c7");
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnknownLabel);
    CHECK(e.location() == std::optional<std::size_t>(1));
    CHECK(std::string(e.what()).find("rooof") != std::string::npos);
  }
}

TEST_CASE("ingest of the fixture directory matches the independent tally") {
  const auto root = fixture_path("mini_corpus");
  const auto vocab = parse_vocabulary(read_file_text(root / "vocab.txt"));
  const auto meta = parse_metadata(read_file_text(root / "metadata.ldjson"));
  const auto corpus = ingest_directory(root / "annotations", vocab, meta);
  corpus.validate();

  // Frozen from tests/fixtures/count_mini_corpus.py.
  CHECK(corpus_stats(corpus) == CorpusStats{34, 30, 67, 12});

  std::set<std::string> ids;
  for (const auto& c : corpus.components) ids.insert(c.component_id);
  CHECK(ids.size() == corpus.components.size());

  const auto& first = corpus.characters.front();
  CHECK(first.character_id == "char_000");
  CHECK(first.modern_form == std::optional<std::string>("休"));
  CHECK(first.inscription_type == InscriptionType::Ideographic);
  CHECK(std::filesystem::exists(first.image_ref));
  CHECK(std::filesystem::exists(corpus.components.front().image_ref));
}

TEST_CASE("manifest round-trips through a different directory") {
  const auto root = fixture_path("mini_corpus");
  const auto corpus = ingest_directory(root / "annotations", parse_vocabulary(read_file_text(root / "vocab.txt")),
                                       parse_metadata(read_file_text(root / "metadata.ldjson")));
  TempDir tmp;
  save_manifest(tmp.path() / "m.ldjson", corpus);
  const auto back = load_manifest(tmp.path() / "m.ldjson");
  CHECK(back.characters == corpus.characters);
  CHECK(back.components == corpus.components);
  CHECK(back.vocabulary == corpus.vocabulary);

  const auto text = read_file_text(tmp.path() / "m.ldjson");
  CHECK(text.find("\"kind\":\"character\"") != std::string::npos);
  CHECK(text.find("\"kind\":\"component\"") != std::string::npos);
}

TEST_CASE("parse_manifest rejects dangling components") {
  const std::string text =
      R"({"kind":"component","component_id":"x#0","label":"hand","source_character_id":"x","polygon":[]})";
  CHECK(code_of([&] { parse_manifest(text, {}); }) == ErrorCode::InconsistentCorpus);
  CHECK(code_of([&] { parse_manifest(R"({"kind":"glyph"})", {}); }) == ErrorCode::SchemaViolation);
}

TEST_CASE("corpus_stats") {
  CHECK(corpus_stats(Corpus{}) == CorpusStats{0, 0, 0, 0});

  auto corpus = synthetic_corpus();
  corpus.validate();
  CHECK(corpus_stats(corpus) == CorpusStats{10, 7, 25, 7});

  std::mt19937 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(corpus.characters.begin(), corpus.characters.end(), rng);
    std::shuffle(corpus.components.begin(), corpus.components.end(), rng);
    CHECK(corpus_stats(corpus) == CorpusStats{10, 7, 25, 7});
  }
}

TEST_CASE("split_corpus by component class follows ceil(ratio * n) with one train minimum") {
  SUBCASE("10 samples at 0.7") {
    const auto split = split_corpus(class_sizes_corpus({10}), 0.7, 42, SplitUnit::ByComponentClass);
    CHECK(split.train.components.size() == 7);
    CHECK(split.test.components.size() == 3);
  }
  SUBCASE("single sample stays in train") {
    const auto split = split_corpus(class_sizes_corpus({1}), 0.7, 42, SplitUnit::ByComponentClass);
    CHECK(split.train.components.size() == 1);
    CHECK(split.test.components.empty());
  }
  SUBCASE("per-class sizes agree with an integer-arithmetic enumeration of the policy") {
    // ratio = num/den exactly; train = max(1, ceil(num * n / den)) in integers.
    const std::vector<std::pair<int, int>> ratios = {{7, 10}, {1, 2}, {1, 3}, {9, 10}, {1, 10}};
    std::vector<std::size_t> sizes;
    for (std::size_t n = 1; n <= 25; ++n) sizes.push_back(n);
    for (auto [num, den] : ratios) {
      const auto split = split_corpus(class_sizes_corpus(sizes), static_cast<double>(num) / den, 9,
                                      SplitUnit::ByComponentClass);
      std::map<std::string, std::size_t> train_per_class;
      for (const auto& c : split.train.components) ++train_per_class[c.label];
      for (std::size_t n = 1; n <= 25; ++n) {
        const auto expected = std::max<std::size_t>(1, (num * n + den - 1) / den);
        CHECK_MESSAGE(train_per_class["L" + std::to_string(n - 1)] == expected, "n=", n, " ratio=", num, "/", den);
      }
    }
  }
}

TEST_CASE("split_corpus is deterministic and partitions for all seeds") {
  const auto root = fixture_path("mini_corpus");
  const auto corpus = ingest_directory(root / "annotations", parse_vocabulary(read_file_text(root / "vocab.txt")));

  for (auto unit : {SplitUnit::ByCharacter, SplitUnit::ByComponentClass}) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const double ratio = 0.05 + 0.9 * static_cast<double>(seed) / 40.0;
      const auto a = split_corpus(corpus, ratio, seed, unit);
      const auto b = split_corpus(corpus, ratio, seed, unit);
      CHECK(a.train.components == b.train.components);
      CHECK(a.test.characters == b.test.characters);

      std::set<std::string> train_ids;
      std::set<std::string> test_ids;
      if (unit == SplitUnit::ByCharacter) {
        for (const auto& c : a.train.characters) train_ids.insert(c.character_id);
        for (const auto& c : a.test.characters) test_ids.insert(c.character_id);
        CHECK(a.train.characters.size() + a.test.characters.size() == corpus.characters.size());
        CHECK(a.train.components.size() + a.test.components.size() == corpus.components.size());
        a.train.validate();
        a.test.validate();
      } else {
        for (const auto& c : a.train.components) train_ids.insert(c.component_id);
        for (const auto& c : a.test.components) test_ids.insert(c.component_id);
        CHECK(a.train.components.size() + a.test.components.size() == corpus.components.size());
      }
      std::vector<std::string> both;
      std::set_intersection(train_ids.begin(), train_ids.end(), test_ids.begin(), test_ids.end(),
                            std::back_inserter(both));
      CHECK(both.empty());
    }
  }
}

TEST_CASE("split_corpus rejects bad ratios") {
  const auto corpus = synthetic_corpus();
  for (double r : {0.0, 1.0, -0.2, 1.5}) {
    CHECK(code_of([&] { split_corpus(corpus, r, 1, SplitUnit::ByCharacter); }) == ErrorCode::InvalidRatio);
  }
  CHECK(code_of([] { split_corpus(Corpus{}, 0.7, 1, SplitUnit::ByCharacter); }) == ErrorCode::EmptyInput);
}

TEST_CASE("inscription type names") {
  CHECK(parse_inscription_type("Phono-Semantic") == InscriptionType::PhonoSemantic);
  CHECK(parse_inscription_type("phono_semantic") == InscriptionType::PhonoSemantic);
  CHECK(parse_inscription_type("象形") == InscriptionType::Pictographic);
  CHECK_FALSE(parse_inscription_type("pictograph").has_value());
}
