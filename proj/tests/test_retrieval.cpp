#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <random>
#include <thread>

#include "obs/retrieval.hpp"
#include "obs/util.hpp"
#include "test_support.hpp"

using namespace obs;

namespace {

const KnowledgeGraph& fixture_graph() {
  static const KnowledgeGraph g = [] {
    const auto root = fixture_path("mini_corpus");
    const auto corpus =
        ingest_directory(root / "annotations", parse_vocabulary(read_file_text(root / "vocab.txt")),
                         parse_metadata(read_file_text(root / "metadata.ldjson")));
    return build_graph(corpus, parse_explanations(read_file_text(root / "explanations.json")), "full");
  }();
  return g;
}

RankedPrediction predict(std::initializer_list<std::string> labels) {
  RankedPrediction p;
  double d = 0.1;
  for (const auto& l : labels) {
    p.entries.push_back({l, d});
    d += 0.2;
  }
  return p;
}

/// Counts calls to the two external tools.
class CountingTools final : public GraphTools {
public:
  explicit CountingTools(const KnowledgeGraph& g) : inner_(&g) {}
  ComponentExplanation component_explanation(std::string_view label) const override {
    ++external;
    return inner_.component_explanation(label);
  }
  std::vector<ContainingCharacter> characters_by_component(std::string_view label) const override {
    ++external;
    return inner_.characters_by_component(label);
  }
  std::vector<std::string> variant_lookup(std::string_view id) const override { return inner_.variant_lookup(id); }
  std::optional<std::string> modern_mapping(std::string_view id) const override { return inner_.modern_mapping(id); }

  mutable std::atomic<int> external{0};

private:
  KnowledgeGraphTools inner_;
};

RetrievalConfig config(std::size_t m, std::size_t min_evidence) {
  RetrievalConfig c;
  c.top_m = m;
  c.min_evidence = min_evidence;
  return c;
}

std::shared_ptr<const EmbeddingProvider> stub() { return std::make_shared<StubEmbeddingProvider>(128); }

std::vector<std::string> subjects(const EvidenceBundle& b) {
  std::vector<std::string> out;
  for (const auto& i : b.items) out.push_back(std::string(to_string(i.kind)) + ":" + i.subject);
  return out;
}

}  // namespace

TEST_CASE("hand-walked cascade on the fixture") {
  // sun is explained and contained by char_011 and char_025.
  CountingTools tools(fixture_graph());
  const auto b = retrieve_evidence(tools, predict({"sun", "person", "hand"}), nullptr, config(1, 2), "q");
  CHECK(b.items.size() == 3);
  CHECK(b.sufficient);
  CHECK(b.trace.size() == 2);
  CHECK(tools.external == 2);
  CHECK(subjects(b) == std::vector<std::string>{"component_explanation:sun", "containing_character:char_011",
                                                "containing_character:char_025"});
  CHECK(b.items[0].content == "The sun disk with a central dot.");
  CHECK(b.items[1].components == std::vector<std::string>{"knife", "sun", "禾"});
  CHECK(b.trace[0] == ToolCall{ToolKind::ComponentExplanation, "sun", 0});
  CHECK(b.trace[1] == ToolCall{ToolKind::CharactersByComponent, "sun", 1});
  for (std::size_t i = 0; i < b.items.size(); ++i) CHECK(b.items[i].rank == i);
}

TEST_CASE("co-component overlap reorders containing characters") {
  // With top-2 {sun, person}, char_025 shares both and moves ahead.
  const auto b = retrieve_evidence(&fixture_graph(), predict({"sun", "person"}), nullptr, config(2, 1));
  std::vector<std::string> chars;
  for (const auto& i : b.items) {
    if (i.kind == EvidenceKind::ContainingCharacter) chars.push_back(i.subject);
  }
  REQUIRE(chars.size() >= 2);
  CHECK(chars[0] == "char_025");
  CHECK(b.items[0].subject == "sun");
  CHECK(b.items[1].subject == "person");
}

TEST_CASE("stage two adds internal variant and modern evidence without tool calls") {
  CountingTools tools(fixture_graph());
  const auto b = retrieve_evidence(tools, predict({"sun"}), nullptr, config(1, 5));
  CHECK(tools.external == 2);
  CHECK(b.trace.size() == 2);
  // char_011 is in variant group vg_b with char_010; neither candidate has a modern form.
  CHECK(subjects(b) == std::vector<std::string>{"component_explanation:sun", "containing_character:char_011",
                                                "containing_character:char_025", "variant:char_011"});
  CHECK(b.items[3].content == "char_010");
  CHECK(b.items[3].source == EvidenceSource::Internal);
  CHECK(!b.sufficient);
  CHECK(b.min_evidence == 5);
}

TEST_CASE("modern mappings surface in stage two") {
  // field is contained by char_000, whose modern form is 休.
  const auto b = retrieve_evidence(&fixture_graph(), predict({"field"}), nullptr, config(1, 50));
  bool saw_mapping = false;
  for (const auto& i : b.items) {
    if (i.kind == EvidenceKind::ModernMapping && i.subject == "char_000") saw_mapping = i.content == "休";
  }
  CHECK(saw_mapping);
  CHECK(b.items.size() <= 12);
}

TEST_CASE("absent predicted component is skipped, not fatal") {
  CountingTools tools(fixture_graph());
  const auto b = retrieve_evidence(tools, predict({"ghost"}), nullptr, config(1, 3));
  CHECK(b.items.empty());
  CHECK(!b.sufficient);
  CHECK(b.trace.size() == 2);
  CHECK(render_evidence(b).empty());
}

TEST_CASE("empty explanations are marked, not dropped") {
  const auto b = retrieve_evidence(&fixture_graph(), predict({"knife"}), nullptr, config(1, 1));
  REQUIRE(!b.items.empty());
  CHECK(b.items[0].subject == "knife");
  CHECK(b.items[0].empty_explanation);
  CHECK(b.items[0].content.empty());
  CHECK(render_evidence(b).find("no recorded explanation") != std::string::npos);
}

TEST_CASE("missing graph and empty prediction") {
  try {
    retrieve_evidence(nullptr, predict({"sun"}), nullptr, RetrievalConfig{});
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::GraphUnavailable);
  }
  CHECK_THROWS_AS(retrieve_evidence(&fixture_graph(), RankedPrediction{}, nullptr, RetrievalConfig{}), Error);
}

TEST_CASE("retrieval is deterministic with an empty cache") {
  const auto p = predict({"moon", "tree", "hand"});
  SemanticCache c1(1024, 0.95, stub()), c2(1024, 0.95, stub());
  const auto a = retrieve_evidence(&fixture_graph(), p, &c1, RetrievalConfig{}, "char_x");
  const auto b = retrieve_evidence(&fixture_graph(), p, &c2, RetrievalConfig{}, "char_x");
  CHECK(serialize_bundle(a) == serialize_bundle(b));
  CHECK(bundle_from_json(to_json(a)) == a);
  CHECK(a.items.size() <= RetrievalConfig{}.max_items);
}

TEST_CASE("cache serves exact repeats and shrinks the trace") {
  CountingTools tools(fixture_graph());
  SemanticCache cache(1024, 0.95, stub());
  const auto p = predict({"hand", "tree"});
  const auto cfg = config(2, 3);
  int hits = 0;
  std::size_t trace_total = 0;
  for (int run = 0; run < 3; ++run) {
    const auto b = retrieve_evidence(tools, p, &cache, cfg);
    hits += static_cast<int>(b.cache_hits);
    trace_total += b.trace.size();
  }
  // 4 distinct tool:argument keys; the first run misses all, later runs hit all.
  CHECK(tools.external == 4);
  CHECK(trace_total == 4);
  CHECK(hits == 8);

  const auto cold = retrieve_evidence(&fixture_graph(), p, nullptr, cfg);
  const auto warm = retrieve_evidence(tools, p, &cache, cfg);
  CHECK(subjects(cold) == subjects(warm));
  for (const auto& i : warm.items) CHECK(i.source != EvidenceSource::Tool);
}

TEST_CASE("same character twice in one run costs two external calls") {
  CountingTools tools(fixture_graph());
  SemanticCache cache(16, 0.95, stub());
  const auto p = predict({"sun"});
  const auto first = retrieve_evidence(tools, p, &cache, config(1, 1));
  const auto second = retrieve_evidence(tools, p, &cache, config(1, 1));
  CHECK(first.trace.size() + second.trace.size() == 2);
  CHECK(tools.external == 2);
  CHECK(second.cache_hits == 2);
}

TEST_CASE("cache lookup semantics") {
  auto provider = stub();
  SemanticCache cache(8, 0.95, provider);
  CHECK(!cache.lookup("component_explanation:hand"));

  std::vector<EvidenceItem> stored{{EvidenceKind::ComponentExplanation, "hand", "a hand", EvidenceSource::Tool, 0, {}, false}};
  cache.insert("component_explanation:hand", stored);
  const auto hit = cache.lookup("component_explanation:hand");
  REQUIRE(hit);
  CHECK(hit->result == stored);
  CHECK(hit->similarity == doctest::Approx(1.0));
  CHECK(!cache.lookup("component_explanation:hands"));

  // Find a near pair with positive similarity and straddle it with the threshold.
  std::string near;
  double sim = 0;
  for (int i = 0; i < 200 && sim <= 0.0; ++i) {
    near = "component_explanation:hand" + std::to_string(i);
    sim = cosine_similarity(provider->embed_text(near), provider->embed_text("component_explanation:hand"));
  }
  REQUIRE(sim > 0.0);
  REQUIRE(sim < 0.95);
  SemanticCache loose(8, sim - 1e-9, provider), strict(8, std::min(1.0, sim + 1e-9), provider);
  loose.insert("component_explanation:hand", stored);
  strict.insert("component_explanation:hand", stored);
  const auto loose_hit = loose.lookup(near);
  REQUIRE(loose_hit);
  CHECK(loose_hit->similarity >= loose.threshold());
  CHECK(loose_hit->stored_query == "component_explanation:hand");
  CHECK(!strict.lookup(near));
}

TEST_CASE("LRU eviction matches a hand simulation") {
  SemanticCache cache(2, 0.95, stub());
  cache.insert("a", {});
  cache.insert("b", {});
  CHECK(cache.lookup("a"));  // touch a; b is now least recent
  cache.insert("c", {});
  CHECK(cache.size() == 2);
  CHECK(cache.keys_by_recency() == std::vector<std::string>{"a", "c"});
  CHECK(!cache.lookup("b"));
  CHECK(cache.lookup("a"));
  CHECK(cache.lookup("c"));
}

TEST_CASE("capacity zero makes the cache a no-op") {
  SemanticCache cache(0, 0.95, nullptr);
  cache.insert("x", {});
  CHECK(!cache.lookup("x"));
  CHECK(cache.size() == 0);
  CountingTools tools(fixture_graph());
  const auto p = predict({"sun"});
  retrieve_evidence(tools, p, &cache, config(1, 1));
  retrieve_evidence(tools, p, &cache, config(1, 1));
  CHECK(tools.external == 4);
}

TEST_CASE("synthesize_bundle dedups and is order invariant") {
  const auto p = predict({"hand", "tree", "moon"});
  std::vector<EvidenceItem> s1{
      {EvidenceKind::ComponentExplanation, "hand", "a hand", EvidenceSource::Cache, 0, {}, false},
      {EvidenceKind::ComponentExplanation, "hand", "a hand", EvidenceSource::Tool, 0, {}, false},
      {EvidenceKind::ComponentExplanation, "tree", "a tree", EvidenceSource::Tool, 0, {}, false},
      {EvidenceKind::ContainingCharacter, "c1", "one", EvidenceSource::Tool, 0, {"hand"}, false},
      {EvidenceKind::ContainingCharacter, "c2", "two", EvidenceSource::Tool, 0, {"hand", "tree"}, false},
      {EvidenceKind::ContainingCharacter, "c0", "zero", EvidenceSource::Tool, 0, {"fire", "hand"}, false},
      {EvidenceKind::ContainingCharacter, "c2", "two", EvidenceSource::Cache, 0, {"hand", "tree"}, false},
  };
  std::vector<EvidenceItem> s2{
      {EvidenceKind::ModernMapping, "c1", "M", EvidenceSource::Internal, 0, {}, false},
      {EvidenceKind::Variant, "c2", "c9", EvidenceSource::Internal, 0, {}, false},
  };
  RetrievalConfig cfg;
  const auto base = synthesize_bundle(s1, s2, p, cfg);
  std::vector<std::string> order;
  for (const auto& i : base) order.push_back(i.subject);
  CHECK(order == std::vector<std::string>{"hand", "tree", "c2", "c0", "c1", "c2", "c1"});
  CHECK(base[0].source == EvidenceSource::Tool);
  CHECK(base[2].source == EvidenceSource::Tool);

  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    auto a = s1, b = s2;
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(b.begin(), b.end(), rng);
    CHECK(synthesize_bundle(a, b, p, cfg) == base);
  }

  cfg.max_items = 3;
  CHECK(synthesize_bundle(s1, s2, p, cfg).size() == 3);
}

TEST_CASE("retrieval config parsing") {
  const auto c = RetrievalConfig::from_json(nlohmann::json::parse(R"({"top_m": 2, "cache_capacity": 4})"));
  CHECK(c.top_m == 2);
  CHECK(c.cache_capacity == 4);
  CHECK(c.min_evidence == 3);
  CHECK(RetrievalConfig::from_json(c.to_json()).to_json() == c.to_json());
  auto code_of = [](const char* text) {
    try {
      RetrievalConfig::from_json(nlohmann::json::parse(text));
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::NotFound;
  };
  CHECK(code_of(R"({"top_k": 2})") == ErrorCode::ConfigError);
  CHECK(code_of(R"({"cache_threshold": 0})") == ErrorCode::ConfigError);
  CHECK(code_of(R"({"cache_threshold": 1.5})") == ErrorCode::ConfigError);
  CHECK(code_of(R"({"top_m": "x"})") == ErrorCode::ConfigError);
  CHECK(code_of(R"({"max_items": 0})") == ErrorCode::ConfigError);
}

TEST_CASE("planned calls run in plan order") {
  CountingTools tools(fixture_graph());
  std::vector<ToolCall> plan{{ToolKind::CharactersByComponent, "sun", 0}, {ToolKind::ComponentExplanation, "hand", 0}};
  const auto b = retrieve_with_plan(tools, predict({"sun"}), plan, nullptr, config(1, 1));
  REQUIRE(b.trace.size() == 2);
  CHECK(b.trace[0].tool == ToolKind::CharactersByComponent);
  CHECK(b.trace[1].argument == "hand");
  CHECK(b.trace[1].issued_at == 1);
  CHECK(default_plan(predict({"a", "b", "c", "d"}), config(3, 1)).size() == 6);
}

TEST_CASE("concurrent retrievals share one cache safely") {
  SemanticCache cache(3, 0.95, stub());
  const auto& g = fixture_graph();
  const std::vector<RankedPrediction> preds{predict({"sun"}), predict({"hand"}), predict({"tree"}), predict({"moon"})};
  std::vector<std::string> expected;
  for (const auto& p : preds) expected.push_back(serialize_bundle(retrieve_evidence(&g, p, nullptr, config(1, 1))));
  std::atomic<int> mismatches{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (int r = 0; r < 25; ++r) {
        const auto& p = preds[(t + r) % preds.size()];
        auto b = retrieve_evidence(&g, p, &cache, config(1, 1));
        for (auto& i : b.items) i.source = EvidenceSource::Tool;
        b.trace.clear();
        b.cache_hits = 0;
        auto e = bundle_from_json(nlohmann::json::parse(expected[(t + r) % preds.size()]));
        e.trace.clear();
        if (!(b == e)) ++mismatches;
      }
    });
  }
  for (auto& th : threads) th.join();
  CHECK(mismatches == 0);
  CHECK(cache.size() <= 3);
}
