#include <doctest.h>

#include <cstdlib>
#include <map>

#include "obs/error.hpp"
#include "obs/pipeline.hpp"
#include "obs/util.hpp"
#include "pipeline_fixture.hpp"

using namespace obs;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::map<std::string, std::string> read_tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file_text(e.path());
  }
  return files;
}

EnvLookup env_of(std::map<std::string, std::string> vars) {
  auto shared = std::make_shared<std::map<std::string, std::string>>(std::move(vars));
  return [shared](const char* k) -> const char* {
    auto it = shared->find(k);
    return it == shared->end() ? nullptr : it->second.c_str();
  };
}

}  // namespace

TEST_CASE("stats reports the four corpus counts") {
  PipelineWorkspace ws;
  const auto r = obs_cmd({"stats", "--manifest", ws.path("corpus.ldjson")});
  REQUIRE(r.code == 0);
  const auto expected = json::parse(read_file_text(fixture_path("mini_corpus_expected.json")));
  const auto doc = r.json();
  CHECK(doc["schema_version"] == 1);
  for (const auto* key : {"character_images", "unique_characters", "component_images", "distinct_components"}) {
    CHECK(doc[key] == expected[key]);
  }
}

TEST_CASE("usage errors exit 2 with usage text") {
  auto r = obs_cmd({"stats", "--manifest", "x", "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(obs_cmd({}).code == 2);
  CHECK(obs_cmd({"frobnicate"}).code == 2);
  CHECK(obs_cmd({"split", "--manifest", "m", "--out-train", "a", "--out-test", "b", "--ratio", "abc"}).code == 2);
  CHECK(obs_cmd({"query", "--graph", "g", "--tool", "drop_table", "--arg", "x"}).code == 2);
  r = obs_cmd({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("interpret") != std::string::npos);
}

TEST_CASE("domain errors exit 1 with a typed message") {
  TempDir dir;
  auto r = obs_cmd({"stats", "--manifest", (dir.path() / "missing.ldjson").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("IoFailure") != std::string::npos);

  PipelineWorkspace ws;
  r = obs_cmd({"split", "--manifest", ws.path("corpus.ldjson"), "--ratio", "1.5", "--out-train", ws.path("a"),
               "--out-test", ws.path("b")});
  CHECK(r.code == 1);
  CHECK(r.err.find("InvalidRatio") != std::string::npos);
}

TEST_CASE("interpret without a backend is a domain error") {
  PipelineWorkspace ws;
  const auto image = (ws.root() / "corpus/annotations/char_005.png").string();
  const auto r = obs_cmd({"interpret", "--graph", ws.path("graph.ldjson"), "--model", ws.path("model.bin"), "--image",
                          image, "--mode", "vlm", "--lang", "en"});
  CHECK(r.code == 1);
  CHECK(r.err.find("backend not configured") != std::string::npos);

  const auto ok = obs_cmd({"interpret", "--mock", "--graph", ws.path("graph.ldjson"), "--model", ws.path("model.bin"),
                           "--image", image, "--mode", "multi_agent", "--lang", "zh", "--out", ws.path("r.json")});
  REQUIRE(ok.code == 0);
  const auto doc = json::parse(read_file_text(ws.path("r.json")));
  CHECK(doc["schema_version"] == 1);
  CHECK(doc["character_ref"] == "char_005");
  CHECK(doc["mode"] == "multi_agent");
  CHECK(doc["language"] == "zh");
  CHECK_FALSE(doc["inscription_type"].is_null());

  const auto dumped = obs_cmd({"interpret", "--mock", "--graph", ws.path("graph.ldjson"), "--model",
                               ws.path("model.bin"), "--image", image, "--dump-evidence", "--out", ws.path("r2.json")});
  REQUIRE(dumped.code == 0);
  const auto bundle = bundle_from_json(json::parse(dumped.out));
  CHECK(bundle.character_ref == "char_005");
}

TEST_CASE("config layering: flags over env over file over defaults") {
  PipelineConfig c;
  CHECK(c.lang == Language::En);
  c.apply_json({{"lang", "zh"}, {"workers", 3}, {"retrieval", {{"top_m", 2}}}});
  CHECK(c.lang == Language::Zh);
  CHECK(c.retrieval.top_m == 2);
  CHECK(c.retrieval.min_evidence == RetrievalConfig{}.min_evidence);
  c.apply_env(env_of({{"OBS_WORKERS", "5"}, {"OBS_CHAT_URL", "http://x"}, {"OBS_CHAT_KEY", "s3cret"}}));
  CHECK(c.workers == 5);
  CHECK(c.lang == Language::Zh);
  CHECK(c.chat_url == std::optional<std::string>("http://x"));
  CHECK(c.chat_key == std::optional<std::string>("s3cret"));
  c.apply_json({{"workers", 2}});
  CHECK(c.workers == 2);
  CHECK(c.to_json().dump().find("s3cret") == std::string::npos);

  auto code = [](const json& doc) {
    try {
      PipelineConfig p;
      p.apply_json(doc);
      p.validate();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::MalformedInput;
  };
  CHECK(code({{"chat_key", "x"}}) == ErrorCode::ConfigError);
  CHECK(code({{"colour", "blue"}}) == ErrorCode::ConfigError);
  CHECK(code({{"workers", "many"}}) == ErrorCode::ConfigError);
  CHECK(code({{"mode", "solo"}}) == ErrorCode::ConfigError);
  CHECK(code({{"metrics", "rouge1,bleu"}}) == ErrorCode::ConfigError);
  CHECK(code({{"retrieval", {{"top_m", 0}}}}) == ErrorCode::ConfigError);

  // The same precedence through the command line.
  PipelineWorkspace ws;
  write_file_atomic(ws.path("cfg.json"), R"({"lang": "zh", "mode": "multi_agent"})");
  auto base = ws.run_args("layered");
  base.insert(base.begin(), {"--config", ws.path("cfg.json")});
  base.insert(base.end(), {"--mode", "vlm", "--limit", "1"});
  const auto r = obs_cmd(base, env_of({{"OBS_LANG", "en"}}));
  REQUIRE(r.code == 0);
  const auto manifest = json::parse(read_file_text(ws.path("layered/run_manifest.json")));
  CHECK(manifest["config"]["mode"] == "vlm");
  CHECK(manifest["config"]["lang"] == "en");
  write_file_atomic(ws.path("bad.json"), R"({"chat_key": "leak"})");
  auto bad = ws.run_args("bad");
  bad.insert(bad.begin(), {"--config", ws.path("bad.json")});
  CHECK(obs_cmd(bad).code == 1);
}

TEST_CASE("mock run over three characters is byte-deterministic") {
  PipelineWorkspace ws;
  auto args = ws.run_args("a");
  args.insert(args.end(), {"--characters", "char_005,char_008,char_011"});
  const auto first = obs_cmd(args);
  REQUIRE(first.code == 0);
  args[args.size() - 3] = ws.path("b");
  const auto second = obs_cmd(args);
  REQUIRE(second.code == 0);
  CHECK(first.json()["manifest_hash"] == second.json()["manifest_hash"]);
  CHECK(first.json()["results"]["vlm"] == 3);
  const auto a = read_tree(ws.root() / "a"), b = read_tree(ws.root() / "b");
  CHECK(a.size() == 4);
  CHECK(a == b);
  CHECK(sha256_hex(a.at("run_manifest.json")) == first.json()["manifest_hash"].get<std::string>());

  const auto golden = fixture_path("golden/run_char_005_vlm.json");
  const auto& produced = a.at("results/vlm/char_005.json");
  if (std::getenv("OBS_UPDATE_GOLDEN")) write_file_atomic(golden, produced);
  CHECK(produced == read_file_text(golden));
}

TEST_CASE("a missing image fails one character and the run continues") {
  PipelineWorkspace ws;
  fs::remove(ws.root() / "corpus/annotations/char_008.png");
  auto args = ws.run_args("out");
  args.insert(args.end(), {"--characters", "char_005,char_008,char_011"});
  const auto r = obs_cmd(args);
  CHECK(r.code == 0);
  CHECK(r.err.find("warning") != std::string::npos);
  const auto doc = r.json();
  CHECK(doc["results"]["vlm"] == 2);
  CHECK(doc["failures"] == 1);
  const auto manifest = json::parse(read_file_text(ws.path("out/run_manifest.json")));
  REQUIRE(manifest["failures"].size() == 1);
  CHECK(manifest["failures"][0]["character_id"] == "char_008");
  CHECK(manifest["failures"][0]["code"] == "IoFailure");
  CHECK_FALSE(fs::exists(ws.root() / "out/results/vlm/char_008.json"));

  args.back() = "char_005,char_404";
  const auto unknown = obs_cmd(args);
  CHECK(unknown.code == 0);
  CHECK(unknown.json()["failures"] == 1);
}

TEST_CASE("run manifest records attribution and the token ratio") {
  PipelineWorkspace ws;
  auto args = ws.run_args("both");
  args.insert(args.end(), {"--mode", "both"});
  const auto r = obs_cmd(args);
  REQUIRE(r.code == 0);
  const auto m = json::parse(read_file_text(ws.path("both/run_manifest.json")));
  CHECK(m["inputs"]["model_sha256"] == sha256_hex(read_file_text(ws.path("model.bin"))));
  CHECK(m["inputs"]["graph_sha256"] == sha256_hex(read_file_text(ws.path("graph.ldjson"))));
  CHECK(m["inputs"]["manifest_sha256"] == sha256_hex(read_file_text(ws.path("test.ldjson"))));
  CHECK(m["inputs"]["graph_source_split"] == sha256_hex(read_file_text(ws.path("train.ldjson"))));
  CHECK(m["backends"]["chat"] == "mock-vlm");
  CHECK(m["template_ids"].size() >= 3);
  CHECK(m["results"]["vlm"].size() == m["results"]["multi_agent"].size());
  CHECK(m["token_ratio_multi_agent_to_vlm"].get<double>() > 1.0);
  CHECK(m["config"].dump().find("key") == std::string::npos);
}

TEST_CASE("parallel workers produce the same interpretations") {
  PipelineWorkspace ws;
  auto serial = ws.run_args("serial");
  auto parallel = ws.run_args("parallel");
  parallel.insert(parallel.end(), {"--workers", "4"});
  REQUIRE(obs_cmd(serial).code == 0);
  REQUIRE(obs_cmd(parallel).code == 0);
  for (const auto& e : fs::directory_iterator(ws.root() / "serial/results/vlm")) {
    const auto a = json::parse(read_file_text(e.path()));
    const auto b = json::parse(read_file_text(ws.root() / "parallel/results/vlm" / e.path().filename()));
    CHECK(a["interpretation"] == b["interpretation"]);
    CHECK(a["inscription_type"] == b["inscription_type"]);
  }
}

TEST_CASE("evaluate, eval-topk, query and agreement commands") {
  PipelineWorkspace ws;
  REQUIRE(obs_cmd(ws.run_args("run")).code == 0);
  const auto r = obs_cmd({"evaluate", "--results", ws.path("run/results/vlm"), "--gold", ws.path("corpus.ldjson"),
                          "--metrics", "rouge1,mover,judge", "--mock", "--out", ws.path("report.json")});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("mean") != std::string::npos);
  const auto rep = json::parse(read_file_text(ws.path("report.json")));
  REQUIRE(rep["per_item"].size() == 10);
  for (const auto* metric : {"rouge1", "mover", "judge"}) {
    double sum = 0;
    for (const auto& item : rep["per_item"]) sum += item["scores"][metric].get<double>();
    CHECK(rep["aggregate"][metric].get<double>() == doctest::Approx(sum / 10).epsilon(1e-12));
  }
  CHECK_FALSE(rep["aggregate"].contains("embedding_f1"));

  const auto topk = obs_cmd({"eval-topk", "--model", ws.path("model.bin"), "--manifest", ws.path("test.ldjson"), "--ks",
                             "5,1,3", "--out", ws.path("topk.json")});
  REQUIRE(topk.code == 0);
  const auto acc = topk.json()["accuracy"];
  CHECK(acc["acc@1"].get<double>() <= acc["acc@3"].get<double>());
  CHECK(acc["acc@3"].get<double>() <= acc["acc@5"].get<double>());
  CHECK(json::parse(read_file_text(ws.path("topk.json"))) == topk.json());

  const auto q = obs_cmd({"query", "--graph", ws.path("graph.ldjson"), "--tool", "component_explanation", "--arg", "hand"});
  REQUIRE(q.code == 0);
  CHECK(q.json()["result"]["explanation"] == "A hand with fingers; marks grasping or doing.");
  CHECK(obs_cmd({"query", "--graph", ws.path("graph.ldjson"), "--tool", "characters_by_component", "--arg", "nope"}).code == 1);

  write_file_atomic(ws.path("ratings.csv"), "item,r1,r2\na,1,1\nb,3,3\nc,5,5\n");
  const auto ag = obs_cmd({"agreement", "--ratings", ws.path("ratings.csv"), "--stat", "alpha"});
  REQUIRE(ag.code == 0);
  CHECK(ag.json()["value"] == 1.0);
  const auto icc = obs_cmd({"agreement", "--ratings", ws.path("ratings.csv"), "--stat", "icc3"});
  CHECK(icc.json()["value"].get<double>() == doctest::Approx(1.0));
}
