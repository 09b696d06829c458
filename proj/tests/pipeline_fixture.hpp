#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "obs/cli.hpp"
#include "test_support.hpp"

struct CommandResult {
  int code = 0;
  std::string out;
  std::string err;

  nlohmann::json json() const { return nlohmann::json::parse(out); }
};

/// No OBS_* variables, so runs never depend on the host environment.
inline const char* empty_env(const char*) { return nullptr; }

inline CommandResult obs_cmd(const std::vector<std::string>& args, const obs::EnvLookup& env = empty_env) {
  std::ostringstream out, err;
  CommandResult r;
  r.code = obs::run_command(args, out, err, env);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// The mini corpus copied to scratch space, ingested, split 70/30 by
/// character, with a trained model and a knowledge graph on the train side.
class PipelineWorkspace {
public:
  explicit PipelineWorkspace(std::uint64_t seed = 0) {
    namespace fs = std::filesystem;
    const auto src = fixture_path("mini_corpus");
    fs::copy(src, root() / "corpus", fs::copy_options::recursive);
    const auto c = (root() / "corpus").string();
    ok(obs_cmd({"ingest", "--annotations", c + "/annotations", "--vocab", c + "/vocab.txt", "--metadata",
                c + "/metadata.ldjson", "--out", path("corpus.ldjson")}));
    ok(obs_cmd({"split", "--manifest", path("corpus.ldjson"), "--unit", "by_character", "--ratio", "0.7", "--seed",
                std::to_string(seed), "--out-train", path("train.ldjson"), "--out-test", path("test.ldjson")}));
    ok(obs_cmd({"train", "--manifest", path("train.ldjson"), "--out", path("model.bin")}));
    ok(obs_cmd({"build-kg", "--manifest", path("train.ldjson"), "--explanations", c + "/explanations.json", "--out",
                path("graph.ldjson")}));
  }

  const std::filesystem::path& root() const { return dir_.path(); }
  std::string path(const std::string& name) const { return (root() / name).string(); }

  std::vector<std::string> run_args(const std::string& out_dir) const {
    return {"run", "--mock", "--manifest", path("test.ldjson"), "--model", path("model.bin"), "--graph",
            path("graph.ldjson"), "--out", path(out_dir)};
  }

private:
  static void ok(const CommandResult& r) {
    if (r.code != 0) throw std::runtime_error("workspace setup failed: " + r.err);
  }
  TempDir dir_;
};
