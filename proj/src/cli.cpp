#include "obs/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "obs/error.hpp"
#include "obs/evaluation.hpp"
#include "obs/pipeline.hpp"
#include "obs/util.hpp"

namespace obs {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kSchemaVersion = 1;

json versioned(json doc) {
  json out{{"schema_version", kSchemaVersion}};
  out.update(doc);
  return out;
}

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto item = trim(std::string_view(text).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (!item.empty()) {
      std::size_t k = 0;
      const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), k);
      if (ec != std::errc() || ptr != item.data() + item.size() || k == 0) {
        throw Error(ErrorCode::MalformedInput, "k values must be positive integers, got '" + item + "'");
      }
      ks.push_back(k);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (ks.empty()) throw Error(ErrorCode::MalformedInput, "no k values given");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  return ks;
}

std::vector<std::string> parse_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    auto item = trim(std::string_view(text).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<LabeledEmbedding> embed_components(const Corpus& corpus, const EmbeddingProvider& provider) {
  std::vector<LabeledEmbedding> out;
  out.reserve(corpus.components.size());
  for (const auto& c : corpus.components) out.push_back({c.label, provider.embed_image(read_file_bytes(c.image_ref))});
  return out;
}

std::string file_sha256(const fs::path& path) { return sha256_hex(std::span<const std::byte>(read_file_bytes(path))); }

void emit(std::ostream& out, const json& doc) { out << doc.dump(2) << '\n'; }

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, doc.dump(2) + "\n");
}

/// Flag values that override the layered configuration.
struct Overrides {
  std::optional<std::string> lang, mode, metrics, embed_url, chat_model, replay;
  std::optional<std::size_t> workers, top_k;
  bool mock = false;
};

void add_backend_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_flag("--mock", o.mock, "Use deterministic offline backends");
  cmd->add_option("--replay", o.replay, "Answer chat requests from a recorded fixture");
  cmd->add_option("--chat-model", o.chat_model, "Model name sent to the chat backend");
}

PipelineConfig layered_config(const std::string& config_file, const EnvLookup& env, const Overrides& o) {
  PipelineConfig c;
  if (!config_file.empty()) {
    const auto doc = json::parse(read_file_text(config_file), nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorCode::ConfigError, "config file is not valid JSON");
    c.apply_json(doc);
  }
  c.apply_env(env);
  json flags = json::object();
  if (o.lang) flags["lang"] = *o.lang;
  if (o.mode) flags["mode"] = *o.mode;
  if (o.metrics) flags["metrics"] = *o.metrics;
  if (o.embed_url) flags["embed_url"] = *o.embed_url;
  if (o.chat_model) flags["chat_model"] = *o.chat_model;
  if (o.replay) flags["replay"] = *o.replay;
  if (o.workers) flags["workers"] = *o.workers;
  if (o.top_k) flags["top_k"] = *o.top_k;
  if (o.mock) flags["mock"] = true;
  c.apply_json(flags);
  c.validate();
  return c;
}

std::shared_ptr<const EmbeddingProvider> provider_for(const PipelineConfig& c) {
  return make_embedding_provider(c.embed_url, c.embed_dim, c.max_in_flight, c.timeout_seconds);
}

json stats_json(const CorpusStats& s) {
  return {{"character_images", s.character_images},
          {"unique_characters", s.unique_characters},
          {"component_images", s.component_images},
          {"distinct_components", s.distinct_components}};
}

json prediction_json(const RankedPrediction& p) {
  json arr = json::array();
  for (const auto& e : p.entries) arr.push_back({{"label", e.label}, {"distance", e.distance}});
  return arr;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const EnvLookup& env_in) {
  const EnvLookup env = env_in ? env_in : EnvLookup([](const char* k) { return std::getenv(k); });

  CLI::App app{"Oracle bone script decipherment pipeline", "obs"};
  app.require_subcommand(1);
  std::string config_file;
  app.add_option("--config", config_file, "JSON config file (flags > env > file > defaults)");
  Overrides ov;
  std::function<void()> action;

  // ingest
  std::string ann_dir, vocab_file, metadata_file, out_path;
  auto* ingest = app.add_subcommand("ingest", "Validate annotations and write a corpus manifest");
  ingest->add_option("--annotations", ann_dir, "Directory of LabelMe JSON files")->required();
  ingest->add_option("--vocab", vocab_file, "Component vocabulary, one label per line")->required();
  ingest->add_option("--metadata", metadata_file, "Per-character metadata (LDJSON)");
  ingest->add_option("--out", out_path, "Manifest to write")->required();
  ingest->callback([&] {
    action = [&] {
      const auto vocab = parse_vocabulary(read_file_text(vocab_file));
      std::map<std::string, CharacterMetadata, std::less<>> meta;
      if (!metadata_file.empty()) meta = parse_metadata(read_file_text(metadata_file));
      const auto corpus = ingest_directory(ann_dir, vocab, meta);
      if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
      save_manifest(out_path, corpus);
      emit(out, versioned({{"manifest", out_path}, {"sha256", file_sha256(out_path)}, {"stats", stats_json(corpus_stats(corpus))}}));
    };
  });

  // stats
  std::string manifest_path;
  auto* stats = app.add_subcommand("stats", "Corpus counts for a manifest");
  stats->add_option("--manifest", manifest_path, "Corpus manifest")->required();
  stats->callback([&] {
    action = [&] { emit(out, versioned(stats_json(corpus_stats(load_manifest(manifest_path))))); };
  });

  // split
  double ratio = 0.7;
  std::uint64_t seed = 0;
  std::string unit_text = "by_component_class", out_train, out_test;
  auto* split = app.add_subcommand("split", "Deterministic train/test split");
  split->add_option("--manifest", manifest_path, "Corpus manifest")->required();
  split->add_option("--ratio", ratio, "Train fraction")->capture_default_str();
  split->add_option("--seed", seed, "Shuffle seed")->capture_default_str();
  split->add_option("--unit", unit_text, "by_component_class or by_character")->capture_default_str();
  split->add_option("--out-train", out_train, "Train manifest")->required();
  split->add_option("--out-test", out_test, "Test manifest")->required();
  split->callback([&] {
    action = [&] {
      const auto unit = parse_split_unit(unit_text);
      if (!unit) throw Error(ErrorCode::ConfigError, "unit must be by_component_class or by_character");
      const auto parts = split_corpus(load_manifest(manifest_path), ratio, seed, *unit);
      for (const auto& p : {out_train, out_test}) {
        if (fs::path(p).has_parent_path()) fs::create_directories(fs::path(p).parent_path());
      }
      save_manifest(out_train, parts.train);
      save_manifest(out_test, parts.test);
      emit(out, versioned({{"unit", to_string(*unit)},
                           {"ratio", ratio},
                           {"seed", seed},
                           {"train", {{"path", out_train}, {"sha256", file_sha256(out_train)}, {"stats", stats_json(corpus_stats(parts.train))}}},
                           {"test", {{"path", out_test}, {"sha256", file_sha256(out_test)}, {"stats", stats_json(corpus_stats(parts.test))}}}}));
    };
  });

  // train
  bool normalize = false;
  auto* train = app.add_subcommand("train", "Build class prototypes from component crops");
  train->add_option("--manifest", manifest_path, "Train manifest")->required();
  train->add_option("--out", out_path, "Model file")->required();
  train->add_flag("--normalize", normalize, "L2-normalize embeddings before averaging");
  train->add_option("--embed-url", ov.embed_url, "Embedding endpoint (default: OBS_EMBED_URL or offline stub)");
  train->callback([&] {
    action = [&] {
      const auto cfg = layered_config(config_file, env, ov);
      const auto provider = provider_for(cfg);
      const auto data = embed_components(load_manifest(manifest_path), *provider);
      const auto model = build_prototypes(data, provider->name(), normalize);
      if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
      save_model(out_path, model);
      emit(out, versioned({{"model", out_path},
                           {"sha256", file_sha256(out_path)},
                           {"classes", model.size()},
                           {"dim", model.dim()},
                           {"provider", model.provider_name()},
                           {"normalized", model.normalized()},
                           {"support", data.size()}}));
    };
  });

  // classify
  std::string model_path, image_path;
  std::size_t k = 5;
  auto* classify = app.add_subcommand("classify", "Top-k component labels for one image");
  classify->add_option("--model", model_path, "Model file")->required();
  classify->add_option("--image", image_path, "Component image")->required();
  classify->add_option("--k", k, "Number of labels")->capture_default_str();
  classify->add_option("--embed-url", ov.embed_url, "Embedding endpoint");
  classify->callback([&] {
    action = [&] {
      const auto cfg = layered_config(config_file, env, ov);
      const auto provider = provider_for(cfg);
      const auto model = load_model(model_path, provider->name());
      const auto pred = classify_topk(model, provider->embed_image(read_file_bytes(image_path)), k);
      emit(out, versioned({{"image", image_path}, {"predictions", prediction_json(pred)}}));
    };
  });

  // eval-topk
  std::string ks_text = "1,3,5";
  auto* eval_topk = app.add_subcommand("eval-topk", "ACC@k of a model on a test manifest");
  eval_topk->add_option("--model", model_path, "Model file")->required();
  eval_topk->add_option("--manifest", manifest_path, "Test manifest")->required();
  eval_topk->add_option("--ks", ks_text, "Comma-separated k values")->capture_default_str();
  eval_topk->add_option("--out", out_path, "Report file");
  eval_topk->add_option("--embed-url", ov.embed_url, "Embedding endpoint");
  eval_topk->callback([&] {
    action = [&] {
      const auto cfg = layered_config(config_file, env, ov);
      const auto provider = provider_for(cfg);
      const auto model = load_model(model_path, provider->name());
      const auto ks = parse_ks(ks_text);
      const auto test = embed_components(load_manifest(manifest_path), *provider);
      if (test.empty()) throw Error(ErrorCode::EmptyTestSet, "test manifest has no component images");
      json acc = json::object();
      for (const auto& [kk, v] : evaluate_topk(model, test, ks)) acc["acc@" + std::to_string(kk)] = v;
      const auto doc = versioned({{"model_sha256", file_sha256(model_path)},
                                  {"manifest_sha256", file_sha256(manifest_path)},
                                  {"provider", provider->name()},
                                  {"n", test.size()},
                                  {"accuracy", acc}});
      if (!out_path.empty()) write_json(out_path, doc);
      emit(out, doc);
    };
  });

  // build-kg
  std::string explanations_file;
  auto* build_kg = app.add_subcommand("build-kg", "Build the component-character knowledge graph");
  build_kg->add_option("--manifest", manifest_path, "Train manifest")->required();
  build_kg->add_option("--explanations", explanations_file, "JSON object of component explanations");
  build_kg->add_option("--out", out_path, "Graph file")->required();
  build_kg->callback([&] {
    action = [&] {
      std::map<std::string, std::string, std::less<>> expl;
      if (!explanations_file.empty()) expl = parse_explanations(read_file_text(explanations_file));
      const auto graph = build_graph(load_manifest(manifest_path), expl, file_sha256(manifest_path));
      if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
      save_graph(graph, out_path);
      emit(out, versioned({{"graph", out_path},
                           {"sha256", file_sha256(out_path)},
                           {"nodes", graph.nodes().size()},
                           {"edges", graph.edges().size()},
                           {"source_split", graph.source_split()}}));
    };
  });

  // query
  std::string graph_path, tool, arg;
  auto* query = app.add_subcommand("query", "Run one graph tool");
  query->add_option("--graph", graph_path, "Graph file")->required();
  query->add_option("--tool", tool, "component_explanation, characters_by_component, variant_lookup or modern_mapping")
      ->required()
      ->check(CLI::IsMember({"component_explanation", "characters_by_component", "variant_lookup", "modern_mapping"}));
  query->add_option("--arg", arg, "Component label or character id")->required();
  query->callback([&] {
    action = [&] {
      const auto graph = load_graph(graph_path);
      json result;
      if (tool == "component_explanation") {
        const auto e = graph.component_explanation(arg);
        result = {{"node_id", e.node_id}, {"explanation", e.explanation}};
      } else if (tool == "characters_by_component") {
        result = json::array();
        for (const auto& c : graph.characters_by_component(arg)) {
          result.push_back({{"character_id", c.character_id}, {"interpretation", c.interpretation}, {"co_components", c.co_components}});
        }
      } else if (tool == "variant_lookup") {
        result = graph.variant_lookup(arg);
      } else {
        const auto m = graph.modern_mapping(arg);
        result = m ? json(*m) : json(nullptr);
      }
      emit(out, versioned({{"tool", tool}, {"arg", arg}, {"result", result}}));
    };
  });

  // interpret
  bool dump_evidence = false;
  std::string character_id;
  auto* interpret = app.add_subcommand("interpret", "Interpret one inscription image");
  interpret->add_option("--graph", graph_path, "Graph file")->required();
  interpret->add_option("--model", model_path, "Model file")->required();
  interpret->add_option("--image", image_path, "Inscription image")->required();
  interpret->add_option("--mode", ov.mode, "vlm or multi_agent")->check(CLI::IsMember({"vlm", "multi_agent"}));
  interpret->add_option("--lang", ov.lang, "zh or en")->check(CLI::IsMember({"zh", "en"}));
  interpret->add_option("--out", out_path, "Result file");
  interpret->add_option("--character-id", character_id, "Reference recorded in the result (default: image stem)");
  interpret->add_option("--top-k", ov.top_k, "Predicted components passed on");
  interpret->add_flag("--dump-evidence", dump_evidence, "Print the evidence bundle");
  add_backend_flags(interpret, ov);
  interpret->callback([&] {
    action = [&] {
      const auto cfg = layered_config(config_file, env, ov);
      if (cfg.mode == "both") throw Error(ErrorCode::ConfigError, "interpret takes one mode: vlm or multi_agent");
      auto backends = make_backends(cfg);
      const auto provider = provider_for(cfg);
      const auto model = load_model(model_path, provider->name());
      const auto graph = load_graph(graph_path);
      const auto image = read_file_bytes(image_path);
      const auto predicted = classify_topk(model, provider->embed_image(image), cfg.top_k);
      SemanticCache cache(cfg.retrieval.cache_capacity, cfg.retrieval.cache_threshold, provider);
      const auto ref = character_id.empty() ? fs::path(image_path).stem().string() : character_id;
      const auto result = interpret_character(cfg, backends, &graph, image, predicted, cfg.mode, &cache, ref);
      json doc{{"schema_version", kSchemaVersion}};
      doc.update(to_json(result));
      if (dump_evidence && result.evidence) out << serialize_bundle(*result.evidence) << '\n';
      if (!out_path.empty()) {
        write_json(out_path, doc);
        if (!dump_evidence) emit(out, versioned({{"result", out_path}, {"inscription_type", doc["inscription_type"]}}));
      } else {
        emit(out, doc);
      }
    };
  });

  // evaluate
  std::string results_dir, gold_path;
  auto* evaluate = app.add_subcommand("evaluate", "Score interpretation results against gold references");
  evaluate->add_option("--results", results_dir, "Directory of result JSON files")->required();
  evaluate->add_option("--gold", gold_path, "Gold corpus manifest")->required();
  evaluate->add_option("--metrics", ov.metrics, "Comma-separated: rouge1, embedding_f1, mover, judge");
  evaluate->add_option("--lang", ov.lang, "Tokenizer language: zh or en")->check(CLI::IsMember({"zh", "en"}));
  evaluate->add_option("--out", out_path, "Report file");
  evaluate->add_option("--embed-url", ov.embed_url, "Embedding endpoint");
  add_backend_flags(evaluate, ov);
  evaluate->callback([&] {
    action = [&] {
      const auto cfg = layered_config(config_file, env, ov);
      std::vector<fs::path> files;
      if (!fs::is_directory(results_dir)) throw Error(ErrorCode::IoFailure, "no results directory " + results_dir);
      for (const auto& entry : fs::directory_iterator(results_dir)) {
        if (entry.path().extension() == ".json" && entry.path().filename() != "run_manifest.json") files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      std::vector<InterpretationResult> results;
      std::set<std::string> template_ids, backend_names;
      for (const auto& f : files) {
        const auto doc = json::parse(read_file_text(f), nullptr, false);
        if (doc.is_discarded()) throw Error(ErrorCode::MalformedInput, "result file is not JSON: " + f.string());
        results.push_back(result_from_json(doc));
        template_ids.insert(results.back().template_ids.begin(), results.back().template_ids.end());
        backend_names.insert(results.back().backend_names.begin(), results.back().backend_names.end());
      }
      const auto gold = load_manifest(gold_path);
      const auto provider = provider_for(cfg);
      std::optional<Backends> backends;
      EvaluationConfig ec;
      ec.metrics = cfg.metrics;
      ec.lang = cfg.lang;
      ec.provider = provider.get();
      ec.judge_model = cfg.judge_model;
      if (ec.metrics.contains("judge")) {
        backends = make_backends(cfg);
        ec.judge = backends->chat.get();
      }
      ec.metadata = {{"gold_sha256", file_sha256(gold_path)},
                     {"result_template_ids", template_ids},
                     {"result_backends", backend_names},
                     {"items", results.size()}};
      const auto report = evaluate_run(results, gold.characters, ec);
      if (!out_path.empty()) {
        write_json(out_path, report.doc);
        out << report.table;
      } else {
        emit(out, report.doc);
      }
    };
  });

  // agreement
  std::string ratings_path, stat, level_text = "ordinal";
  auto* agreement = app.add_subcommand("agreement", "Inter-rater agreement over an items x raters CSV");
  agreement->add_option("--ratings", ratings_path, "Ratings CSV")->required();
  agreement->add_option("--stat", stat, "icc3 or alpha")->required()->check(CLI::IsMember({"icc3", "alpha"}));
  agreement->add_option("--level", level_text, "Alpha distance: ordinal or interval")
      ->capture_default_str()
      ->check(CLI::IsMember({"ordinal", "interval"}));
  agreement->callback([&] {
    action = [&] {
      const auto m = parse_ratings_csv(read_file_text(ratings_path));
      json doc{{"stat", stat}, {"items", m.items()}, {"raters", m.raters()}};
      AgreementResult r;
      if (stat == "icc3") {
        r = icc3(m);
      } else {
        r = krippendorff_alpha(m, *parse_alpha_level(level_text));
        doc["level"] = level_text;
      }
      doc["value"] = r.value;
      doc["degenerate"] = r.degenerate;
      emit(out, versioned(doc));
    };
  });

  // run
  std::string characters_text, out_dir;
  std::size_t limit = 0;
  auto* run = app.add_subcommand("run", "End-to-end pipeline over the characters of a manifest");
  run->add_option("--manifest", manifest_path, "Manifest of characters to interpret")->required();
  run->add_option("--model", model_path, "Model file")->required();
  run->add_option("--graph", graph_path, "Graph file")->required();
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--mode", ov.mode, "vlm, multi_agent or both")->check(CLI::IsMember({"vlm", "multi_agent", "both"}));
  run->add_option("--lang", ov.lang, "zh or en")->check(CLI::IsMember({"zh", "en"}));
  run->add_option("--workers", ov.workers, "Concurrent characters");
  run->add_option("--top-k", ov.top_k, "Predicted components passed on");
  run->add_option("--characters", characters_text, "Comma-separated character ids (default: all)");
  run->add_option("--limit", limit, "Process at most this many characters");
  run->add_option("--embed-url", ov.embed_url, "Embedding endpoint");
  add_backend_flags(run, ov);
  run->callback([&] {
    action = [&] {
      const auto cfg = layered_config(config_file, env, ov);
      auto backends = make_backends(cfg);
      const auto provider = provider_for(cfg);
      const auto corpus = load_manifest(manifest_path);
      const auto model = load_model(model_path, provider->name());
      const auto graph = load_graph(graph_path);
      std::vector<std::string> ids = parse_list(characters_text);
      if (ids.empty()) {
        for (const auto& c : corpus.characters) ids.push_back(c.character_id);
      }
      if (limit > 0 && ids.size() > limit) ids.resize(limit);
      RunInputs in{&corpus, &model, &graph, provider, file_sha256(manifest_path), file_sha256(model_path),
                   file_sha256(graph_path)};
      const auto outcome = run_pipeline(cfg, in, backends, ids, fs::path(out_dir));
      json counts = json::object();
      for (const auto& [mode, rs] : outcome.results) counts[mode] = rs.size();
      json doc{{"run_manifest", (fs::path(out_dir) / "run_manifest.json").string()},
               {"manifest_hash", outcome.manifest_hash},
               {"results", counts},
               {"failures", outcome.failures.size()}};
      if (outcome.manifest.contains("token_ratio_multi_agent_to_vlm")) {
        doc["token_ratio_multi_agent_to_vlm"] = outcome.manifest["token_ratio_multi_agent_to_vlm"];
      }
      if (!outcome.failures.empty()) {
        err << "warning: " << outcome.failures.size() << " character run(s) failed; see run_manifest.json\n";
        for (const auto& f : outcome.failures) {
          err << "  " << f.character_id << " [" << f.mode << "] " << to_string(f.code) << ": " << f.message << '\n';
        }
      }
      emit(out, versioned(doc));
    };
  });

  std::vector<std::string> argv_storage{"obs"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_storage) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    err << failing->help();
    return 2;
  }

  try {
    if (action) action();
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what();
    if (e.location()) err << " (at " << *e.location() << ")";
    err << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace obs
