#include "obs/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

#include "obs/error.hpp"
#include "obs/evaluation.hpp"
#include "obs/util.hpp"

namespace obs {

using nlohmann::json;

namespace {

const std::set<std::string> kModes{"vlm", "multi_agent", "both"};

std::set<std::string> parse_metric_list(const json& v) {
  std::set<std::string> out;
  if (v.is_string()) {
    const auto text = v.get<std::string>();
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto comma = text.find(',', start);
      const auto item = trim(std::string_view(text).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (!item.empty()) out.insert(item);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  } else {
    for (const auto& m : v) out.insert(m.get<std::string>());
  }
  return out;
}

bool is_secret_key(std::string_view key) {
  return key.find("key") != std::string_view::npos || key.find("token") != std::string_view::npos ||
         key.find("secret") != std::string_view::npos || key.find("password") != std::string_view::npos;
}

}  // namespace

void PipelineConfig::apply_json(const json& doc) {
  if (!doc.is_object()) throw Error(ErrorCode::ConfigError, "config must be a JSON object");
  for (const auto& [k, v] : doc.items()) {
    if (is_secret_key(k)) throw Error(ErrorCode::ConfigError, "secret '" + k + "' may only come from the environment");
    try {
      if (k == "lang") {
        const auto l = parse_language(v.get<std::string>());
        if (!l) throw Error(ErrorCode::ConfigError, "lang must be zh or en");
        lang = *l;
      } else if (k == "mode") {
        mode = v.get<std::string>();
      } else if (k == "top_k") {
        top_k = v.get<std::size_t>();
      } else if (k == "workers") {
        workers = v.get<std::size_t>();
      } else if (k == "chat_model") {
        chat_model = v.get<std::string>();
      } else if (k == "judge_model") {
        judge_model = v.get<std::string>();
      } else if (k == "temperature") {
        temperature = v.get<double>();
      } else if (k == "retriever_sees_image") {
        retriever_sees_image = v.get<bool>();
      } else if (k == "embed_dim") {
        embed_dim = v.get<int>();
      } else if (k == "max_in_flight") {
        max_in_flight = v.get<int>();
      } else if (k == "timeout_seconds") {
        timeout_seconds = v.get<int>();
      } else if (k == "metrics") {
        metrics = parse_metric_list(v);
      } else if (k == "retrieval") {
        auto merged = retrieval.to_json();
        if (!v.is_object()) throw Error(ErrorCode::ConfigError, "retrieval must be an object");
        for (const auto& [rk, rv] : v.items()) merged[rk] = rv;
        retrieval = RetrievalConfig::from_json(merged);
      } else if (k == "embed_url") {
        embed_url = v.get<std::string>();
      } else if (k == "chat_url") {
        chat_url = v.get<std::string>();
      } else if (k == "retriever_url") {
        retriever_url = v.get<std::string>();
      } else if (k == "reasoner_url") {
        reasoner_url = v.get<std::string>();
      } else if (k == "mock") {
        mock = v.get<bool>();
      } else if (k == "replay") {
        replay = v.get<std::string>();
      } else {
        throw Error(ErrorCode::ConfigError, "unknown config key '" + k + "'");
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ConfigError, "config key '" + k + "': " + e.what());
    }
  }
}

void PipelineConfig::apply_env(const std::function<const char*(const char*)>& getenv) {
  // Typed keys are parsed as JSON scalars; string keys are taken verbatim.
  static const std::vector<std::pair<const char*, const char*>> typed{
      {"OBS_TOP_K", "top_k"},         {"OBS_WORKERS", "workers"},
      {"OBS_TEMPERATURE", "temperature"}, {"OBS_EMBED_DIM", "embed_dim"},
      {"OBS_MAX_IN_FLIGHT", "max_in_flight"}, {"OBS_TIMEOUT_SECONDS", "timeout_seconds"},
      {"OBS_RETRIEVER_SEES_IMAGE", "retriever_sees_image"}};
  static const std::vector<std::pair<const char*, const char*>> strings{
      {"OBS_LANG", "lang"},           {"OBS_MODE", "mode"},
      {"OBS_CHAT_MODEL", "chat_model"}, {"OBS_JUDGE_MODEL", "judge_model"},
      {"OBS_METRICS", "metrics"},     {"OBS_EMBED_URL", "embed_url"},
      {"OBS_CHAT_URL", "chat_url"},   {"OBS_RETRIEVER_URL", "retriever_url"},
      {"OBS_REASONER_URL", "reasoner_url"}};
  json doc = json::object();
  for (const auto& [env, key] : typed) {
    const char* v = getenv(env);
    if (!v || !*v) continue;
    const auto parsed = json::parse(v, nullptr, false);
    if (parsed.is_discarded()) throw Error(ErrorCode::ConfigError, std::string(env) + " is not a valid value");
    doc[key] = parsed;
  }
  for (const auto& [env, key] : strings) {
    const char* v = getenv(env);
    if (v && *v) doc[key] = v;
  }
  apply_json(doc);
  if (const char* key = getenv("OBS_CHAT_KEY"); key && *key) chat_key = key;
}

void PipelineConfig::validate() const {
  if (!kModes.contains(mode)) throw Error(ErrorCode::ConfigError, "mode must be vlm, multi_agent or both");
  if (top_k == 0) throw Error(ErrorCode::ConfigError, "top_k must be positive");
  if (workers == 0) throw Error(ErrorCode::ConfigError, "workers must be positive");
  if (!(temperature >= 0.0 && temperature <= 2.0)) throw Error(ErrorCode::ConfigError, "temperature must be in [0, 2]");
  if (embed_dim <= 0) throw Error(ErrorCode::ConfigError, "embed_dim must be positive");
  if (max_in_flight <= 0) throw Error(ErrorCode::ConfigError, "max_in_flight must be positive");
  if (timeout_seconds <= 0) throw Error(ErrorCode::ConfigError, "timeout_seconds must be positive");
  for (const auto& m : metrics) {
    if (!known_metrics().contains(m)) throw Error(ErrorCode::ConfigError, "unknown metric '" + m + "'");
  }
  retrieval.validate();
}

json PipelineConfig::to_json() const {
  json doc{{"lang", to_string(lang)},
           {"mode", mode},
           {"top_k", top_k},
           {"workers", workers},
           {"chat_model", chat_model},
           {"judge_model", judge_model},
           {"temperature", temperature},
           {"retriever_sees_image", retriever_sees_image},
           {"embed_dim", embed_dim},
           {"metrics", metrics},
           {"retrieval", retrieval.to_json()},
           {"mock", mock}};
  if (embed_url) doc["embed_url"] = *embed_url;
  if (chat_url) doc["chat_url"] = *chat_url;
  if (retriever_url) doc["retriever_url"] = *retriever_url;
  if (reasoner_url) doc["reasoner_url"] = *reasoner_url;
  return doc;
}

Backends make_backends(const PipelineConfig& config) {
  Backends b;
  if (config.mock) {
    b.chat = std::make_shared<DeterministicMockBackend>("mock-vlm", true);
    b.retriever = std::make_shared<DeterministicMockBackend>("mock-retriever", true);
    b.reasoner = std::make_shared<DeterministicMockBackend>("mock-reasoner", false);
    return b;
  }
  if (config.replay) {
    b.chat = std::make_shared<ReplayBackend>(*config.replay, "replay");
    b.retriever = b.reasoner = b.chat;
    return b;
  }
  if (!config.chat_url) {
    throw Error(ErrorCode::BackendUnavailable, "backend not configured: set OBS_CHAT_URL or pass --mock");
  }
  const auto key = config.chat_key.value_or("");
  auto http = [&](const std::string& url) {
    return std::make_shared<HttpChatBackend>(url, key, true, config.max_in_flight, config.timeout_seconds);
  };
  b.chat = http(*config.chat_url);
  b.retriever = config.retriever_url ? http(*config.retriever_url) : b.chat;
  b.reasoner = config.reasoner_url ? http(*config.reasoner_url) : b.chat;
  return b;
}

RankedPrediction predict_components(const ClassifierModel& model, const EmbeddingProvider& provider,
                                    const Corpus& corpus, const CharacterRecord& character, std::size_t k) {
  std::map<std::string, double> best;
  auto merge = [&](const RankedPrediction& p) {
    for (const auto& e : p.entries) {
      auto [it, inserted] = best.emplace(e.label, e.distance);
      if (!inserted) it->second = std::min(it->second, e.distance);
    }
  };
  bool any_crop = false;
  for (const auto& c : corpus.components) {
    if (c.source_character_id != character.character_id) continue;
    any_crop = true;
    merge(classify_topk(model, provider.embed_image(read_file_bytes(c.image_ref)), model.size()));
  }
  if (!any_crop) merge(classify_topk(model, provider.embed_image(read_file_bytes(character.image_ref)), model.size()));

  RankedPrediction out;
  for (const auto& [label, d] : best) out.entries.push_back({label, d});
  std::stable_sort(out.entries.begin(), out.entries.end(),
                   [](const RankedEntry& a, const RankedEntry& b) { return a.distance < b.distance; });
  if (out.entries.size() > k) out.entries.resize(k);
  return out;
}

namespace {

struct Job {
  std::map<std::string, std::optional<InterpretationResult>> results;
  std::vector<CharacterFailure> failures;
};

void fold_type(InterpretationResult& res, const TypeInference& type) {
  res.inscription_type = type.type;
  res.type_retried = type.retried;
  res.token_usage += type.usage;
  res.usage_by_agent["type_inference"] = type.usage;
  res.template_ids.insert(res.template_ids.begin(), type.template_id);
  if (!type.reasoning.empty()) {
    res.reasoning_trace = res.reasoning_trace.empty() ? type.reasoning : type.reasoning + "\n" + res.reasoning_trace;
  }
}

void add_backend(InterpretationResult& res, const std::string& name) {
  if (std::find(res.backend_names.begin(), res.backend_names.end(), name) == res.backend_names.end()) {
    res.backend_names.push_back(name);
  }
}

InterpretationResult run_one(const PipelineConfig& config, const RunInputs& in, Backends& backends,
                             const CharacterRecord& ch, const std::string& mode, SemanticCache& cache) {
  const auto image = read_file_bytes(ch.image_ref);
  const auto predicted = predict_components(*in.model, *in.provider, *in.characters, ch, config.top_k);
  return interpret_character(config, backends, in.graph, image, predicted, mode, &cache, ch.character_id);
}

std::size_t interpretation_tokens(const InterpretationResult& r) {
  std::size_t total = r.token_usage.total();
  if (auto it = r.usage_by_agent.find("type_inference"); it != r.usage_by_agent.end()) total -= it->second.total();
  return total;
}

json result_document(const InterpretationResult& r) {
  json doc{{"schema_version", 1}};
  doc.update(to_json(r));
  return doc;
}

}  // namespace

InterpretationResult interpret_character(const PipelineConfig& config, Backends& backends, const KnowledgeGraph* graph,
                                         const Bytes& image, const RankedPrediction& predicted,
                                         const std::string& mode, SemanticCache* cache,
                                         const std::string& character_ref) {
  InferenceOptions opts{config.chat_model, config.temperature, config.lang, config.retriever_sees_image};
  auto with_image = [&](const ChatBackend& b) { return b.supports_images() ? std::optional<Bytes>(image) : std::nullopt; };

  if (mode == "vlm") {
    const auto bundle = retrieve_evidence(graph, predicted, cache, config.retrieval, character_ref);
    auto& chat = *backends.chat;
    const auto type = infer_relationship(chat, with_image(chat), predicted, bundle, opts);
    auto res = generate_interpretation_vlm(chat, image, predicted, bundle, opts);
    fold_type(res, type);
    return res;
  }
  if (mode != "multi_agent") throw Error(ErrorCode::ConfigError, "mode must be vlm or multi_agent");
  KnowledgeGraphTools tools(graph);
  auto res = generate_interpretation_multiagent(*backends.retriever, *backends.reasoner, image, tools, predicted, cache,
                                                config.retrieval, opts, character_ref);
  auto& reasoner = *backends.reasoner;
  const auto type = infer_relationship(reasoner, with_image(reasoner), predicted, res.evidence.value_or(EvidenceBundle{}), opts);
  fold_type(res, type);
  add_backend(res, reasoner.name());
  return res;
}

RunOutcome run_pipeline(const PipelineConfig& config, const RunInputs& in, Backends& backends,
                        const std::vector<std::string>& character_ids,
                        const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  if (!in.characters || !in.model || !in.graph || !in.provider) {
    throw Error(ErrorCode::ConfigError, "pipeline inputs are incomplete");
  }
  const std::vector<std::string> modes =
      config.mode == "both" ? std::vector<std::string>{"vlm", "multi_agent"} : std::vector<std::string>{config.mode};

  std::map<std::string, const CharacterRecord*, std::less<>> by_id;
  for (const auto& c : in.characters->characters) by_id.emplace(c.character_id, &c);

  // One cache per mode so the two modes see the same cold start.
  std::map<std::string, std::unique_ptr<SemanticCache>> caches;
  for (const auto& m : modes) {
    caches[m] = std::make_unique<SemanticCache>(config.retrieval.cache_capacity, config.retrieval.cache_threshold,
                                                in.provider);
  }

  std::vector<Job> jobs(character_ids.size());
  auto work = [&](std::size_t i) {
    const auto& id = character_ids[i];
    auto it = by_id.find(id);
    for (const auto& m : modes) {
      try {
        if (it == by_id.end()) throw Error(ErrorCode::NotFound, "character " + id + " is not in the manifest");
        jobs[i].results[m] = run_one(config, in, backends, *it->second, m, *caches[m]);
      } catch (const Error& e) {
        jobs[i].failures.push_back({id, m, e.code(), e.what()});
      } catch (const std::exception& e) {
        jobs[i].failures.push_back({id, m, ErrorCode::IoFailure, e.what()});
      }
    }
  };
  const auto n_workers = std::min(config.workers, std::max<std::size_t>(1, character_ids.size()));
  if (n_workers <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) {
      pool.emplace_back([&] {
        for (auto i = next++; i < jobs.size(); i = next++) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  RunOutcome outcome;
  std::set<std::string> template_ids;
  json results_doc = json::object();
  json usage_doc = json::object();
  std::map<std::string, std::size_t> interp_tokens;
  for (const auto& m : modes) {
    json entries = json::array();
    TokenUsage total;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const auto& r = jobs[i].results[m];
      if (!r) continue;
      outcome.results[m].push_back(*r);
      template_ids.insert(r->template_ids.begin(), r->template_ids.end());
      total += r->token_usage;
      interp_tokens[m] += interpretation_tokens(*r);
      const auto bytes = result_document(*r).dump(2) + "\n";
      if (out_dir) {
        std::filesystem::create_directories(*out_dir / "results" / m);
        write_file_atomic(*out_dir / "results" / m / (r->character_ref + ".json"), bytes);
      }
      entries.push_back({{"character_ref", r->character_ref},
                         {"sha256", sha256_hex(bytes)},
                         {"inscription_type", r->inscription_type ? json(to_string(*r->inscription_type)) : json(nullptr)},
                         {"evidence_items", r->evidence ? r->evidence->items.size() : 0},
                         {"tool_calls", r->evidence ? r->evidence->trace.size() : 0}});
    }
    results_doc[m] = entries;
    usage_doc[m] = to_json(total);
  }
  json failures = json::array();
  for (const auto& job : jobs) {
    for (const auto& f : job.failures) {
      outcome.failures.push_back(f);
      failures.push_back({{"character_id", f.character_id},
                          {"mode", f.mode},
                          {"code", to_string(f.code)},
                          {"message", f.message}});
    }
  }

  json manifest{{"schema_version", 1},
                {"kind", "run_manifest"},
                {"stages", {"classify", "retrieve", "type_inference", "interpretation"}},
                {"config", config.to_json()},
                {"inputs",
                 {{"manifest_sha256", in.manifest_sha256},
                  {"model_sha256", in.model_sha256},
                  {"graph_sha256", in.graph_sha256},
                  {"graph_source_split", in.graph->source_split()},
                  {"model_provider", in.model->provider_name()},
                  {"embedding_provider", in.provider->name()}}},
                {"backends",
                 {{"chat", backends.chat->name()},
                  {"retriever", backends.retriever->name()},
                  {"reasoner", backends.reasoner->name()}}},
                {"template_ids", template_ids},
                {"characters", character_ids},
                {"results", results_doc},
                {"failures", failures},
                {"token_usage", usage_doc}};
  if (modes.size() == 2 && interp_tokens["vlm"] > 0) {
    manifest["token_ratio_multi_agent_to_vlm"] =
        static_cast<double>(interp_tokens["multi_agent"]) / static_cast<double>(interp_tokens["vlm"]);
  }
  const auto manifest_bytes = manifest.dump(2) + "\n";
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_file_atomic(*out_dir / "run_manifest.json", manifest_bytes);
  }
  outcome.manifest = std::move(manifest);
  outcome.manifest_hash = sha256_hex(manifest_bytes);
  return outcome;
}

InterpretationResult result_from_json(const json& doc) {
  try {
    InterpretationResult r;
    r.character_ref = doc.at("character_ref").get<std::string>();
    r.interpretation = doc.at("interpretation").get<std::string>();
    if (doc.contains("inscription_type") && !doc["inscription_type"].is_null()) {
      r.inscription_type = parse_inscription_type(doc["inscription_type"].get<std::string>());
      if (!r.inscription_type) throw Error(ErrorCode::SchemaViolation, "unknown inscription_type in result");
    }
    if (doc.contains("reasoning_trace")) r.reasoning_trace = doc["reasoning_trace"].get<std::string>();
    if (doc.contains("mode")) {
      const auto m = parse_inference_mode(doc["mode"].get<std::string>());
      if (m) r.mode = *m;
    }
    if (doc.contains("language")) {
      const auto l = parse_language(doc["language"].get<std::string>());
      if (l) r.language = *l;
    }
    if (doc.contains("template_ids")) r.template_ids = doc["template_ids"].get<std::vector<std::string>>();
    if (doc.contains("backend_names")) r.backend_names = doc["backend_names"].get<std::vector<std::string>>();
    if (doc.contains("evidence")) r.evidence = bundle_from_json(doc["evidence"]);
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("result file: ") + e.what());
  }
}

}  // namespace obs
