#include "obs/inference.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>

#include "obs/error.hpp"
#include "obs/prompts.hpp"

namespace obs {

using nlohmann::json;

std::string_view to_string(Language lang) { return lang == Language::Zh ? "zh" : "en"; }

std::optional<Language> parse_language(std::string_view text) {
  if (text == "zh") return Language::Zh;
  if (text == "en") return Language::En;
  return std::nullopt;
}

std::string_view to_string(InferenceMode mode) { return mode == InferenceMode::Vlm ? "vlm" : "multi_agent"; }

std::optional<InferenceMode> parse_inference_mode(std::string_view text) {
  if (text == "vlm") return InferenceMode::Vlm;
  if (text == "multi_agent" || text == "multi-agent") return InferenceMode::MultiAgent;
  return std::nullopt;
}

// --- response parsing ---

namespace {

enum class Marker { Type, Reason, Interpretation, Score };

struct Field {
  Marker marker;
  std::size_t line_start;
  std::size_t value_start;
  std::size_t value_end;  // end of the marker's own line
};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r'; }
bool is_decoration(char c) { return c == '*' || c == '#' || c == '>' || c == '_' || c == '`' || c == '-'; }

/// Matches a marker at `pos`, tolerating markdown such as `**TYPE:**`.
std::optional<std::pair<Marker, std::size_t>> match_marker(std::string_view raw, std::size_t pos, std::size_t end) {
  static constexpr std::pair<std::string_view, Marker> kMarkers[] = {
      {"type", Marker::Type},
      {"reason", Marker::Reason},
      {"interpretation", Marker::Interpretation},
      {"score", Marker::Score}};
  while (pos < end && (is_space(raw[pos]) || is_decoration(raw[pos]))) ++pos;
  for (const auto& [word, marker] : kMarkers) {
    if (end - pos < word.size()) continue;
    bool same = true;
    for (std::size_t i = 0; i < word.size() && same; ++i) {
      same = std::tolower(static_cast<unsigned char>(raw[pos + i])) == word[i];
    }
    if (!same) continue;
    auto p = pos + word.size();
    while (p < end && (raw[p] == '*' || raw[p] == '_')) ++p;
    if (p >= end || raw[p] != ':') continue;
    ++p;
    while (p < end && (is_space(raw[p]) || raw[p] == '*' || raw[p] == '_')) ++p;
    return std::make_pair(marker, p);
  }
  return std::nullopt;
}

std::vector<Field> scan_fields(std::string_view raw) {
  std::vector<Field> out;
  std::size_t pos = 0;
  while (pos <= raw.size()) {
    auto nl = raw.find('\n', pos);
    const auto end = nl == std::string_view::npos ? raw.size() : nl;
    if (auto m = match_marker(raw, pos, end)) out.push_back({m->first, pos, m->second, end});
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return out;
}

std::string trimmed(std::string_view s) { return trim(s); }

/// Value of field i, extended over following lines until the next marker.
std::string block_value(std::string_view raw, const std::vector<Field>& fields, std::size_t i) {
  const auto stop = i + 1 < fields.size() ? fields[i + 1].line_start : raw.size();
  return trimmed(raw.substr(fields[i].value_start, stop - fields[i].value_start));
}

std::string clean_type_value(std::string_view v) {
  std::string s = trimmed(v);
  auto strip = [](char c) { return c == '.' || c == '*' || c == '`' || c == '<' || c == '>' || c == '"' || c == '\''; };
  while (!s.empty() && strip(s.back())) s.pop_back();
  std::size_t start = 0;
  while (start < s.size() && strip(s[start])) ++start;
  return trimmed(std::string_view(s).substr(start));
}

Error unparseable(const std::string& what, std::size_t offset) {
  return Error(ErrorCode::UnparseableResponse, what, offset);
}

/// Text that is not inside any marker field.
std::string text_outside(std::string_view raw, const std::vector<Field>& fields) {
  std::string out;
  std::size_t pos = 0;
  for (const auto& f : fields) {
    out += raw.substr(pos, f.line_start - pos);
    pos = f.value_end;
  }
  if (pos < raw.size()) out += raw.substr(pos);
  return trimmed(out);
}

}  // namespace

ParsedResponse parse_model_response(std::string_view raw, ResponseKind expected) {
  if (trimmed(raw).empty()) throw unparseable("empty response", 0);
  const auto fields = scan_fields(raw);
  ParsedResponse out;

  auto first = [&](Marker m) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (fields[i].marker == m) return i;
    }
    return std::nullopt;
  };

  auto parse_type = [&](bool required) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (fields[i].marker != Marker::Type) continue;
      const auto value = clean_type_value(raw.substr(fields[i].value_start, fields[i].value_end - fields[i].value_start));
      const auto type = parse_inscription_type(value);
      if (!type) {
        if (!required) continue;
        throw unparseable("TYPE value '" + value + "' is not ideographic, pictographic or phono-semantic",
                          fields[i].value_start);
      }
      if (out.type && *out.type != *type) throw unparseable("conflicting TYPE values", fields[i].value_start);
      out.type = type;
    }
    if (required && !out.type) throw unparseable("missing TYPE: marker", raw.size());
  };

  switch (expected) {
    case ResponseKind::TypedClassification: {
      parse_type(true);
      if (auto r = first(Marker::Reason)) {
        out.reason = block_value(raw, fields, *r);
      } else {
        out.reason = text_outside(raw, fields);
      }
      break;
    }
    case ResponseKind::Interpretation: {
      parse_type(false);
      if (auto r = first(Marker::Reason)) out.reason = block_value(raw, fields, *r);
      if (auto i = first(Marker::Interpretation)) {
        out.interpretation = block_value(raw, fields, *i);
        if (out.interpretation.empty()) throw unparseable("empty INTERPRETATION", fields[*i].value_start);
      } else {
        out.interpretation = text_outside(raw, fields);
        if (out.interpretation.empty()) throw unparseable("missing INTERPRETATION: marker", raw.size());
      }
      break;
    }
    case ResponseKind::JudgeScore: {
      auto s = first(Marker::Score);
      std::size_t at = 0;
      if (s) {
        at = fields[*s].value_start;
      } else {
        // Tolerate "... Score: 0.7" inside a sentence.
        std::string lower(raw);
        std::transform(lower.begin(), lower.end(), lower.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        const auto k = lower.find("score:");
        if (k == std::string::npos) throw unparseable("missing Score: marker", raw.size());
        at = k + 6;
        while (at < raw.size() && is_space(raw[at])) ++at;
      }
      if (at < raw.size() && raw[at] == '[') ++at;
      double value = 0;
      const auto* begin = raw.data() + at;
      const auto* end = raw.data() + raw.size();
      if (begin == end || !std::isdigit(static_cast<unsigned char>(*begin))) {
        throw unparseable("Score is not a number", at);
      }
      auto [ptr, ec] = std::from_chars(begin, end, value, std::chars_format::fixed);
      if (ec != std::errc()) throw unparseable("Score is not a number", at);
      if (!(value >= 0.0 && value <= 1.0)) throw unparseable("Score outside [0, 1]", at);
      out.score = std::round(value * 100.0) / 100.0;
      break;
    }
  }
  return out;
}

// --- prompts ---

std::string render_predictions(const RankedPrediction& predicted, std::size_t limit) {
  std::string out;
  for (std::size_t i = 0; i < predicted.entries.size() && i < limit; ++i) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.4f", predicted.entries[i].distance);
    if (!out.empty()) out += '\n';
    out += "- " + predicted.entries[i].label + " [d=" + buf + "]";
  }
  return out;
}

namespace {

std::string template_for(std::string_view stem, Language lang) {
  return std::string(stem) + "_" + std::string(to_string(lang)) + "_v1";
}

std::string evidence_text(const EvidenceBundle& evidence) {
  const auto text = render_evidence(evidence);
  return text.empty() ? std::string(kNoEvidenceMarker) : trimmed(text);
}

std::string image_note(bool has_image, Language lang) {
  if (!has_image) return "";
  return lang == Language::Zh ? "字形图像已附上。" : " Its image is attached.";
}

std::vector<std::size_t> ranks_of(const EvidenceBundle& b) {
  std::vector<std::size_t> out;
  for (const auto& i : b.items) out.push_back(i.rank);
  return out;
}

ChatResponse call_agent(ChatBackend& backend, const ChatRequest& request, std::string_view agent) {
  try {
    return backend.complete(request);
  } catch (const Error& e) {
    throw Error(e.code(), std::string(agent) + " agent (" + backend.name() + "): " + e.what(), e.location());
  }
}

}  // namespace

TypeInference infer_relationship(ChatBackend& backend, const std::optional<Bytes>& image,
                                 const RankedPrediction& predicted, const EvidenceBundle& evidence,
                                 const InferenceOptions& options) {
  const bool with_image = image && !image->empty();
  if (with_image && !backend.supports_images()) {
    throw Error(ErrorCode::ImageRequiredButUnsupported, backend.name() + " cannot take the inscription image");
  }
  TypeInference out;
  out.template_id = template_for("type_inference", options.lang);
  const auto prompt = get_template(out.template_id)
                          .render({{"image_note", image_note(with_image, options.lang)},
                                   {"predicted", render_predictions(predicted)},
                                   {"evidence", evidence_text(evidence)}});
  ChatRequest req{options.model, options.temperature, {{"user", prompt, std::nullopt}}, "type_inference"};
  if (with_image) req.messages[0].image_b64 = base64_encode(*image);

  auto reply = backend.complete(req);
  out.usage += reply.usage;
  ParsedResponse parsed;
  try {
    parsed = parse_model_response(reply.content, ResponseKind::TypedClassification);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::UnparseableResponse) throw;
    out.retried = true;
    req.messages.push_back({"assistant", reply.content, std::nullopt});
    req.messages.push_back(
        {"user", get_template(template_for("type_retry", options.lang)).render({{"error", e.what()}}), std::nullopt});
    reply = backend.complete(req);
    out.usage += reply.usage;
    try {
      parsed = parse_model_response(reply.content, ResponseKind::TypedClassification);
    } catch (const Error& again) {
      throw Error(ErrorCode::UnparseableResponse, std::string("after corrective retry: ") + again.what(),
                  again.location());
    }
  }
  out.type = *parsed.type;
  out.reasoning = parsed.reason;
  return out;
}

InterpretationResult generate_interpretation_vlm(ChatBackend& backend, const Bytes& image,
                                                 const RankedPrediction& predicted, const EvidenceBundle& evidence,
                                                 const InferenceOptions& options) {
  if (image.empty()) throw Error(ErrorCode::EmptyInput, "VLM interpretation needs the inscription image");
  if (!backend.supports_images()) {
    throw Error(ErrorCode::ImageRequiredButUnsupported, backend.name() + " cannot take the inscription image");
  }
  InterpretationResult out;
  out.character_ref = evidence.character_ref;
  out.mode = InferenceMode::Vlm;
  out.language = options.lang;
  const auto tid = template_for("interpretation_vlm", options.lang);
  out.template_ids.push_back(tid);
  const auto prompt =
      get_template(tid).render({{"predicted", render_predictions(predicted)}, {"evidence", evidence_text(evidence)}});
  ChatRequest req{options.model, options.temperature, {{"user", prompt, base64_encode(image)}}, "interpretation"};

  const auto reply = backend.complete(req);
  const auto parsed = parse_model_response(reply.content, ResponseKind::Interpretation);
  out.interpretation = parsed.interpretation;
  out.reasoning_trace = parsed.reason;
  out.inscription_type = parsed.type;
  out.evidence_used = ranks_of(evidence);
  out.token_usage = reply.usage;
  out.usage_by_agent["vlm"] = reply.usage;
  out.backend_names.push_back(backend.name());
  out.evidence = evidence;
  return out;
}

std::optional<std::vector<ToolCall>> parse_plan(std::string_view raw) {
  std::vector<ToolCall> plan;
  for (const auto& line : split_lines(raw)) {
    auto l = trimmed(line);
    while (!l.empty() && is_decoration(l.front())) l = trimmed(std::string_view(l).substr(1));
    std::string head = l.substr(0, std::min<std::size_t>(5, l.size()));
    std::transform(head.begin(), head.end(), head.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (head != "CALL:") continue;
    const auto body = trimmed(std::string_view(l).substr(5));
    const auto open = body.find('(');
    if (open == std::string::npos || body.back() != ')') return std::nullopt;
    const auto tool = parse_tool_kind(trimmed(std::string_view(body).substr(0, open)));
    auto arg = trimmed(std::string_view(body).substr(open + 1, body.size() - open - 2));
    if (arg.size() >= 2 && (arg.front() == '"' || arg.front() == '\'') && arg.back() == arg.front()) {
      arg = arg.substr(1, arg.size() - 2);
    }
    if (!tool || arg.empty()) return std::nullopt;
    plan.push_back({*tool, arg, 0});
  }
  if (plan.empty()) return std::nullopt;
  return plan;
}

InterpretationResult generate_interpretation_multiagent(ChatBackend& retriever, ChatBackend& reasoner,
                                                        const std::optional<Bytes>& image, const GraphTools& tools,
                                                        const RankedPrediction& predicted, SemanticCache* cache,
                                                        const RetrievalConfig& config,
                                                        const InferenceOptions& options, std::string character_ref) {
  InterpretationResult out;
  out.character_ref = character_ref;
  out.mode = InferenceMode::MultiAgent;
  out.language = options.lang;

  const auto plan_tid = template_for("retriever_plan", options.lang);
  out.template_ids.push_back(plan_tid);
  ChatRequest plan_req{options.model,
                       options.temperature,
                       {{"user", get_template(plan_tid).render({{"predicted", render_predictions(predicted, config.top_m)}}),
                         std::nullopt}},
                       "planner"};
  if (options.retriever_sees_image && image && !image->empty()) {
    if (!retriever.supports_images()) {
      throw Error(ErrorCode::ImageRequiredButUnsupported, "retriever agent (" + retriever.name() + ") cannot take images");
    }
    plan_req.messages[0].image_b64 = base64_encode(*image);
  }
  const auto plan_reply = call_agent(retriever, plan_req, "retriever");
  auto plan = parse_plan(plan_reply.content);
  if (!plan) {
    out.plan_fallback = true;
    plan = default_plan(predicted, config);
  }
  EvidenceBundle bundle;
  try {
    bundle = retrieve_with_plan(tools, predicted, *plan, cache, config, std::move(character_ref));
  } catch (const Error& e) {
    throw Error(e.code(), std::string("retriever agent: ") + e.what(), e.location());
  }

  const auto reason_tid = template_for("reasoner", options.lang);
  out.template_ids.push_back(reason_tid);
  const auto evidence = bundle.items.empty() ? std::string(kNoEvidenceMarker) : serialize_bundle(bundle);
  ChatRequest reason_req{
      options.model,
      options.temperature,
      {{"user", get_template(reason_tid).render({{"predicted", render_predictions(predicted)}, {"evidence", evidence}}),
        std::nullopt}},
      "reasoner"};
  const auto reason_reply = call_agent(reasoner, reason_req, "reasoner");
  ParsedResponse parsed;
  try {
    parsed = parse_model_response(reason_reply.content, ResponseKind::Interpretation);
  } catch (const Error& e) {
    throw Error(e.code(), std::string("reasoner agent: ") + e.what(), e.location());
  }

  out.interpretation = parsed.interpretation;
  out.reasoning_trace = parsed.reason;
  out.inscription_type = parsed.type;
  out.evidence_used = ranks_of(bundle);
  out.usage_by_agent["retriever"] = plan_reply.usage;
  out.usage_by_agent["reasoner"] = reason_reply.usage;
  out.token_usage = plan_reply.usage;
  out.token_usage += reason_reply.usage;
  out.backend_names = {retriever.name(), reasoner.name()};
  out.evidence = std::move(bundle);
  return out;
}

ChatRequest make_judge_request(std::string_view reference, std::string_view candidate, const std::string& model) {
  ChatRequest req;
  req.model = model;
  req.temperature = 0.0;
  req.purpose = "judge";
  req.messages.push_back({"system", get_template("judge_system_v1").body(), std::nullopt});
  req.messages.push_back({"user",
                          get_template("judge_user_v1")
                              .render({{"reference", std::string(reference)}, {"candidate", std::string(candidate)}}),
                          std::nullopt});
  return req;
}

JudgeResult judge_score(ChatBackend& backend, std::string_view reference, std::string_view candidate,
                        const std::string& model) {
  const auto reply = backend.complete(make_judge_request(reference, candidate, model));
  return {*parse_model_response(reply.content, ResponseKind::JudgeScore).score, reply.usage};
}

json to_json(const InterpretationResult& r) {
  json usage_by_agent = json::object();
  for (const auto& [agent, u] : r.usage_by_agent) usage_by_agent[agent] = to_json(u);
  json doc{{"character_ref", r.character_ref},
           {"inscription_type", r.inscription_type ? json(to_string(*r.inscription_type)) : json(nullptr)},
           {"reasoning_trace", r.reasoning_trace},
           {"interpretation", r.interpretation},
           {"evidence_used", r.evidence_used},
           {"mode", to_string(r.mode)},
           {"token_usage", to_json(r.token_usage)},
           {"usage_by_agent", usage_by_agent},
           {"backend_names", r.backend_names},
           {"language", to_string(r.language)},
           {"template_ids", r.template_ids},
           {"plan_fallback", r.plan_fallback},
           {"type_retried", r.type_retried}};
  if (r.evidence) doc["evidence"] = to_json(*r.evidence);
  return doc;
}

}  // namespace obs
