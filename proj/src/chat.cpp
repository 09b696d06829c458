#include "obs/chat.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <semaphore>
#include <set>
#include <sstream>

#include "obs/dataset.hpp"
#include "obs/error.hpp"
#include "obs/http.hpp"
#include "obs/util.hpp"

namespace obs {

using nlohmann::json;

json to_wire(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) {
    json msg{{"role", m.role}, {"content", m.content}};
    if (m.image_b64) msg["image_b64"] = *m.image_b64;
    messages.push_back(std::move(msg));
  }
  return {{"model", request.model}, {"temperature", request.temperature}, {"messages", messages}};
}

std::string request_hash(const ChatRequest& request) { return sha256_hex(to_wire(request).dump()); }

json to_json(const TokenUsage& usage) {
  return {{"prompt", usage.prompt}, {"completion", usage.completion}, {"total", usage.total()}};
}

std::size_t estimate_tokens(std::string_view text) { return (text.size() + 3) / 4; }

// --- HTTP ---

struct HttpChatBackend::Gate {
  explicit Gate(int n) : slots(n) {}
  std::counting_semaphore<1024> slots;
};

HttpChatBackend::HttpChatBackend(std::string url, std::string key, bool supports_images, int max_in_flight,
                                 int timeout_seconds)
    : url_(std::move(url)), key_(std::move(key)), supports_images_(supports_images),
      timeout_seconds_(timeout_seconds) {
  if (url_.empty()) throw Error(ErrorCode::ConfigError, "chat backend URL is empty");
  if (max_in_flight < 1 || max_in_flight > 1024) throw Error(ErrorCode::ConfigError, "max_in_flight must lie in [1, 1024]");
  gate_ = std::make_unique<Gate>(max_in_flight);
}

HttpChatBackend::~HttpChatBackend() = default;

ChatResponse HttpChatBackend::complete(const ChatRequest& request) {
  std::map<std::string, std::string> headers;
  if (!key_.empty()) headers["Authorization"] = "Bearer " + key_;

  http::Response res;
  gate_->slots.acquire();
  try {
    res = http::post_json(url_, to_wire(request).dump(), headers, timeout_seconds_);
  } catch (const Error& e) {
    gate_->slots.release();
    throw Error(ErrorCode::BackendUnavailable, e.what());
  }
  gate_->slots.release();
  if (res.status != 200) {
    throw Error(ErrorCode::BackendUnavailable, "chat backend " + url_ + " answered HTTP " + std::to_string(res.status));
  }
  try {
    const auto doc = json::parse(res.body);
    ChatResponse out;
    out.content = doc.at("content").get<std::string>();
    if (doc.contains("usage")) {
      out.usage.prompt = doc["usage"].value("prompt_tokens", std::size_t{0});
      out.usage.completion = doc["usage"].value("completion_tokens", std::size_t{0});
    }
    return out;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::UnparseableResponse, std::string("chat backend reply: ") + e.what());
  }
}

// --- mock ---

namespace {

std::vector<std::string> predicted_labels(std::string_view prompt) {
  std::vector<std::string> out;
  for (const auto& line : split_lines(prompt)) {
    const auto l = trim(line);
    if (!l.starts_with("- ")) continue;
    const auto mark = l.find(" [d=");
    if (mark == std::string_view::npos) continue;
    out.emplace_back(l.substr(2, mark - 2));
  }
  return out;
}

std::string join_labels(const std::vector<std::string>& labels) {
  if (labels.empty()) return "unidentified strokes";
  std::string out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i) out += i + 1 == labels.size() ? " and " : ", ";
    out += labels[i];
  }
  return out;
}

std::string line_after(std::string_view prompt, std::string_view marker) {
  for (const auto& line : split_lines(prompt)) {
    if (line.starts_with(marker)) return std::string(trim(std::string_view(line).substr(marker.size())));
  }
  return "";
}

std::set<std::string> word_set(const std::string& text) {
  std::set<std::string> out;
  std::istringstream in(text);
  for (std::string w; in >> w;) {
    std::string clean;
    for (char c : w) {
      if (std::isalnum(static_cast<unsigned char>(c)) || static_cast<unsigned char>(c) >= 0x80) {
        clean += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      }
    }
    if (!clean.empty()) out.insert(clean);
  }
  return out;
}

std::string mock_judge(std::string_view prompt) {
  const auto ref = word_set(line_after(prompt, "Reference sentence:"));
  const auto cand = word_set(line_after(prompt, "Sentence to be scored:"));
  std::size_t shared = 0;
  for (const auto& w : cand) shared += ref.count(w);
  const auto uni = ref.size() + cand.size() - shared;
  const double score = uni == 0 ? 0.0 : static_cast<double>(shared) / static_cast<double>(uni);
  char buf[32];
  std::snprintf(buf, sizeof buf, "Score: %.2f", score);
  return buf;
}

}  // namespace

ChatResponse DeterministicMockBackend::complete(const ChatRequest& request) {
  if (request.messages.empty()) throw Error(ErrorCode::BackendUnavailable, "mock backend received no messages");
  std::string prompt;
  TokenUsage usage;
  for (const auto& m : request.messages) {
    if (m.image_b64 && !supports_images_) {
      throw Error(ErrorCode::ImageRequiredButUnsupported, name_ + " does not accept images");
    }
    prompt += m.content;
    prompt += '\n';
    usage.prompt += estimate_tokens(m.content);
    // Flat per-image charge, independent of resolution.
    if (m.image_b64) usage.prompt += 85;
  }
  // The first user turn carries the predictions; retries append a correction.
  std::string first_user;
  for (const auto& m : request.messages) {
    if (m.role == "user") {
      first_user = m.content;
      break;
    }
  }
  const auto labels = predicted_labels(first_user);
  const auto digest = fnv1a64(as_bytes(join_labels(labels)));

  std::string reply;
  if (request.purpose == "planner") {
    for (const auto& l : labels) {
      reply += "CALL: component_explanation(" + l + ")\n";
      reply += "CALL: characters_by_component(" + l + ")\n";
    }
  } else if (request.purpose == "type_inference") {
    static constexpr InscriptionType kTypes[] = {InscriptionType::Ideographic, InscriptionType::Pictographic,
                                                 InscriptionType::PhonoSemantic};
    const auto type = kTypes[digest % 3];
    reply = "TYPE: " + std::string(to_string(type)) + "\nREASON: The components " + join_labels(labels) +
            " are read together as a " + std::string(to_string(type)) + " construction.";
  } else if (request.purpose == "judge") {
    reply = mock_judge(prompt);
  } else {
    static constexpr const char* kGlosses[] = {"an activity performed with them", "a place or dwelling",
                                               "a natural phenomenon", "a ritual object"};
    reply = "INTERPRETATION: The character combines " + join_labels(labels) + " and most likely denotes " +
            kGlosses[digest % 4] + ".";
  }
  usage.completion = estimate_tokens(reply);
  return {reply, usage};
}

// --- record / replay ---

RecordingBackend::RecordingBackend(std::shared_ptr<ChatBackend> inner, std::filesystem::path fixture)
    : inner_(std::move(inner)), fixture_(std::move(fixture)) {
  if (std::filesystem::exists(fixture_)) {
    try {
      records_ = json::parse(read_file_text(fixture_));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::CorruptFile, "recording fixture: " + std::string(e.what()));
    }
  }
}

ChatResponse RecordingBackend::complete(const ChatRequest& request) {
  auto res = inner_->complete(request);
  std::lock_guard lock(mu_);
  records_[request_hash(request)] = {{"content", res.content},
                                     {"usage", {{"prompt_tokens", res.usage.prompt},
                                                {"completion_tokens", res.usage.completion}}}};
  return res;
}

void RecordingBackend::flush() {
  std::lock_guard lock(mu_);
  write_file_atomic(fixture_, records_.dump(2) + "\n");
}

RecordingBackend::~RecordingBackend() {
  try {
    flush();
  } catch (...) {
  }
}

ReplayBackend::ReplayBackend(const std::filesystem::path& fixture, std::string name, bool supports_images)
    : name_(std::move(name)), supports_images_(supports_images) {
  try {
    const auto doc = json::parse(read_file_text(fixture));
    for (const auto& [hash, rec] : doc.items()) {
      ChatResponse r;
      r.content = rec.at("content").get<std::string>();
      r.usage.prompt = rec.at("usage").value("prompt_tokens", std::size_t{0});
      r.usage.completion = rec.at("usage").value("completion_tokens", std::size_t{0});
      records_.emplace(hash, std::move(r));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptFile, "replay fixture: " + std::string(e.what()));
  }
}

ChatResponse ReplayBackend::complete(const ChatRequest& request) {
  auto it = records_.find(request_hash(request));
  if (it == records_.end()) {
    throw Error(ErrorCode::BackendUnavailable, "no recorded reply for request " + request_hash(request));
  }
  return it->second;
}

}  // namespace obs
