#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace obs {

struct ChatMessage {
  std::string role;
  std::string content;
  std::optional<std::string> image_b64;
  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::string model;
  double temperature = 0.0;
  std::vector<ChatMessage> messages;
  /// Local routing tag (type_inference, interpretation, planner, reasoner,
  /// judge). Never sent on the wire.
  std::string purpose;
};

/// Wire body: {model, temperature, messages:[{role, content, image_b64?}]}.
nlohmann::json to_wire(const ChatRequest& request);
/// sha256 of the canonical wire body; keys record/replay fixtures.
std::string request_hash(const ChatRequest& request);

struct TokenUsage {
  std::size_t prompt = 0;
  std::size_t completion = 0;
  std::size_t total() const { return prompt + completion; }
  TokenUsage& operator+=(const TokenUsage& o) {
    prompt += o.prompt;
    completion += o.completion;
    return *this;
  }
  bool operator==(const TokenUsage&) const = default;
};

nlohmann::json to_json(const TokenUsage& usage);

struct ChatResponse {
  std::string content;
  TokenUsage usage;
};

class ChatBackend {
public:
  virtual ~ChatBackend() = default;
  virtual std::string name() const = 0;
  virtual bool supports_images() const = 0;
  /// Throws BackendUnavailable on transport failure, UnparseableResponse on
  /// a reply that does not follow the wire protocol.
  virtual ChatResponse complete(const ChatRequest& request) = 0;
};

/// POSTs the wire body to `url`; `key`, when set, is sent as a bearer token.
class HttpChatBackend final : public ChatBackend {
public:
  HttpChatBackend(std::string url, std::string key, bool supports_images = true, int max_in_flight = 4,
                  int timeout_seconds = 120);
  ~HttpChatBackend() override;

  std::string name() const override { return "http:" + url_; }
  bool supports_images() const override { return supports_images_; }
  ChatResponse complete(const ChatRequest& request) override;

private:
  struct Gate;
  std::string url_;
  std::string key_;
  bool supports_images_;
  int timeout_seconds_;
  std::unique_ptr<Gate> gate_;
};

/// Offline backend whose replies depend only on the request. It answers in
/// the marker format each purpose expects; a planner request yields calls
/// for every `- <label> [d=...]` line in the prompt. Token counts are
/// ceil(bytes / 4) of the text exchanged.
class DeterministicMockBackend final : public ChatBackend {
public:
  explicit DeterministicMockBackend(std::string name = "mock", bool supports_images = true)
      : name_(std::move(name)), supports_images_(supports_images) {}

  std::string name() const override { return name_; }
  bool supports_images() const override { return supports_images_; }
  ChatResponse complete(const ChatRequest& request) override;

private:
  std::string name_;
  bool supports_images_;
};

std::size_t estimate_tokens(std::string_view text);

/// Forwards to `inner` and stores every exchange keyed by request_hash.
class RecordingBackend final : public ChatBackend {
public:
  RecordingBackend(std::shared_ptr<ChatBackend> inner, std::filesystem::path fixture);

  std::string name() const override { return inner_->name(); }
  bool supports_images() const override { return inner_->supports_images(); }
  ChatResponse complete(const ChatRequest& request) override;

  /// Writes the fixture file; also called on destruction.
  void flush();
  ~RecordingBackend() override;

private:
  std::shared_ptr<ChatBackend> inner_;
  std::filesystem::path fixture_;
  std::mutex mu_;
  nlohmann::json records_ = nlohmann::json::object();
};

/// Answers from a recorded fixture; an unknown request is BackendUnavailable.
class ReplayBackend final : public ChatBackend {
public:
  explicit ReplayBackend(const std::filesystem::path& fixture, std::string name = "replay",
                         bool supports_images = true);

  std::string name() const override { return name_; }
  bool supports_images() const override { return supports_images_; }
  ChatResponse complete(const ChatRequest& request) override;

private:
  std::string name_;
  bool supports_images_;
  std::map<std::string, ChatResponse> records_;
};

}  // namespace obs
