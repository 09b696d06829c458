#include "obs/embedding.hpp"

#include <cstdint>
#include <numbers>
#include <semaphore>

#include <json.hpp>

#include "obs/http.hpp"
#include "obs/util.hpp"

namespace obs {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform on (0, 1]; never zero so the logarithm below stays finite.
double unit_interval(std::uint64_t bits) {
  return static_cast<double>((bits >> 11) + 1) * 0x1.0p-53;
}

}  // namespace

Embedding EmbeddingProvider::embed_image(std::span<const std::byte> image) const {
  if (image.empty()) throw Error(ErrorCode::EmptyInput, "empty image");
  return checked(InputKind::Image, image);
}

Embedding EmbeddingProvider::embed_text(std::string_view text) const {
  if (text.empty()) throw Error(ErrorCode::EmptyInput, "empty text");
  return checked(InputKind::Text, as_bytes(text));
}

Embedding EmbeddingProvider::checked(InputKind kind, std::span<const std::byte> data) const {
  Embedding v = compute(kind, data);
  if (v.size() != dim()) {
    throw Error(ErrorCode::DimensionMismatch, name() + " returned " + std::to_string(v.size()) +
                                                  " values, expected " + std::to_string(dim()));
  }
  if (!all_finite(v)) throw Error(ErrorCode::MalformedInput, name() + " returned a non-finite value");
  return v;
}

StubEmbeddingProvider::StubEmbeddingProvider(int dim) : dim_(dim) {
  if (dim <= 0) throw Error(ErrorCode::ConfigError, "embedding dimension must be positive");
}

std::string StubEmbeddingProvider::name() const { return "stub-fnv1a-splitmix/" + std::to_string(dim_); }

Embedding StubEmbeddingProvider::compute(InputKind, std::span<const std::byte> data) const {
  const std::uint64_t seed = fnv1a64(data);
  Embedding v(dim_);
  for (int i = 0; i < dim_; i += 2) {
    const double u1 = unit_interval(splitmix64(seed + 2 * static_cast<std::uint64_t>(i)));
    const double u2 = unit_interval(splitmix64(seed + 2 * static_cast<std::uint64_t>(i) + 1));
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    v[i] = r * std::cos(theta);
    if (i + 1 < dim_) v[i + 1] = r * std::sin(theta);
  }
  return v / v.norm();
}

struct RemoteEmbeddingProvider::Gate {
  explicit Gate(int n) : slots(n) {}
  std::counting_semaphore<1024> slots;
};

RemoteEmbeddingProvider::RemoteEmbeddingProvider(std::string base_url, int dim, int max_in_flight, int timeout_seconds)
    : base_url_(std::move(base_url)), dim_(dim), timeout_seconds_(timeout_seconds) {
  if (dim <= 0) throw Error(ErrorCode::ConfigError, "embedding dimension must be positive");
  if (max_in_flight < 1 || max_in_flight > 1024) {
    throw Error(ErrorCode::ConfigError, "max_in_flight must lie in [1, 1024]");
  }
  while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
  gate_ = std::make_unique<Gate>(max_in_flight);
}

RemoteEmbeddingProvider::~RemoteEmbeddingProvider() = default;

std::string RemoteEmbeddingProvider::name() const { return "remote:" + base_url_; }

Embedding RemoteEmbeddingProvider::compute(InputKind kind, std::span<const std::byte> data) const {
  nlohmann::json request;
  if (kind == InputKind::Image) {
    request = {{"kind", "image"}, {"data", base64_encode(data)}};
  } else {
    request = {{"kind", "text"},
               {"data", std::string(reinterpret_cast<const char*>(data.data()), data.size())}};
  }

  http::Response res;
  gate_->slots.acquire();
  try {
    res = http::post_json(base_url_ + "/embed", request.dump(), {}, timeout_seconds_);
  } catch (const Error& e) {
    gate_->slots.release();
    throw Error(ErrorCode::ProviderUnavailable, e.what());
  }
  gate_->slots.release();

  if (res.status != 200) {
    throw Error(ErrorCode::ProviderUnavailable, "embedding endpoint returned HTTP " + std::to_string(res.status));
  }
  try {
    const auto doc = nlohmann::json::parse(res.body);
    const auto& values = doc.at("values");
    const auto n = doc.at("dim").get<long long>();
    if (n != static_cast<long long>(values.size())) {
      throw Error(ErrorCode::DimensionMismatch, "response dim field disagrees with values length");
    }
    Embedding v(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) v[static_cast<Eigen::Index>(i)] = values[i].get<double>();
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ProviderUnavailable, std::string("malformed embedding response: ") + e.what());
  }
}

std::shared_ptr<const EmbeddingProvider> make_embedding_provider(const std::optional<std::string>& url,
                                                                 int dim, int max_in_flight, int timeout_seconds) {
  if (url && !url->empty()) {
    return std::make_shared<RemoteEmbeddingProvider>(*url, dim, max_in_flight, timeout_seconds);
  }
  return std::make_shared<StubEmbeddingProvider>(dim);
}

}  // namespace obs
