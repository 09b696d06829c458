#include <doctest.h>

// Eigen must precede httplib: <resolv.h> defines a `_res` macro.
#include "obs/embedding.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <random>
#include <thread>

#include <json.hpp>

#include "obs/embedding.hpp"
#include "obs/util.hpp"
#include "test_support.hpp"

using namespace obs;

namespace {

class FixedLengthProvider final : public EmbeddingProvider {
public:
  FixedLengthProvider(int dim, int returned) : dim_(dim), returned_(returned) {}
  std::string name() const override { return "fixed"; }
  int dim() const override { return dim_; }

protected:
  Embedding compute(InputKind, std::span<const std::byte>) const override {
    return Embedding::Ones(returned_);
  }

private:
  int dim_;
  int returned_;
};

double naive_distance(const Embedding& a, const Embedding& b) {
  long double acc = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a[i]) - b[i];
    acc += d * d;
  }
  return static_cast<double>(std::sqrt(acc));
}

/// Test server for the /embed protocol that records the requests it sees.
class EmbedServer {
public:
  explicit EmbedServer(int reply_dim, int delay_ms = 0) {
    server_.Post("/embed", [this, reply_dim, delay_ms](const httplib::Request& req, httplib::Response& res) {
      const int now = ++in_flight_;
      int seen = max_in_flight_.load();
      while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {}
      if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      {
        std::lock_guard lock(mu_);
        requests_.push_back(nlohmann::json::parse(req.body));
      }
      std::vector<double> values(static_cast<std::size_t>(reply_dim), 0.25);
      res.set_content(nlohmann::json{{"dim", reply_dim}, {"values", values}}.dump(), "application/json");
      --in_flight_;
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~EmbedServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::vector<nlohmann::json> requests() {
    std::lock_guard lock(mu_);
    return requests_;
  }
  int max_in_flight() const { return max_in_flight_.load(); }

private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mu_;
  std::vector<nlohmann::json> requests_;
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
};

}  // namespace

TEST_CASE("euclidean_distance") {
  Embedding zero = Embedding::Zero(2);
  Embedding v(2);
  v << 3, 4;
  CHECK(euclidean_distance(zero, v) == 5.0);
  CHECK(euclidean_distance(v, v) == 0.0);
  CHECK_THROWS_AS(euclidean_distance(v, Embedding::Zero(3)), Error);

  std::mt19937_64 rng(11);
  for (int i = 0; i < 50; ++i) {
    const auto a = random_vector(rng, 768);
    const auto b = random_vector(rng, 768);
    const double d = euclidean_distance(a, b);
    CHECK(std::abs(d - naive_distance(a, b)) <= 1e-9 * naive_distance(a, b));
    CHECK(d == euclidean_distance(b, a));
  }
}

TEST_CASE("euclidean_distance satisfies the triangle inequality") {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_vector(rng, 32);
    const auto b = random_vector(rng, 32);
    const auto c = random_vector(rng, 32);
    CHECK(euclidean_distance(a, c) <= euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-9);
  }
}

TEST_CASE("cosine_similarity") {
  Embedding e1(2), e2(2), ones(2), neg(2);
  e1 << 1, 0;
  e2 << 0, 1;
  ones << 1, 1;
  neg << -1, -1;
  CHECK(cosine_similarity(e1, e2) == 0.0);
  CHECK(cosine_similarity(ones, neg) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(cosine_similarity(ones, ones) == doctest::Approx(1.0).epsilon(1e-15));

  try {
    cosine_similarity(e1, Embedding::Zero(2).eval());
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ZeroNorm);
  }
  try {
    cosine_similarity(e1, Embedding::Ones(3).eval());
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionMismatch);
  }

  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_vector(rng, 64);
    const auto b = random_vector(rng, 64);
    CHECK(std::abs(cosine_similarity(a, a) - 1.0) <= 1e-12);
    const Embedding sa = scale(rng) * a;
    const Embedding sb = scale(rng) * b;
    CHECK(std::abs(cosine_similarity(sa, sb) - cosine_similarity(a, b)) <= 1e-9);
  }
}

TEST_CASE("stub provider is deterministic, normalized and dimension-parametric") {
  StubEmbeddingProvider stub;
  CHECK(stub.dim() == 768);
  const auto img = as_bytes("glyph bytes");
  const auto a = stub.embed_image(img);
  const auto b = stub.embed_image(img);
  CHECK(a == b);
  CHECK(a.size() == 768);
  CHECK(std::abs(a.norm() - 1.0) < 1e-12);
  CHECK(StubEmbeddingProvider().embed_image(img) == a);

  StubEmbeddingProvider small(5);
  CHECK(small.embed_text("x").size() == 5);
  CHECK(StubEmbeddingProvider(7).embed_text("x").size() == 7);

  CHECK(cosine_similarity(stub.embed_text("abc"), stub.embed_text("abd")) < 1.0);
  CHECK(stub.embed_text("same") == stub.embed_text("same"));
  // Text and image routes hash the same bytes the same way.
  CHECK(stub.embed_text("glyph bytes") == a);
}

TEST_CASE("stub provider draws look standard normal before normalization") {
  StubEmbeddingProvider stub(768);
  double sum = 0, sum_sq = 0;
  int n = 0;
  for (int i = 0; i < 200; ++i) {
    const auto v = stub.embed_text("sample " + std::to_string(i)) * std::sqrt(768.0);
    sum += v.sum();
    sum_sq += v.squaredNorm();
    n += 768;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sum_sq / n - 1.0) < 1e-9);  // exact after normalization
}

TEST_CASE("stub provider has no collisions over 1000 random inputs") {
  StubEmbeddingProvider stub(64);
  std::mt19937_64 rng(99);
  std::map<std::vector<double>, int> seen;
  int collisions = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string bytes(16 + i % 17, '\0');
    for (auto& ch : bytes) ch = static_cast<char>(rng() & 0xff);
    const auto v = stub.embed_image(as_bytes(bytes));
    std::vector<double> key(v.data(), v.data() + v.size());
    if (seen.contains(key)) ++collisions;
    seen[key] = i;
  }
  CHECK(collisions == 0);
}

TEST_CASE("provider contract errors") {
  StubEmbeddingProvider stub;
  try {
    stub.embed_text("");
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyInput);
  }
  CHECK_THROWS_AS(stub.embed_image({}), Error);

  FixedLengthProvider wrong(768, 512);
  try {
    wrong.embed_image(as_bytes("img"));
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionMismatch);
  }
  CHECK(FixedLengthProvider(3, 3).embed_text("ok").size() == 3);
}

TEST_CASE("remote provider speaks the /embed protocol") {
  EmbedServer server(4);
  RemoteEmbeddingProvider remote(server.url() + "/", 4);
  CHECK(remote.name() == "remote:" + server.url());

  const std::string image = std::string("\x89PNG\x00\x01", 6);
  const auto v = remote.embed_image(as_bytes(image));
  CHECK(v == Embedding::Constant(4, 0.25));
  remote.embed_text("hand");

  const auto reqs = server.requests();
  REQUIRE(reqs.size() == 2);
  CHECK(reqs[0]["kind"] == "image");
  const auto decoded = base64_decode(reqs[0]["data"].get<std::string>());
  CHECK(std::string(reinterpret_cast<const char*>(decoded.data()), decoded.size()) == image);
  CHECK(reqs[1]["kind"] == "text");
  CHECK(reqs[1]["data"] == "hand");
}

TEST_CASE("remote provider rejects a wrong-length reply") {
  EmbedServer server(512);
  RemoteEmbeddingProvider remote(server.url(), 768);
  try {
    remote.embed_text("x");
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionMismatch);
  }
}

TEST_CASE("remote provider reports an unreachable backend") {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  RemoteEmbeddingProvider remote("http://127.0.0.1:" + std::to_string(port), 8, 4, 2);
  try {
    remote.embed_text("x");
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ProviderUnavailable);
  }
}

TEST_CASE("remote provider bounds concurrent requests") {
  EmbedServer server(4, 30);
  RemoteEmbeddingProvider remote(server.url(), 4, 2);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) threads.emplace_back([&, i] { remote.embed_text("t" + std::to_string(i)); });
  for (auto& t : threads) t.join();
  CHECK(server.requests().size() == 8);
  CHECK(server.max_in_flight() <= 2);
}

TEST_CASE("make_embedding_provider selects by URL presence") {
  CHECK(make_embedding_provider(std::nullopt)->name().starts_with("stub"));
  CHECK(make_embedding_provider(std::string{})->name().starts_with("stub"));
  CHECK(make_embedding_provider(std::string("http://127.0.0.1:1"))->name() == "remote:http://127.0.0.1:1");
}
