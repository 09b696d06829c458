#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "obs/error.hpp"

namespace obs {

/// An embedding is a dense column vector of doubles. Providers guarantee the
/// length equals their configured dimension and that every value is finite.
using Embedding = Eigen::VectorXd;

inline constexpr int kDefaultEmbeddingDim = 768;

template <typename A, typename B>
void check_same_dim(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                "dimension " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& v) {
  return v.allFinite();
}

template <typename A, typename B>
typename A::Scalar euclidean_distance(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  check_same_dim(a, b);
  return (a - b).norm();
}

template <typename A, typename B>
typename A::Scalar cosine_similarity(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  check_same_dim(a, b);
  const auto na = a.norm();
  const auto nb = b.norm();
  if (na == 0 || nb == 0) throw Error(ErrorCode::ZeroNorm, "cosine of a zero vector");
  using S = typename A::Scalar;
  // Rounding can push |cos| a few ulps past 1 for parallel vectors.
  return std::clamp<S>(a.dot(b) / (na * nb), S(-1), S(1));
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> l2_normalized(
    const Eigen::MatrixBase<Derived>& v) {
  const auto n = v.norm();
  if (n == 0) throw Error(ErrorCode::ZeroNorm, "cannot normalize a zero vector");
  return v / n;
}

enum class InputKind { Image, Text };

/// Maps image bytes or text to a fixed-dimension embedding. Implementations
/// must be deterministic per input and callable from several threads.
class EmbeddingProvider {
public:
  virtual ~EmbeddingProvider() = default;

  virtual std::string name() const = 0;
  virtual int dim() const = 0;

  Embedding embed_image(std::span<const std::byte> image) const;
  Embedding embed_text(std::string_view text) const;

protected:
  virtual Embedding compute(InputKind kind, std::span<const std::byte> data) const = 0;

private:
  Embedding checked(InputKind kind, std::span<const std::byte> data) const;
};

/// Deterministic offline provider: a 64-bit FNV-1a hash of the input seeds a
/// counter-based generator (splitmix64 + Box-Muller) whose `dim` normal draws
/// are L2-normalized.
class StubEmbeddingProvider final : public EmbeddingProvider {
public:
  explicit StubEmbeddingProvider(int dim = kDefaultEmbeddingDim);

  std::string name() const override;
  int dim() const override { return dim_; }

protected:
  Embedding compute(InputKind kind, std::span<const std::byte> data) const override;

private:
  int dim_;
};

/// POSTs {"kind", "data"} to `<base_url>/embed` and expects
/// {"dim": n, "values": [...]}. Image data travels base64-encoded.
class RemoteEmbeddingProvider final : public EmbeddingProvider {
public:
  RemoteEmbeddingProvider(std::string base_url, int dim, int max_in_flight = 4, int timeout_seconds = 60);
  ~RemoteEmbeddingProvider() override;

  std::string name() const override;
  int dim() const override { return dim_; }

protected:
  Embedding compute(InputKind kind, std::span<const std::byte> data) const override;

private:
  struct Gate;
  std::string base_url_;
  int dim_;
  int timeout_seconds_;
  std::unique_ptr<Gate> gate_;
};

/// The remote provider when `url` is set (OBS_EMBED_URL), the stub otherwise.
std::shared_ptr<const EmbeddingProvider> make_embedding_provider(
    const std::optional<std::string>& url, int dim = kDefaultEmbeddingDim, int max_in_flight = 4,
    int timeout_seconds = 60);

}  // namespace obs
