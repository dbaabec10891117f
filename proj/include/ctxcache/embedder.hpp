#pragma once

// Pluggable text -> UnitVector providers. The token-hash embedder is fully
// deterministic and dependency-free, which is what the tests and benchmark
// replay rely on; the remote embedder is a thin JSON client so a real
// sentence encoder can be dropped in behind the same interface.

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctxcache/core.hpp"

namespace ctxcache {

// Canonical text form used both as tokenizer input and as memo key:
// ASCII-lowercased, punctuation stripped to spaces, whitespace collapsed,
// trimmed. Bytes outside ASCII pass through untouched.
std::string normalize_text(std::string_view text);

class Embedder {
 public:
  virtual ~Embedder() = default;

  // Embeds one text. Deterministic embedders return a bit-identical vector
  // for equal normalized text. Throws EmptyQueryError when nothing is left
  // after normalization.
  virtual UnitVector embed(std::string_view text) const = 0;

  virtual std::size_t dim() const = 0;

  // Number of embed() calls served so far (memoization tests observe this).
  std::uint64_t call_count() const { return calls_.load(); }

 protected:
  mutable std::atomic<std::uint64_t> calls_{0};
};

// Deterministic bag-of-tokens embedder. Per token: FNV-1a 64-bit hash of
// the token bytes seeds a SplitMix64 stream; pairs of uniform draws are
// turned into standard normals with the Box-Muller transform; the d-value
// token vector is L2-normalized. The text vector is the L2-normalized mean
// of its token vectors. The exact draw pipeline is part of the contract:
// tests reproduce it independently.
class TokenHashEmbedder : public Embedder {
 public:
  explicit TokenHashEmbedder(std::size_t dimension);

  UnitVector embed(std::string_view text) const override;
  std::size_t dim() const override { return dimension_; }

 private:
  std::size_t dimension_;
};

// Client for a remote embedding service: POST {"model", "input"} to the
// endpoint, expect {"embedding": [floats]} back. The response vector is
// re-normalized; wrong dimension, non-2xx status, malformed bodies, and
// timeouts raise EmbeddingBackendError after `max_retries` retries with
// exponential backoff.
class RemoteEmbedder : public Embedder {
 public:
  RemoteEmbedder(std::string endpoint, std::string model, std::size_t dimension,
                 int timeout_ms, int max_retries);

  UnitVector embed(std::string_view text) const override;
  std::size_t dim() const override { return dimension_; }

 private:
  std::string endpoint_;
  std::string model_;
  std::size_t dimension_;
  int timeout_ms_;
  int max_retries_;
};

std::unique_ptr<Embedder> make_embedder(const CacheConfig& config);

// Memo from normalized text to its embedding. Values for a key are always
// identical, so last-writer-wins inserts are fine.
class EmbeddingMemo {
 public:
  std::optional<UnitVector> lookup(const std::string& key) const;
  void insert(const std::string& key, const UnitVector& vector);
  std::size_t size() const;

 private:
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, UnitVector> entries_;
};

// Embeds `turns` in order, serving any turn whose normalized text is
// already memoized without calling the embedder, and memoizing the rest.
std::vector<UnitVector> embed_history(const Embedder& embedder,
                                      const std::vector<Turn>& turns,
                                      EmbeddingMemo& memo);

// Low-level deterministic primitives, exposed for reuse by the store
// hashing and the trainer's version stamps.
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed);

struct SplitMix64 {
  std::uint64_t state;

  explicit SplitMix64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform draw in the open interval (0, 1).
  double next_unit() {
    return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53;
  }
};

}  // namespace ctxcache
