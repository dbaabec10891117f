#pragma once

// Shared domain types, configuration, and the vector-math primitives the
// rest of the cache is built on. Everything here is immutable after
// construction and safe to share across threads.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctxcache {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class EmptyQueryError : public Error {
 public:
  using Error::Error;
};

class EmbeddingBackendError : public Error {
 public:
  using Error::Error;
};

class DuplicateIdError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class StorageError : public Error {
 public:
  using Error::Error;
};

class LlmBackendError : public Error {
 public:
  using Error::Error;
};

class BenchInputError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

// A fixed-dimension vector with L2 norm 1 (within 1e-9) and all components
// finite. This is the only vector type the similarity math accepts, which
// lets cosine() be a plain clamped dot product.
class UnitVector {
 public:
  // Empty placeholder (dimension 0); real vectors come from the factories.
  UnitVector() = default;

  // Scales `raw` to unit length. Rejects zero and non-finite input.
  static UnitVector normalize(std::span<const double> raw);

  // Adopts `values` that are already unit norm (e.g. read back from the
  // store). Validates the invariants but does not renormalize, so values
  // round-trip bit-exactly.
  static UnitVector from_unit_data(std::vector<double> values);

  std::size_t dim() const { return values_.size(); }
  const std::vector<double>& values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool operator==(const UnitVector& other) const = default;

 private:
  explicit UnitVector(std::vector<double> values) : values_(std::move(values)) {}
  std::vector<double> values_;
};

// Cosine similarity of two unit vectors: their dot product, clamped to
// [-1, 1] to absorb rounding before threshold comparisons.
double cosine(const UnitVector& a, const UnitVector& b);

inline UnitVector normalize(std::span<const double> raw) {
  return UnitVector::normalize(raw);
}

enum class Role : std::uint8_t { user, assistant };

// One message of a conversation. `token_count` is a whitespace word count;
// no real tokenizer is involved anywhere in this project.
struct Turn {
  Role role = Role::user;
  std::string text;
  std::size_t token_count = 0;

  static Turn make(Role role, std::string text);
};

// Whitespace word count used for token accounting.
std::size_t word_count(const std::string& text);

enum class PoolingMode : std::uint8_t { last, mean };

enum class ContextStrategy : std::uint8_t { attention, query_only, concat, average };

enum class EmbedderKind : std::uint8_t { token_hash, remote };

enum class LlmKind : std::uint8_t { mock, remote };

struct CacheConfig {
  // Retrieval pipeline.
  std::size_t dimension = 8;
  double theta1 = 0.7;
  double theta2 = 0.8;
  std::size_t k1_cap = 16;
  std::size_t max_context_turns = 10;
  std::size_t capacity = 10000;
  PoolingMode pooling_mode = PoolingMode::last;
  bool positional_encoding = true;
  bool embed_assistant_turns = false;
  bool record_on_hit = false;
  ContextStrategy strategy = ContextStrategy::attention;

  // Embedding provider.
  EmbedderKind embedder_kind = EmbedderKind::token_hash;
  std::string embed_endpoint;
  std::string embed_model;
  int embed_timeout_ms = 5000;
  int embed_max_retries = 3;

  // Persistence.
  std::string store_path = "contextcache.db";
  bool sync_on_put = true;
  std::string weights_path;

  // LLM backend used on a miss.
  LlmKind llm_backend = LlmKind::mock;
  int llm_mock_delay_ms = 500;
  std::string llm_endpoint;
  std::string llm_model;
  int llm_timeout_ms = 30000;

  // Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const CacheConfig&) const = default;
};

// Parses a flat key/value config document ("key = value" lines, '#'
// comments). Unknown keys are rejected. Missing keys take the defaults
// above; when `embedder_kind` is remote and no dimension is given, the
// dimension defaults to 768 instead of 8.
CacheConfig parse_config(const std::string& text);

// parse_config + CONTEXTCACHE_* environment overrides + validate().
CacheConfig load_config(const std::string& text);
CacheConfig load_config_file(const std::string& path);

// Serializes every key; load_config(save_config(c)) == c.
std::string save_config(const CacheConfig& config);

// Applies CONTEXTCACHE_<UPPERCASE_KEY> environment variables on top of
// `config`. Exposed separately so tests can exercise the precedence order.
void apply_env_overrides(CacheConfig& config);

std::string to_string(PoolingMode mode);
std::string to_string(ContextStrategy strategy);
std::string to_string(EmbedderKind kind);
std::string to_string(LlmKind kind);

}  // namespace ctxcache
