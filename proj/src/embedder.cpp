#include "ctxcache/embedder.hpp"

#include <cctype>
#include <chrono>
#include <cmath>
#include <numbers>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace ctxcache {

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c) || (c < 0x80 && std::ispunct(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out += ' ';
      pending_space = false;
    }
    out += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
  }
  return out;
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t hash = seed;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001B3ull;
  }
  return hash;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  return fnv1a64(bytes.data(), bytes.size(), 0xCBF29CE484222325ull);
}

namespace {

// d approximately-standard-normal draws from the token's hash: Box-Muller
// over consecutive pairs of SplitMix64 uniforms, odd tail value dropped.
std::vector<double> token_direction(std::string_view token, std::size_t dimension) {
  SplitMix64 rng(fnv1a64(token));
  std::vector<double> values(dimension);
  for (std::size_t i = 0; i < dimension; i += 2) {
    const double u1 = rng.next_unit();
    const double u2 = rng.next_unit();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    values[i] = radius * std::cos(angle);
    if (i + 1 < dimension) values[i + 1] = radius * std::sin(angle);
  }
  return values;
}

}  // namespace

TokenHashEmbedder::TokenHashEmbedder(std::size_t dimension) : dimension_(dimension) {
  if (dimension < 1) throw ConfigError("dimension", "must be a positive integer");
}

UnitVector TokenHashEmbedder::embed(std::string_view text) const {
  calls_.fetch_add(1);
  const std::string normalized = normalize_text(text);
  if (normalized.empty()) {
    throw EmptyQueryError("text is empty after normalization");
  }
  std::vector<double> mean(dimension_, 0.0);
  std::size_t tokens = 0;
  std::size_t begin = 0;
  while (begin < normalized.size()) {
    std::size_t end = normalized.find(' ', begin);
    if (end == std::string::npos) end = normalized.size();
    const std::string_view token(normalized.data() + begin, end - begin);
    const UnitVector direction =
        UnitVector::normalize(token_direction(token, dimension_));
    for (std::size_t i = 0; i < dimension_; ++i) mean[i] += direction[i];
    ++tokens;
    begin = end + 1;
  }
  for (double& v : mean) v /= static_cast<double>(tokens);
  return UnitVector::normalize(mean);
}

RemoteEmbedder::RemoteEmbedder(std::string endpoint, std::string model,
                               std::size_t dimension, int timeout_ms, int max_retries)
    : endpoint_(std::move(endpoint)),
      model_(std::move(model)),
      dimension_(dimension),
      timeout_ms_(timeout_ms),
      max_retries_(max_retries) {}

UnitVector RemoteEmbedder::embed(std::string_view text) const {
  calls_.fetch_add(1);
  const std::string normalized = normalize_text(text);
  if (normalized.empty()) {
    throw EmptyQueryError("text is empty after normalization");
  }

  // endpoint_ is "host:port/path" or "http://host:port/path".
  std::string target = endpoint_;
  if (target.rfind("http://", 0) == 0) target = target.substr(7);
  std::size_t slash = target.find('/');
  std::string host = target.substr(0, slash);
  std::string path = slash == std::string::npos ? "/" : target.substr(slash);

  nlohmann::json body{{"model", model_}, {"input", std::string(text)}};
  const std::string payload = body.dump();

  std::string last_error = "no attempts made";
  int backoff_ms = 50;
  for (int attempt = 0; attempt <= max_retries_; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
      backoff_ms *= 2;
    }
    httplib::Client client(host);
    client.set_connection_timeout(0, timeout_ms_ * 1000);
    client.set_read_timeout(timeout_ms_ / 1000, (timeout_ms_ % 1000) * 1000);
    auto result = client.Post(path, payload, "application/json");
    if (!result) {
      last_error = "transport failure: " + httplib::to_string(result.error());
      continue;
    }
    if (result->status < 200 || result->status >= 300) {
      last_error = "status " + std::to_string(result->status);
      continue;
    }
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(result->body);
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("malformed body: ") + e.what();
      continue;
    }
    if (!parsed.contains("embedding") || !parsed["embedding"].is_array()) {
      last_error = "malformed body: missing 'embedding' array";
      continue;
    }
    std::vector<double> raw;
    raw.reserve(parsed["embedding"].size());
    for (const auto& v : parsed["embedding"]) {
      if (!v.is_number()) {
        throw EmbeddingBackendError("embedding contains a non-numeric component");
      }
      raw.push_back(v.get<double>());
    }
    if (raw.size() != dimension_) {
      throw EmbeddingBackendError("dimension mismatch: service returned " +
                                  std::to_string(raw.size()) + ", expected " +
                                  std::to_string(dimension_));
    }
    try {
      return UnitVector::normalize(raw);
    } catch (const DegenerateVectorError& e) {
      throw EmbeddingBackendError(std::string("degenerate embedding: ") + e.what());
    }
  }
  throw EmbeddingBackendError("remote embedding failed after " +
                              std::to_string(max_retries_ + 1) +
                              " attempts: " + last_error);
}

std::unique_ptr<Embedder> make_embedder(const CacheConfig& config) {
  if (config.embedder_kind == EmbedderKind::remote) {
    return std::make_unique<RemoteEmbedder>(config.embed_endpoint, config.embed_model,
                                            config.dimension, config.embed_timeout_ms,
                                            config.embed_max_retries);
  }
  return std::make_unique<TokenHashEmbedder>(config.dimension);
}

std::optional<UnitVector> EmbeddingMemo::lookup(const std::string& key) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingMemo::insert(const std::string& key, const UnitVector& vector) {
  std::unique_lock lock(mutex_);
  entries_.insert_or_assign(key, vector);
}

std::size_t EmbeddingMemo::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

std::vector<UnitVector> embed_history(const Embedder& embedder,
                                      const std::vector<Turn>& turns,
                                      EmbeddingMemo& memo) {
  std::vector<UnitVector> history;
  history.reserve(turns.size());
  for (const Turn& turn : turns) {
    const std::string key = normalize_text(turn.text);
    if (auto cached = memo.lookup(key)) {
      history.push_back(std::move(*cached));
      continue;
    }
    UnitVector fresh = embedder.embed(turn.text);
    memo.insert(key, fresh);
    history.push_back(std::move(fresh));
  }
  return history;
}

}  // namespace ctxcache
