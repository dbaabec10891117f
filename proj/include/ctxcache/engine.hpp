#pragma once

// The cache brain: context collection, embedding reuse, two-stage lookup,
// cache update, LRU eviction, and metrics. One engine hosts one store and
// one vector index; sessions are in-memory conversation state.

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctxcache/attention.hpp"
#include "ctxcache/core.hpp"
#include "ctxcache/embedder.hpp"
#include "ctxcache/store.hpp"
#include "ctxcache/vindex.hpp"

namespace ctxcache {

enum class MissReason : std::uint8_t { no_stage1_candidates, below_theta2, empty_cache };

std::string to_string(MissReason reason);

struct MatchDecision {
  bool hit = false;
  std::optional<std::uint64_t> matched_entry_id;
  std::optional<double> stage1_similarity;
  std::optional<double> stage2_similarity;
  std::optional<MissReason> miss_reason;
};

struct LookupResult {
  MatchDecision decision;
  UnitVector g_current;
  UnitVector v_q;
};

// Point-in-time latency summary (histogram over a bounded sample window).
struct LatencySummary {
  std::uint64_t count = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double max_ms = 0.0;
};

struct Metrics {
  std::uint64_t queries_total = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
  std::uint64_t llm_calls = 0;
  std::uint64_t evictions = 0;
  std::uint64_t entries_live = 0;
  std::uint64_t approx_memory_bytes = 0;
  LatencySummary hit_latency;
  LatencySummary miss_latency;
};

class CacheEngine {
 public:
  // Opens the store named by the config, rebuilds the vector index from
  // it, and resumes the logical clock. `embedder` defaults to the one the
  // config describes; `params` defaults to identity projections or the
  // configured weights file.
  explicit CacheEngine(CacheConfig config,
                       std::unique_ptr<Embedder> embedder = nullptr,
                       std::optional<AttentionParams> params = std::nullopt);

  // The two-stage lookup. Computes v_Q and the strategy's context
  // representation g_current, filters stage-1 candidates by theta1, picks
  // the best stage-2 match by S_c = cos(g_current, g_c) with deterministic
  // tie-breaks, and gates on theta2 (strict). Does not change cache or
  // session state; both vectors are returned so the caller can commit the
  // outcome without recomputing them.
  LookupResult lookup(const std::string& session_id, const std::string& query);

  // Applies a Hit: bumps hit metrics and the entry's recency, appends the
  // user turn plus the cached response to the session (exactly as a fresh
  // LLM answer would be), and returns the cached response.
  std::string commit_hit(const std::string& session_id, const std::string& query,
                         const LookupResult& result, double latency_ms);

  // Applies a Miss outcome: stores a new entry holding the LLM response
  // and both vectors, indexes it, appends the turns to the session, bumps
  // miss metrics, and evicts down to capacity. Returns the new entry id.
  std::uint64_t record(const std::string& session_id, const std::string& query,
                       const std::string& response, const LookupResult& result,
                       std::size_t response_token_count, double latency_ms);

  // Evicts least-recently-hit entries (ties: oldest created, then smallest
  // id) until at or under capacity. Returns the number evicted.
  std::size_t evict_if_needed();

  Metrics snapshot_metrics() const;

  // Conversation history of a session (empty when the session is new).
  std::vector<Turn> session_history(const std::string& session_id) const;

  bool contains_entry(std::uint64_t id) const;

  // Clears every cache entry (store and index). Counters keep their
  // values; gauges drop to zero. Session histories are untouched.
  void flush();

  const CacheConfig& config() const { return config_; }
  const Embedder& embedder() const { return *embedder_; }
  const AttentionParams& params() const { return params_; }
  EntryStore& store() { return *store_; }
  const EntryStore& store() const { return *store_; }
  std::uint64_t g_version() const { return g_version_; }

 private:
  struct SessionState {
    std::vector<Turn> turns;
    EmbeddingMemo memo;
    std::uint32_t turn_index = 0;
  };

  struct Recency {
    std::uint64_t last_hit_at = 0;
    std::uint64_t created_at = 0;
  };

  SessionState& session_locked(const std::string& session_id);
  UnitVector compute_context_representation(SessionState& session,
                                            const std::string& query,
                                            const UnitVector& v_q);
  std::uint64_t next_tick();
  void append_exchange(SessionState& session, const std::string& query,
                       const std::string& response);
  std::size_t evict_locked();
  static std::size_t entry_footprint(const CacheEntry& entry);

  CacheConfig config_;
  std::unique_ptr<Embedder> embedder_;
  AttentionParams params_;
  std::uint64_t g_version_ = 0;
  std::unique_ptr<EntryStore> store_;
  std::unique_ptr<VectorIndex> vindex_;

  mutable std::mutex sessions_mutex_;
  std::unordered_map<std::string, std::unique_ptr<SessionState>> sessions_;

  mutable std::mutex state_mutex_;  // serializes record/evict/flush
  std::unordered_map<std::uint64_t, Recency> recency_;
  std::atomic<std::uint64_t> logical_clock_{1};

  mutable std::mutex metrics_mutex_;
  std::uint64_t queries_total_ = 0;
  std::uint64_t cache_hits_ = 0;
  std::uint64_t cache_misses_ = 0;
  std::uint64_t llm_calls_ = 0;
  std::uint64_t evictions_ = 0;
  std::uint64_t approx_memory_bytes_ = 0;
  std::vector<double> hit_latencies_ms_;
  std::vector<double> miss_latencies_ms_;
};

}  // namespace ctxcache
