#include "ctxcache/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ctxcache {

namespace {

std::uint64_t wall_clock_now_ms() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
}

LatencySummary summarize(std::vector<double> samples) {
  LatencySummary summary;
  summary.count = samples.size();
  if (samples.empty()) return summary;
  summary.mean_ms =
      std::accumulate(samples.begin(), samples.end(), 0.0) / samples.size();
  std::sort(samples.begin(), samples.end());
  auto quantile = [&samples](double q) {
    const double rank = q * (samples.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    const std::size_t hi = std::min(lo + 1, samples.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return samples[lo] * (1.0 - frac) + samples[hi] * frac;
  };
  summary.p50_ms = quantile(0.50);
  summary.p95_ms = quantile(0.95);
  summary.max_ms = samples.back();
  return summary;
}

// Strategy tag mixed into the stored representation stamp so lookups never
// compare context vectors produced by different pipelines.
std::uint64_t strategy_version(const CacheConfig& config, const AttentionParams& params) {
  std::uint64_t hash = 0xCBF29CE484222325ull;
  const std::uint8_t tag = static_cast<std::uint8_t>(config.strategy);
  hash = fnv1a64(&tag, 1, hash);
  const std::uint64_t d = config.dimension;
  hash = fnv1a64(&d, sizeof(d), hash);
  if (config.strategy == ContextStrategy::attention) {
    const std::uint64_t pv = params.version();
    hash = fnv1a64(&pv, sizeof(pv), hash);
  }
  return hash;
}

}  // namespace

std::string to_string(MissReason reason) {
  switch (reason) {
    case MissReason::no_stage1_candidates: return "no_stage1_candidates";
    case MissReason::below_theta2: return "below_theta2";
    case MissReason::empty_cache: return "empty_cache";
  }
  return "unknown";
}

CacheEngine::CacheEngine(CacheConfig config, std::unique_ptr<Embedder> embedder,
                         std::optional<AttentionParams> params)
    : config_(std::move(config)) {
  config_.validate();
  embedder_ = embedder ? std::move(embedder) : make_embedder(config_);
  if (embedder_->dim() != config_.dimension) {
    throw DimensionError("embedder dimension does not match configuration");
  }
  params_ = params ? std::move(*params) : AttentionParams::from_config(config_);
  params_.validate();
  if (params_.dim() != config_.dimension) {
    throw DimensionError("attention params dimension does not match configuration");
  }
  g_version_ = strategy_version(config_, params_);

  store_ = std::make_unique<EntryStore>(
      config_.store_path, EntryStore::Options{.sync_on_put = config_.sync_on_put});
  vindex_ = std::make_unique<VectorIndex>(config_.dimension);

  // Rebuild the volatile side of the dual storage from the durable side.
  std::uint64_t max_tick = 0;
  std::uint64_t memory = 0;
  for (const CacheEntry& entry : store_->scan_entries()) {
    vindex_->insert(entry.entry_id, entry.v_q);
    recency_[entry.entry_id] = {entry.last_hit_at, entry.created_at};
    max_tick = std::max({max_tick, entry.created_at, entry.last_hit_at});
    memory += entry_footprint(entry);
  }
  logical_clock_.store(max_tick + 1);
  approx_memory_bytes_ = memory;
}

std::uint64_t CacheEngine::next_tick() { return logical_clock_.fetch_add(1); }

CacheEngine::SessionState& CacheEngine::session_locked(const std::string& session_id) {
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) {
    it = sessions_.emplace(session_id, std::make_unique<SessionState>()).first;
  }
  return *it->second;
}

std::size_t CacheEngine::entry_footprint(const CacheEntry& entry) {
  return entry.query.size() + entry.response.size() + entry.session_id.size() +
         2 * entry.v_q.dim() * sizeof(double) + 96;
}

UnitVector CacheEngine::compute_context_representation(SessionState& session,
                                                       const std::string& query,
                                                       const UnitVector& v_q) {
  // History turns that participate in the context, most recent n_max only.
  std::vector<Turn> context_turns;
  for (const Turn& turn : session.turns) {
    if (turn.role == Role::user || config_.embed_assistant_turns) {
      context_turns.push_back(turn);
    }
  }
  if (context_turns.size() > config_.max_context_turns) {
    context_turns.erase(context_turns.begin(),
                        context_turns.end() - config_.max_context_turns);
  }

  switch (config_.strategy) {
    case ContextStrategy::query_only:
      return v_q;
    case ContextStrategy::concat: {
      std::string joined;
      for (const Turn& turn : context_turns) {
        joined += turn.text;
        joined += ' ';
      }
      joined += query;
      return embedder_->embed(joined);
    }
    case ContextStrategy::average: {
      const std::vector<UnitVector> history =
          embed_history(*embedder_, context_turns, session.memo);
      std::vector<double> mean(config_.dimension, 0.0);
      for (const UnitVector& v : history) {
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += v[i];
      }
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += v_q[i];
      const double n = static_cast<double>(history.size() + 1);
      for (double& v : mean) v /= n;
      return UnitVector::normalize(mean);
    }
    case ContextStrategy::attention: {
      std::vector<UnitVector> rows =
          embed_history(*embedder_, context_turns, session.memo);
      rows.push_back(v_q);
      return pool_context(ContextSequence(std::move(rows)), params_);
    }
  }
  throw ConfigError("strategy", "unhandled context strategy");
}

LookupResult CacheEngine::lookup(const std::string& session_id, const std::string& query) {
  UnitVector v_q;
  UnitVector g_current;
  {
    std::lock_guard session_lock(sessions_mutex_);
    SessionState& session = session_locked(session_id);
    const std::string key = normalize_text(query);
    if (auto memoized = session.memo.lookup(key)) {
      v_q = std::move(*memoized);
    } else {
      v_q = embedder_->embed(query);
      session.memo.insert(key, v_q);
    }
    g_current = compute_context_representation(session, query, v_q);
  }

  LookupResult result{.decision = {}, .g_current = g_current, .v_q = v_q};

  const std::vector<Candidate> stage1 =
      vindex_->query_threshold(v_q, config_.theta1, config_.k1_cap);
  if (stage1.empty()) {
    result.decision.miss_reason = vindex_->size() == 0
                                      ? MissReason::empty_cache
                                      : MissReason::no_stage1_candidates;
    return result;
  }

  if (config_.strategy == ContextStrategy::query_only) {
    // GPTCache-style: best stage-1 candidate wins outright, no context gate.
    const Candidate& best = stage1.front();
    result.decision.hit = true;
    result.decision.matched_entry_id = best.entry_id;
    result.decision.stage1_similarity = best.stage1_similarity;
    result.decision.stage2_similarity = best.stage1_similarity;
    return result;
  }

  struct Best {
    double s_c;
    std::uint64_t last_hit_at;
    std::uint64_t entry_id;
    double stage1;
  };
  std::optional<Best> best;
  for (const Candidate& candidate : stage1) {
    CacheEntry entry;
    try {
      entry = store_->get_entry(candidate.entry_id);
    } catch (const NotFoundError&) {
      continue;  // raced with an eviction
    }
    if (entry.params_version != g_version_) continue;  // incomparable representation
    const double s_c = cosine(g_current, entry.g);
    const bool better =
        !best || s_c > best->s_c ||
        (s_c == best->s_c && (entry.last_hit_at > best->last_hit_at ||
                              (entry.last_hit_at == best->last_hit_at &&
                               entry.entry_id < best->entry_id)));
    if (better) {
      best = Best{s_c, entry.last_hit_at, entry.entry_id, candidate.stage1_similarity};
    }
  }

  if (best && best->s_c > config_.theta2) {
    result.decision.hit = true;
    result.decision.matched_entry_id = best->entry_id;
    result.decision.stage1_similarity = best->stage1;
    result.decision.stage2_similarity = best->s_c;
  } else {
    result.decision.miss_reason = MissReason::below_theta2;
    if (best) {
      result.decision.stage1_similarity = best->stage1;
      result.decision.stage2_similarity = best->s_c;
    }
  }
  return result;
}

void CacheEngine::append_exchange(SessionState& session, const std::string& query,
                                  const std::string& response) {
  session.turns.push_back(Turn::make(Role::user, query));
  session.turns.push_back(Turn::make(Role::assistant, response));
  session.turn_index += 1;
}

std::string CacheEngine::commit_hit(const std::string& session_id,
                                    const std::string& query,
                                    const LookupResult& result, double latency_ms) {
  if (!result.decision.hit || !result.decision.matched_entry_id) {
    throw Error("commit_hit called with a miss decision");
  }
  const std::uint64_t id = *result.decision.matched_entry_id;
  CacheEntry entry = store_->get_entry(id);

  {
    std::lock_guard state_lock(state_mutex_);
    const std::uint64_t tick = next_tick();
    store_->touch_entry(id, tick, entry.hit_count + 1);
    recency_[id].last_hit_at = tick;
  }
  {
    std::lock_guard session_lock(sessions_mutex_);
    SessionState& session = session_locked(session_id);
    append_exchange(session, query, entry.response);
  }
  {
    std::lock_guard metrics_lock(metrics_mutex_);
    queries_total_ += 1;
    cache_hits_ += 1;
    hit_latencies_ms_.push_back(latency_ms);
  }

  if (config_.record_on_hit) {
    // Optional alias entry for the paraphrase under its own context.
    std::lock_guard state_lock(state_mutex_);
    const std::uint64_t alias_id = store_->allocate_entry_id();
    const std::uint64_t tick = next_tick();
    CacheEntry alias{.entry_id = alias_id,
                     .session_id = session_id,
                     .turn_index = 0,
                     .query = query,
                     .response = entry.response,
                     .v_q = result.v_q,
                     .g = result.g_current,
                     .created_at = tick,
                     .last_hit_at = tick,
                     .hit_count = 0,
                     .response_token_count = entry.response_token_count,
                     .params_version = g_version_,
                     .wall_clock_ms = wall_clock_now_ms()};
    store_->put_entry(alias);
    try {
      vindex_->insert(alias_id, alias.v_q);
    } catch (...) {
      store_->delete_entry(alias_id);
      throw;
    }
    recency_[alias_id] = {tick, tick};
    {
      std::lock_guard metrics_lock(metrics_mutex_);
      approx_memory_bytes_ += entry_footprint(alias);
    }
    evict_locked();
  }

  return entry.response;
}

std::uint64_t CacheEngine::record(const std::string& session_id, const std::string& query,
                                  const std::string& response, const LookupResult& result,
                                  std::size_t response_token_count, double latency_ms) {
  std::uint64_t id = 0;
  {
    std::lock_guard state_lock(state_mutex_);
    id = store_->allocate_entry_id();
    const std::uint64_t tick = next_tick();
    std::uint32_t turn_index = 0;
    {
      std::lock_guard session_lock(sessions_mutex_);
      turn_index = session_locked(session_id).turn_index;
    }
    CacheEntry entry{.entry_id = id,
                     .session_id = session_id,
                     .turn_index = turn_index,
                     .query = query,
                     .response = response,
                     .v_q = result.v_q,
                     .g = result.g_current,
                     .created_at = tick,
                     .last_hit_at = tick,
                     .hit_count = 0,
                     .response_token_count =
                         static_cast<std::uint32_t>(response_token_count),
                     .params_version = g_version_,
                     .wall_clock_ms = wall_clock_now_ms()};
    store_->put_entry(entry);
    try {
      vindex_->insert(id, entry.v_q);
    } catch (...) {
      store_->delete_entry(id);  // keep store and index consistent
      throw;
    }
    recency_[id] = {tick, tick};
    {
      std::lock_guard metrics_lock(metrics_mutex_);
      approx_memory_bytes_ += entry_footprint(entry);
    }
  }

  {
    std::lock_guard session_lock(sessions_mutex_);
    SessionState& session = session_locked(session_id);
    append_exchange(session, query, response);
  }
  {
    std::lock_guard metrics_lock(metrics_mutex_);
    queries_total_ += 1;
    cache_misses_ += 1;
    llm_calls_ += 1;
    miss_latencies_ms_.push_back(latency_ms);
  }

  {
    std::lock_guard state_lock(state_mutex_);
    evict_locked();
  }
  return id;
}

std::size_t CacheEngine::evict_if_needed() {
  std::lock_guard state_lock(state_mutex_);
  return evict_locked();
}

std::size_t CacheEngine::evict_locked() {
  std::size_t evicted = 0;
  while (store_->size() > config_.capacity) {
    std::optional<std::uint64_t> victim;
    Recency victim_recency{};
    for (const auto& [id, recency] : recency_) {
      const bool staler =
          !victim || recency.last_hit_at < victim_recency.last_hit_at ||
          (recency.last_hit_at == victim_recency.last_hit_at &&
           (recency.created_at < victim_recency.created_at ||
            (recency.created_at == victim_recency.created_at && id < *victim)));
      if (staler) {
        victim = id;
        victim_recency = recency;
      }
    }
    if (!victim) break;
    const CacheEntry entry = store_->get_entry(*victim);
    store_->delete_entry(*victim);
    vindex_->remove(*victim);
    recency_.erase(*victim);
    ++evicted;
    std::lock_guard metrics_lock(metrics_mutex_);
    evictions_ += 1;
    approx_memory_bytes_ -= std::min<std::uint64_t>(approx_memory_bytes_,
                                                    entry_footprint(entry));
  }
  return evicted;
}

Metrics CacheEngine::snapshot_metrics() const {
  std::lock_guard metrics_lock(metrics_mutex_);
  Metrics metrics;
  metrics.queries_total = queries_total_;
  metrics.cache_hits = cache_hits_;
  metrics.cache_misses = cache_misses_;
  metrics.llm_calls = llm_calls_;
  metrics.evictions = evictions_;
  metrics.entries_live = store_->size();
  metrics.approx_memory_bytes = approx_memory_bytes_;
  metrics.hit_latency = summarize(hit_latencies_ms_);
  metrics.miss_latency = summarize(miss_latencies_ms_);
  return metrics;
}

std::vector<Turn> CacheEngine::session_history(const std::string& session_id) const {
  std::lock_guard session_lock(sessions_mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) return {};
  return it->second->turns;
}

bool CacheEngine::contains_entry(std::uint64_t id) const { return store_->contains(id); }

void CacheEngine::flush() {
  std::lock_guard state_lock(state_mutex_);
  store_->flush_all();
  vindex_->clear();
  recency_.clear();
  std::lock_guard metrics_lock(metrics_mutex_);
  approx_memory_bytes_ = 0;
}

}  // namespace ctxcache
