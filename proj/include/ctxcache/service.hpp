#pragma once

// The interception layer: a chat endpoint that consults the engine, falls
// through to an LLM backend on a miss, and exposes machine-readable stats
// with a request-level execution log.

#include <atomic>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxcache/engine.hpp"

namespace ctxcache {

struct ChatRequest {
  std::string session_id;
  std::string message;
};

struct ChatResponse {
  std::string response;
  bool hit = false;
  double latency_ms = 0.0;
  std::optional<std::uint64_t> matched_entry_id;
  std::optional<double> stage1_similarity;
  std::optional<double> stage2_similarity;
  std::uint64_t tokens_saved = 0;
};

struct LlmReply {
  std::string text;
  std::size_t token_count = 0;  // whitespace word count, not model tokens
};

class LlmBackend {
 public:
  virtual ~LlmBackend() = default;
  virtual LlmReply invoke(const std::vector<Turn>& history, const std::string& query) = 0;
  std::uint64_t call_count() const { return calls_.load(); }

 protected:
  std::atomic<std::uint64_t> calls_{0};
};

// Sleeps a fixed delay and answers "MOCK_RESPONSE(<hash of normalized
// query>)" — deterministic, so replays and tests are stable.
class MockLlm : public LlmBackend {
 public:
  explicit MockLlm(int fixed_delay_ms) : fixed_delay_ms_(fixed_delay_ms) {}
  LlmReply invoke(const std::vector<Turn>& history, const std::string& query) override;

 private:
  int fixed_delay_ms_;
};

// Chat-completion style client: POST {model, messages:[{role, content}..]}
// and read choices[0].message.content.
class RemoteLlm : public LlmBackend {
 public:
  RemoteLlm(std::string endpoint, std::string model, int timeout_ms);
  LlmReply invoke(const std::vector<Turn>& history, const std::string& query) override;

 private:
  std::string endpoint_;
  std::string model_;
  int timeout_ms_;
};

std::unique_ptr<LlmBackend> make_llm_backend(const CacheConfig& config);

LlmReply llm_invoke(LlmBackend& backend, const std::vector<Turn>& history,
                    const std::string& query);

// One line of the execution log kept for the stats endpoint.
struct RequestLog {
  std::string session_id;
  bool hit = false;
  std::optional<double> stage1_similarity;
  std::optional<double> stage2_similarity;
  std::optional<std::uint64_t> matched_entry_id;
  double latency_ms = 0.0;
};

class CacheService {
 public:
  static constexpr std::size_t kRequestLogCapacity = 1000;

  CacheService(std::shared_ptr<CacheEngine> engine, std::unique_ptr<LlmBackend> backend);

  // Full miss/hit workflow for one chat request. Requests within one
  // session are serialized; distinct sessions proceed concurrently.
  // Throws EmptyQueryError for blank messages and LlmBackendError when the
  // backend fails (the cache is left untouched in that case).
  ChatResponse handle_chat(const ChatRequest& request);

  // Metrics snapshot plus the newest-first execution log.
  nlohmann::json handle_stats() const;

  void handle_flush();

  CacheEngine& engine() { return *engine_; }
  LlmBackend& backend() { return *backend_; }

 private:
  std::shared_ptr<CacheEngine> engine_;
  std::unique_ptr<LlmBackend> backend_;

  std::mutex sessions_mutex_;
  std::unordered_map<std::string, std::unique_ptr<std::mutex>> session_locks_;

  mutable std::mutex log_mutex_;
  std::deque<RequestLog> request_log_;  // newest first
};

nlohmann::json to_json(const Metrics& metrics);
nlohmann::json to_json(const ChatResponse& response);

// Blocking HTTP server on `host:port` with POST /v1/chat, GET /v1/stats,
// and POST /v1/admin/flush. `started` (optional) is signalled once the
// socket is listening; `stop` can be polled by callers via the returned
// server handle in tests.
int run_http_server(CacheService& service, const std::string& host, int port);

}  // namespace ctxcache
