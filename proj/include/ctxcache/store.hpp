#pragma once

// Durable half of the dual-storage design: entry metadata plus both
// vectors per entry, persisted in a single append-only log with one
// CRC-checked record per put/delete and periodic compaction. The vector
// index is rebuildable from scan_entries(). On-disk layout in FORMAT.md.

#include <cstdint>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "ctxcache/core.hpp"

namespace ctxcache {

// One cached (query, response) pair with its query vector and context
// representation. Timestamps are logical ticks (monotonic, comparable
// across restarts); wall clock is kept separately for display only.
struct CacheEntry {
  std::uint64_t entry_id = 0;
  std::string session_id;
  std::uint32_t turn_index = 0;
  std::string query;
  std::string response;
  UnitVector v_q;
  UnitVector g;
  std::uint64_t created_at = 0;
  std::uint64_t last_hit_at = 0;
  std::uint32_t hit_count = 0;
  std::uint32_t response_token_count = 0;
  std::uint64_t params_version = 0;
  std::uint64_t wall_clock_ms = 0;

  bool operator==(const CacheEntry&) const = default;
};

class EntryStore {
 public:
  struct Options {
    bool sync_on_put = true;
    // Compact once this many dead records pile up and outnumber the live set.
    std::size_t compaction_min_dead = 1024;
  };

  // Opens (or creates) the log at `path`, replaying every intact record.
  // A torn or corrupt tail record is truncated away.
  explicit EntryStore(std::string path, Options options = {});
  ~EntryStore();

  EntryStore(const EntryStore&) = delete;
  EntryStore& operator=(const EntryStore&) = delete;

  // Durable once the call returns. Throws DuplicateIdError / StorageError.
  void put_entry(const CacheEntry& entry);

  // Throws NotFoundError.
  CacheEntry get_entry(std::uint64_t id) const;

  // Durable removal. Throws NotFoundError / StorageError.
  void delete_entry(std::uint64_t id);

  // Every live entry, ascending entry id.
  std::vector<CacheEntry> scan_entries() const;

  // Fresh monotonically increasing entry id. Ids are never reused, even
  // after deletion.
  std::uint64_t allocate_entry_id();

  // In-memory recency update (hit bookkeeping). Becomes durable at the
  // next compaction rather than costing a log append per cache hit.
  void touch_entry(std::uint64_t id, std::uint64_t last_hit_at, std::uint32_t hit_count);

  // Largest logical tick seen across stored entries; the engine resumes
  // its clock from here.
  std::uint64_t max_logical_tick() const;

  std::size_t size() const;
  bool contains(std::uint64_t id) const;

  // Removes every entry and truncates the log to a fresh header.
  void flush_all();

  // Rewrites the log to contain exactly the live entries.
  void compact();

  const std::string& path() const { return path_; }

 private:
  void append_record(std::uint8_t kind, const std::vector<std::uint8_t>& payload);
  void reopen_for_append();
  void recover();
  void write_header(std::uint64_t next_id_hint);
  void compact_locked();

  std::string path_;
  Options options_;
  mutable std::shared_mutex mutex_;
  std::map<std::uint64_t, CacheEntry> entries_;
  std::uint64_t next_entry_id_ = 1;
  std::size_t dead_records_ = 0;
  int fd_ = -1;
};

}  // namespace ctxcache
