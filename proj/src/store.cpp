#include "ctxcache/store.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>

namespace ctxcache {

namespace {

constexpr char kMagic[4] = {'C', 'T', 'X', 'C'};
constexpr std::uint16_t kFormatVersion = 1;
constexpr std::size_t kHeaderSize = 4 + 2 + 8;  // magic + version + next-id hint

constexpr std::uint8_t kKindPut = 1;
constexpr std::uint8_t kKindDelete = 2;

// Field tags of the put payload. Every field is [u8 tag][u32 len][bytes],
// so unknown tags can be skipped by readers of newer files.
enum FieldTag : std::uint8_t {
  kFieldEntryId = 1,
  kFieldSessionId = 2,
  kFieldTurnIndex = 3,
  kFieldQuery = 4,
  kFieldResponse = 5,
  kFieldQueryVector = 6,
  kFieldContextVector = 7,
  kFieldCreatedAt = 8,
  kFieldLastHitAt = 9,
  kFieldHitCount = 10,
  kFieldResponseTokens = 11,
  kFieldParamsVersion = 12,
  kFieldWallClockMs = 13,
};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t value) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t value) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

std::uint32_t read_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void append_field(std::vector<std::uint8_t>& out, FieldTag tag,
                  const void* data, std::size_t size) {
  out.push_back(tag);
  put_u32(out, static_cast<std::uint32_t>(size));
  const auto* bytes = static_cast<const std::uint8_t*>(data);
  out.insert(out.end(), bytes, bytes + size);
}

void append_field_u32(std::vector<std::uint8_t>& out, FieldTag tag, std::uint32_t value) {
  std::uint8_t buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<std::uint8_t>(value >> (8 * i));
  append_field(out, tag, buf, sizeof(buf));
}

void append_field_u64(std::vector<std::uint8_t>& out, FieldTag tag, std::uint64_t value) {
  std::uint8_t buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<std::uint8_t>(value >> (8 * i));
  append_field(out, tag, buf, sizeof(buf));
}

void append_field_vector(std::vector<std::uint8_t>& out, FieldTag tag,
                         const UnitVector& v) {
  // Little-endian f64 array. (This build targets little-endian hosts; the
  // integer fields are byte-swapped explicitly, doubles are memcpy'd.)
  append_field(out, tag, v.values().data(), v.values().size() * sizeof(double));
}

std::vector<std::uint8_t> encode_put_payload(const CacheEntry& entry) {
  std::vector<std::uint8_t> payload;
  append_field_u64(payload, kFieldEntryId, entry.entry_id);
  append_field(payload, kFieldSessionId, entry.session_id.data(), entry.session_id.size());
  append_field_u32(payload, kFieldTurnIndex, entry.turn_index);
  append_field(payload, kFieldQuery, entry.query.data(), entry.query.size());
  append_field(payload, kFieldResponse, entry.response.data(), entry.response.size());
  append_field_vector(payload, kFieldQueryVector, entry.v_q);
  append_field_vector(payload, kFieldContextVector, entry.g);
  append_field_u64(payload, kFieldCreatedAt, entry.created_at);
  append_field_u64(payload, kFieldLastHitAt, entry.last_hit_at);
  append_field_u32(payload, kFieldHitCount, entry.hit_count);
  append_field_u32(payload, kFieldResponseTokens, entry.response_token_count);
  append_field_u64(payload, kFieldParamsVersion, entry.params_version);
  append_field_u64(payload, kFieldWallClockMs, entry.wall_clock_ms);
  return payload;
}

std::vector<double> decode_f64_array(const std::uint8_t* data, std::size_t size) {
  if (size % sizeof(double) != 0) throw StorageError("vector field has odd length");
  std::vector<double> values(size / sizeof(double));
  std::memcpy(values.data(), data, size);
  return values;
}

CacheEntry decode_put_payload(const std::uint8_t* data, std::size_t size) {
  CacheEntry entry;
  std::optional<std::vector<double>> v_q;
  std::optional<std::vector<double>> g;
  std::size_t offset = 0;
  while (offset < size) {
    if (offset + 5 > size) throw StorageError("truncated field header");
    const std::uint8_t tag = data[offset];
    const std::uint32_t length = read_u32(data + offset + 1);
    offset += 5;
    if (offset + length > size) throw StorageError("truncated field body");
    const std::uint8_t* body = data + offset;
    switch (tag) {
      case kFieldEntryId: entry.entry_id = read_u64(body); break;
      case kFieldSessionId: entry.session_id.assign(body, body + length); break;
      case kFieldTurnIndex: entry.turn_index = read_u32(body); break;
      case kFieldQuery: entry.query.assign(body, body + length); break;
      case kFieldResponse: entry.response.assign(body, body + length); break;
      case kFieldQueryVector: v_q = decode_f64_array(body, length); break;
      case kFieldContextVector: g = decode_f64_array(body, length); break;
      case kFieldCreatedAt: entry.created_at = read_u64(body); break;
      case kFieldLastHitAt: entry.last_hit_at = read_u64(body); break;
      case kFieldHitCount: entry.hit_count = read_u32(body); break;
      case kFieldResponseTokens: entry.response_token_count = read_u32(body); break;
      case kFieldParamsVersion: entry.params_version = read_u64(body); break;
      case kFieldWallClockMs: entry.wall_clock_ms = read_u64(body); break;
      default: break;  // unknown field from a newer writer
    }
    offset += length;
  }
  if (!v_q || !g) throw StorageError("put record is missing a vector field");
  entry.v_q = UnitVector::from_unit_data(std::move(*v_q));
  entry.g = UnitVector::from_unit_data(std::move(*g));
  return entry;
}

std::uint64_t decode_delete_payload(const std::uint8_t* data, std::size_t size) {
  std::size_t offset = 0;
  while (offset + 5 <= size) {
    const std::uint8_t tag = data[offset];
    const std::uint32_t length = read_u32(data + offset + 1);
    offset += 5;
    if (offset + length > size) throw StorageError("truncated field body");
    if (tag == kFieldEntryId && length == 8) return read_u64(data + offset);
    offset += length;
  }
  throw StorageError("delete record missing entry id");
}

std::uint32_t record_crc(const std::uint8_t* data, std::size_t size) {
  return static_cast<std::uint32_t>(
      ::crc32(0, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

}  // namespace

EntryStore::EntryStore(std::string path, Options options)
    : path_(std::move(path)), options_(options) {
  recover();
  reopen_for_append();
}

EntryStore::~EntryStore() {
  if (fd_ >= 0) {
    // Persist the id-allocation hint on clean close.
    std::unique_lock lock(mutex_);
    write_header(next_entry_id_);
    ::close(fd_);
    fd_ = -1;
  }
}

void EntryStore::recover() {
  namespace fs = std::filesystem;
  if (!fs::exists(path_)) {
    // Fresh store: write a header-only file.
    const int fd = ::open(path_.c_str(), O_CREAT | O_WRONLY | O_TRUNC, 0644);
    if (fd < 0) throw StorageError("cannot create store file: " + path_);
    std::uint8_t header[kHeaderSize];
    std::memcpy(header, kMagic, 4);
    std::memcpy(header + 4, &kFormatVersion, 2);
    std::uint64_t hint = 1;
    std::memcpy(header + 6, &hint, 8);
    if (::write(fd, header, sizeof(header)) != static_cast<ssize_t>(sizeof(header))) {
      ::close(fd);
      throw StorageError("cannot write store header: " + path_);
    }
    ::close(fd);
    return;
  }

  std::vector<std::uint8_t> contents;
  {
    const int fd = ::open(path_.c_str(), O_RDONLY);
    if (fd < 0) throw StorageError("cannot open store file: " + path_);
    const off_t file_size = ::lseek(fd, 0, SEEK_END);
    ::lseek(fd, 0, SEEK_SET);
    contents.resize(static_cast<std::size_t>(file_size));
    std::size_t done = 0;
    while (done < contents.size()) {
      const ssize_t n = ::read(fd, contents.data() + done, contents.size() - done);
      if (n <= 0) {
        ::close(fd);
        throw StorageError("cannot read store file: " + path_);
      }
      done += static_cast<std::size_t>(n);
    }
    ::close(fd);
  }

  if (contents.size() < kHeaderSize || std::memcmp(contents.data(), kMagic, 4) != 0) {
    throw StorageError("not a cache store file: " + path_);
  }
  std::uint16_t version = 0;
  std::memcpy(&version, contents.data() + 4, 2);
  if (version != kFormatVersion) {
    throw StorageError("unsupported store format version " + std::to_string(version));
  }
  std::uint64_t id_hint = 0;
  std::memcpy(&id_hint, contents.data() + 6, 8);

  std::uint64_t max_id_seen = 0;
  std::size_t offset = kHeaderSize;
  std::size_t valid_end = offset;
  while (offset + 4 <= contents.size()) {
    const std::uint32_t length = read_u32(contents.data() + offset);
    // length covers [kind][payload]; the crc follows.
    if (length < 1 || offset + 4 + length + 4 > contents.size()) break;
    const std::uint8_t* body = contents.data() + offset + 4;
    const std::uint32_t stored_crc = read_u32(body + length);
    if (record_crc(body, length) != stored_crc) break;  // torn/corrupt tail

    const std::uint8_t kind = body[0];
    if (kind == kKindPut) {
      CacheEntry entry = decode_put_payload(body + 1, length - 1);
      max_id_seen = std::max(max_id_seen, entry.entry_id);
      if (entries_.contains(entry.entry_id)) ++dead_records_;
      entries_.insert_or_assign(entry.entry_id, std::move(entry));
    } else if (kind == kKindDelete) {
      const std::uint64_t deleted_id = decode_delete_payload(body + 1, length - 1);
      max_id_seen = std::max(max_id_seen, deleted_id);
      entries_.erase(deleted_id);
      ++dead_records_;
    }
    offset += 4 + length + 4;
    valid_end = offset;
  }

  next_entry_id_ = std::max(id_hint, max_id_seen + 1);

  if (valid_end < contents.size()) {
    // Drop the torn tail so the next append starts from a clean boundary.
    if (::truncate(path_.c_str(), static_cast<off_t>(valid_end)) != 0) {
      throw StorageError("cannot truncate torn store tail: " + path_);
    }
  }
}

void EntryStore::reopen_for_append() {
  fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND);
  if (fd_ < 0) throw StorageError("cannot open store for append: " + path_);
}

void EntryStore::write_header(std::uint64_t next_id_hint) {
  const int fd = ::open(path_.c_str(), O_WRONLY);
  if (fd < 0) return;
  std::uint8_t header[kHeaderSize];
  std::memcpy(header, kMagic, 4);
  std::memcpy(header + 4, &kFormatVersion, 2);
  std::memcpy(header + 6, &next_id_hint, 8);
  (void)::pwrite(fd, header, sizeof(header), 0);
  ::close(fd);
}

void EntryStore::append_record(std::uint8_t kind, const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> record;
  const std::uint32_t length = static_cast<std::uint32_t>(1 + payload.size());
  record.reserve(4 + length + 4);
  put_u32(record, length);
  record.push_back(kind);
  record.insert(record.end(), payload.begin(), payload.end());
  const std::uint32_t crc = record_crc(record.data() + 4, length);
  put_u32(record, crc);

  std::size_t done = 0;
  while (done < record.size()) {
    const ssize_t n = ::write(fd_, record.data() + done, record.size() - done);
    if (n <= 0) throw StorageError("store append failed: " + path_);
    done += static_cast<std::size_t>(n);
  }
  if (options_.sync_on_put && ::fdatasync(fd_) != 0) {
    throw StorageError("store fdatasync failed: " + path_);
  }
}

void EntryStore::put_entry(const CacheEntry& entry) {
  std::unique_lock lock(mutex_);
  if (entries_.contains(entry.entry_id)) {
    throw DuplicateIdError("entry " + std::to_string(entry.entry_id) + " already stored");
  }
  if (entry.v_q.dim() != entry.g.dim()) {
    throw DimensionError("entry vectors have mismatched dimensions");
  }
  append_record(kKindPut, encode_put_payload(entry));
  entries_.emplace(entry.entry_id, entry);
  next_entry_id_ = std::max(next_entry_id_, entry.entry_id + 1);
}

CacheEntry EntryStore::get_entry(std::uint64_t id) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(id);
  if (it == entries_.end()) {
    throw NotFoundError("entry " + std::to_string(id) + " not found");
  }
  return it->second;
}

void EntryStore::delete_entry(std::uint64_t id) {
  std::unique_lock lock(mutex_);
  auto it = entries_.find(id);
  if (it == entries_.end()) {
    throw NotFoundError("entry " + std::to_string(id) + " not found");
  }
  std::vector<std::uint8_t> payload;
  append_field_u64(payload, kFieldEntryId, id);
  append_record(kKindDelete, payload);
  entries_.erase(it);
  dead_records_ += 2;  // the delete record and the put it cancels
  if (dead_records_ >= options_.compaction_min_dead && dead_records_ > entries_.size()) {
    compact_locked();
  }
}

std::vector<CacheEntry> EntryStore::scan_entries() const {
  std::shared_lock lock(mutex_);
  std::vector<CacheEntry> out;
  out.reserve(entries_.size());
  for (const auto& [id, entry] : entries_) out.push_back(entry);
  return out;
}

std::uint64_t EntryStore::allocate_entry_id() {
  std::unique_lock lock(mutex_);
  return next_entry_id_++;
}

void EntryStore::touch_entry(std::uint64_t id, std::uint64_t last_hit_at,
                             std::uint32_t hit_count) {
  std::unique_lock lock(mutex_);
  auto it = entries_.find(id);
  if (it == entries_.end()) {
    throw NotFoundError("entry " + std::to_string(id) + " not found");
  }
  it->second.last_hit_at = last_hit_at;
  it->second.hit_count = hit_count;
}

std::uint64_t EntryStore::max_logical_tick() const {
  std::shared_lock lock(mutex_);
  std::uint64_t max_tick = 0;
  for (const auto& [id, entry] : entries_) {
    max_tick = std::max({max_tick, entry.created_at, entry.last_hit_at});
  }
  return max_tick;
}

std::size_t EntryStore::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

bool EntryStore::contains(std::uint64_t id) const {
  std::shared_lock lock(mutex_);
  return entries_.contains(id);
}

void EntryStore::flush_all() {
  std::unique_lock lock(mutex_);
  entries_.clear();
  dead_records_ = 0;
  compact_locked();
}

void EntryStore::compact() {
  std::unique_lock lock(mutex_);
  compact_locked();
}

void EntryStore::compact_locked() {
  const std::string temp_path = path_ + ".compact";
  {
    const int fd = ::open(temp_path.c_str(), O_CREAT | O_WRONLY | O_TRUNC, 0644);
    if (fd < 0) throw StorageError("cannot create compaction file: " + temp_path);
    std::uint8_t header[kHeaderSize];
    std::memcpy(header, kMagic, 4);
    std::memcpy(header + 4, &kFormatVersion, 2);
    std::memcpy(header + 6, &next_entry_id_, 8);
    std::vector<std::uint8_t> blob(header, header + sizeof(header));
    for (const auto& [id, entry] : entries_) {
      const std::vector<std::uint8_t> payload = encode_put_payload(entry);
      const std::uint32_t length = static_cast<std::uint32_t>(1 + payload.size());
      put_u32(blob, length);
      blob.push_back(kKindPut);
      blob.insert(blob.end(), payload.begin(), payload.end());
      const std::uint32_t crc = record_crc(blob.data() + blob.size() - length, length);
      put_u32(blob, crc);
    }
    std::size_t done = 0;
    while (done < blob.size()) {
      const ssize_t n = ::write(fd, blob.data() + done, blob.size() - done);
      if (n <= 0) {
        ::close(fd);
        throw StorageError("compaction write failed: " + temp_path);
      }
      done += static_cast<std::size_t>(n);
    }
    ::fdatasync(fd);
    ::close(fd);
  }
  if (fd_ >= 0) ::close(fd_);
  if (std::rename(temp_path.c_str(), path_.c_str()) != 0) {
    throw StorageError("compaction rename failed: " + path_);
  }
  dead_records_ = 0;
  reopen_for_append();
}

}  // namespace ctxcache
