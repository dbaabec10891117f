#pragma once

// Exact vector index over cached current-query vectors, serving the
// coarse stage-1 candidate filter. The implementation is a flat scan over
// contiguous storage: correctness claims are about the pipeline, so exact
// semantics beat ANN recall here. An approximate backend could slot in
// behind the same contract later.

#include <cstdint>
#include <shared_mutex>
#include <unordered_map>
#include <vector>

#include "ctxcache/core.hpp"

namespace ctxcache {

struct Candidate {
  std::uint64_t entry_id = 0;
  double stage1_similarity = 0.0;

  bool operator==(const Candidate&) const = default;
};

class VectorIndex {
 public:
  explicit VectorIndex(std::size_t dimension);

  // Registers `v` under `id`. Throws DuplicateIdError / DimensionError.
  void insert(std::uint64_t id, const UnitVector& v);

  // Removes `id`. Throws NotFoundError when absent.
  void remove(std::uint64_t id);

  // All entries with cos(v_q, v_c) > theta1 (strict), sorted by similarity
  // descending, ties broken by smaller entry id, truncated to k1_cap.
  // Readers see a consistent snapshot.
  std::vector<Candidate> query_threshold(const UnitVector& v_q, double theta1,
                                         std::size_t k1_cap) const;

  bool contains(std::uint64_t id) const;
  std::size_t size() const;
  std::size_t dim() const { return dimension_; }
  void clear();

 private:
  std::size_t dimension_;
  mutable std::shared_mutex mutex_;
  std::vector<std::uint64_t> ids_;       // slot -> id
  std::vector<double> storage_;          // slot-major, dimension_ stride
  std::unordered_map<std::uint64_t, std::size_t> slots_;  // id -> slot
};

}  // namespace ctxcache
