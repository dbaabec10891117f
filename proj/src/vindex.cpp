#include "ctxcache/vindex.hpp"

#include <algorithm>

namespace ctxcache {

VectorIndex::VectorIndex(std::size_t dimension) : dimension_(dimension) {
  if (dimension < 1) throw ConfigError("dimension", "must be a positive integer");
}

void VectorIndex::insert(std::uint64_t id, const UnitVector& v) {
  if (v.dim() != dimension_) {
    throw DimensionError("index dimension is " + std::to_string(dimension_) +
                         ", vector has " + std::to_string(v.dim()));
  }
  std::unique_lock lock(mutex_);
  if (slots_.contains(id)) {
    throw DuplicateIdError("entry " + std::to_string(id) + " already indexed");
  }
  slots_.emplace(id, ids_.size());
  ids_.push_back(id);
  storage_.insert(storage_.end(), v.values().begin(), v.values().end());
}

void VectorIndex::remove(std::uint64_t id) {
  std::unique_lock lock(mutex_);
  auto it = slots_.find(id);
  if (it == slots_.end()) {
    throw NotFoundError("entry " + std::to_string(id) + " not in index");
  }
  const std::size_t slot = it->second;
  const std::size_t last = ids_.size() - 1;
  if (slot != last) {
    ids_[slot] = ids_[last];
    std::copy_n(storage_.begin() + static_cast<std::ptrdiff_t>(last * dimension_),
                dimension_,
                storage_.begin() + static_cast<std::ptrdiff_t>(slot * dimension_));
    slots_[ids_[slot]] = slot;
  }
  ids_.pop_back();
  storage_.resize(storage_.size() - dimension_);
  slots_.erase(it);
}

std::vector<Candidate> VectorIndex::query_threshold(const UnitVector& v_q, double theta1,
                                                    std::size_t k1_cap) const {
  if (v_q.dim() != dimension_) {
    throw DimensionError("query dimension " + std::to_string(v_q.dim()) +
                         " does not match index dimension " + std::to_string(dimension_));
  }
  std::shared_lock lock(mutex_);
  std::vector<Candidate> matches;
  const double* query = v_q.values().data();
  for (std::size_t slot = 0; slot < ids_.size(); ++slot) {
    const double* stored = storage_.data() + slot * dimension_;
    double dot = 0.0;
    for (std::size_t j = 0; j < dimension_; ++j) dot += query[j] * stored[j];
    const double similarity = std::clamp(dot, -1.0, 1.0);
    if (similarity > theta1) {
      matches.push_back({ids_[slot], similarity});
    }
  }
  std::sort(matches.begin(), matches.end(), [](const Candidate& a, const Candidate& b) {
    if (a.stage1_similarity != b.stage1_similarity) {
      return a.stage1_similarity > b.stage1_similarity;
    }
    return a.entry_id < b.entry_id;
  });
  if (matches.size() > k1_cap) matches.resize(k1_cap);
  return matches;
}

bool VectorIndex::contains(std::uint64_t id) const {
  std::shared_lock lock(mutex_);
  return slots_.contains(id);
}

std::size_t VectorIndex::size() const {
  std::shared_lock lock(mutex_);
  return ids_.size();
}

void VectorIndex::clear() {
  std::unique_lock lock(mutex_);
  ids_.clear();
  storage_.clear();
  slots_.clear();
}

}  // namespace ctxcache
