#pragma once

// Self-attention pooling over a conversation's turn embeddings, producing
// the unified context representation g used by stage-2 matching. Single
// head, identity projections by default, optional sinusoidal positional
// encoding. Pure functions over immutable inputs throughout.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctxcache/core.hpp"

namespace ctxcache {

// Minimal dense row-major matrix. This project deliberately has no tensor
// library; attention and the trainer only need matmul-sized pieces.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  static Matrix identity(std::size_t n);

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  bool operator==(const Matrix&) const = default;
};

Matrix matmul(const Matrix& a, const Matrix& b);         // a * b
Matrix matmul_transposed(const Matrix& a, const Matrix& b);  // a * b^T
Matrix transposed_matmul(const Matrix& a, const Matrix& b);  // a^T * b
void add_scaled(Matrix& target, const Matrix& source, double scale);

struct AttentionParams {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;
  bool positional_encoding = true;
  PoolingMode pooling_mode = PoolingMode::last;

  // Identity projections of the given dimension.
  static AttentionParams identity(std::size_t dimension, bool positional_encoding = true,
                                  PoolingMode pooling = PoolingMode::last);

  static AttentionParams from_config(const CacheConfig& config);

  std::size_t dim() const { return w_q.rows; }

  // Deterministic stamp over the matrices and pooling settings. Cache
  // entries record the stamp of the params that produced their g; lookups
  // refuse to compare representations across different stamps.
  std::uint64_t version() const;

  void validate() const;
};

// Ordered turn embeddings, oldest first, the current query last.
struct ContextSequence {
  std::vector<UnitVector> vectors;

  explicit ContextSequence(std::vector<UnitVector> vs);

  std::size_t size() const { return vectors.size(); }
  std::size_t dim() const { return vectors.front().dim(); }
};

// Sinusoidal positional encoding value for position `pos`, component `i`:
// sin(pos / 10000^(2k/d)) at i = 2k, cos of the same angle at i = 2k+1.
double positional_encoding_value(std::size_t pos, std::size_t component,
                                 std::size_t dimension);

// Rows of the attention input: vectors[i] + PE(i), or the plain vectors
// when positional encoding is disabled.
Matrix positional_encode(const ContextSequence& seq, const AttentionParams& params);

// Numerically stable in-place softmax (subtracts the max first).
void softmax_inplace(std::span<double> values);

// Single-head scaled dot-product attention: Q = X Wq, K = X Wk, V = X Wv,
// A = rowsoftmax(Q K^T / sqrt(d)), output A V. Every row of A sums to 1.
Matrix attend(const Matrix& rows, const AttentionParams& params);

// Forward pass with intermediates kept for backpropagation.
struct AttentionTrace {
  Matrix input;     // X (after positional encoding)
  Matrix queries;   // X Wq
  Matrix keys;      // X Wk
  Matrix values;    // X Wv
  Matrix weights;   // row-stochastic A
  Matrix attended;  // A V
  std::vector<double> pooled;  // pre-normalization pooled row p
  double pooled_norm = 0.0;
};

AttentionTrace pool_context_traced(const ContextSequence& seq,
                                   const AttentionParams& params);

// positional_encode + attend + pooling (last row or mean of rows), then
// L2-normalization: g = SelfAttention(V_current).
UnitVector pool_context(const ContextSequence& seq, const AttentionParams& params);

// Weights file shared with the trainer: "CTXW" magic, u16 format version,
// u32 d, then Wq, Wk, Wv as row-major little-endian f64. Layout details in
// FORMAT.md.
void save_attention_weights(const AttentionParams& params, const std::string& path);
AttentionParams load_attention_weights(const std::string& path, bool positional_encoding,
                                       PoolingMode pooling);

}  // namespace ctxcache
