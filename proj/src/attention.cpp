#include "ctxcache/attention.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ctxcache/embedder.hpp"

namespace ctxcache {

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw DimensionError("matmul: inner dimensions differ");
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a.at(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) {
        out.at(i, j) += aik * b.at(k, j);
      }
    }
  }
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw DimensionError("matmul_transposed: inner dimensions differ");
  Matrix out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.rows; ++j) {
      double sum = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) sum += a.at(i, k) * b.at(j, k);
      out.at(i, j) = sum;
    }
  }
  return out;
}

Matrix transposed_matmul(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw DimensionError("transposed_matmul: inner dimensions differ");
  Matrix out(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = a.at(k, i);
      if (aki == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) {
        out.at(i, j) += aki * b.at(k, j);
      }
    }
  }
  return out;
}

void add_scaled(Matrix& target, const Matrix& source, double scale) {
  if (target.rows != source.rows || target.cols != source.cols) {
    throw DimensionError("add_scaled: shape mismatch");
  }
  for (std::size_t i = 0; i < target.data.size(); ++i) {
    target.data[i] += scale * source.data[i];
  }
}

AttentionParams AttentionParams::identity(std::size_t dimension, bool positional_encoding,
                                          PoolingMode pooling) {
  AttentionParams params;
  params.w_q = Matrix::identity(dimension);
  params.w_k = Matrix::identity(dimension);
  params.w_v = Matrix::identity(dimension);
  params.positional_encoding = positional_encoding;
  params.pooling_mode = pooling;
  return params;
}

AttentionParams AttentionParams::from_config(const CacheConfig& config) {
  if (!config.weights_path.empty()) {
    return load_attention_weights(config.weights_path, config.positional_encoding,
                                  config.pooling_mode);
  }
  return identity(config.dimension, config.positional_encoding, config.pooling_mode);
}

std::uint64_t AttentionParams::version() const {
  std::uint64_t hash = 0xCBF29CE484222325ull;
  auto mix = [&hash](const void* data, std::size_t size) {
    hash = fnv1a64(data, size, hash);
  };
  const std::uint64_t d = w_q.rows;
  mix(&d, sizeof(d));
  const std::uint8_t flags[2] = {static_cast<std::uint8_t>(positional_encoding),
                                 static_cast<std::uint8_t>(pooling_mode)};
  mix(flags, sizeof(flags));
  mix(w_q.data.data(), w_q.data.size() * sizeof(double));
  mix(w_k.data.data(), w_k.data.size() * sizeof(double));
  mix(w_v.data.data(), w_v.data.size() * sizeof(double));
  return hash;
}

void AttentionParams::validate() const {
  const std::size_t d = w_q.rows;
  for (const Matrix* m : {&w_q, &w_k, &w_v}) {
    if (m->rows != d || m->cols != d) {
      throw DimensionError("attention projections must all be d x d");
    }
    for (double v : m->data) {
      if (!std::isfinite(v)) throw DegenerateVectorError("attention projection has NaN/Inf");
    }
  }
}

ContextSequence::ContextSequence(std::vector<UnitVector> vs) : vectors(std::move(vs)) {
  if (vectors.empty()) {
    throw DimensionError("context sequence must be non-empty");
  }
  for (const UnitVector& v : vectors) {
    if (v.dim() != vectors.front().dim()) {
      throw DimensionError("context sequence has mixed dimensions");
    }
  }
}

double positional_encoding_value(std::size_t pos, std::size_t component,
                                 std::size_t dimension) {
  const std::size_t pair = component / 2;
  const double exponent = static_cast<double>(2 * pair) / static_cast<double>(dimension);
  const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
  return component % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

Matrix positional_encode(const ContextSequence& seq, const AttentionParams& params) {
  const std::size_t n = seq.size();
  const std::size_t d = seq.dim();
  Matrix rows(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      rows.at(i, j) = seq.vectors[i][j];
      if (params.positional_encoding) {
        rows.at(i, j) += positional_encoding_value(i, j, d);
      }
    }
  }
  return rows;
}

void softmax_inplace(std::span<double> values) {
  if (values.empty()) return;
  const double max_value = *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (double& v : values) {
    v = std::exp(v - max_value);
    sum += v;
  }
  for (double& v : values) v /= sum;
}

namespace {

AttentionTrace run_attention(const Matrix& rows, const AttentionParams& params) {
  if (rows.cols != params.dim()) {
    throw DimensionError("attend: input dimension " + std::to_string(rows.cols) +
                         " does not match params dimension " +
                         std::to_string(params.dim()));
  }
  AttentionTrace trace;
  trace.input = rows;
  trace.queries = matmul(rows, params.w_q);
  trace.keys = matmul(rows, params.w_k);
  trace.values = matmul(rows, params.w_v);

  const double scale = 1.0 / std::sqrt(static_cast<double>(rows.cols));
  trace.weights = matmul_transposed(trace.queries, trace.keys);
  for (double& v : trace.weights.data) v *= scale;
  for (std::size_t i = 0; i < trace.weights.rows; ++i) {
    softmax_inplace(trace.weights.row(i));
  }
  trace.attended = matmul(trace.weights, trace.values);
  return trace;
}

}  // namespace

Matrix attend(const Matrix& rows, const AttentionParams& params) {
  if (rows.rows == 0) throw DimensionError("attend: no input rows");
  return run_attention(rows, params).attended;
}

AttentionTrace pool_context_traced(const ContextSequence& seq,
                                   const AttentionParams& params) {
  AttentionTrace trace = run_attention(positional_encode(seq, params), params);
  const std::size_t n = trace.attended.rows;
  const std::size_t d = trace.attended.cols;
  trace.pooled.assign(d, 0.0);
  if (params.pooling_mode == PoolingMode::last) {
    const auto last = trace.attended.row(n - 1);
    trace.pooled.assign(last.begin(), last.end());
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        trace.pooled[j] += trace.attended.at(i, j);
      }
    }
    for (double& v : trace.pooled) v /= static_cast<double>(n);
  }
  double norm = 0.0;
  for (double v : trace.pooled) norm += v * v;
  trace.pooled_norm = std::sqrt(norm);
  return trace;
}

UnitVector pool_context(const ContextSequence& seq, const AttentionParams& params) {
  const AttentionTrace trace = pool_context_traced(seq, params);
  return UnitVector::normalize(trace.pooled);
}

namespace {

constexpr char kWeightsMagic[4] = {'C', 'T', 'X', 'W'};
constexpr std::uint16_t kWeightsVersion = 1;

void write_matrix(std::ofstream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

Matrix read_matrix(std::ifstream& in, std::size_t d) {
  Matrix m(d, d);
  in.read(reinterpret_cast<char*>(m.data.data()),
          static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  if (!in) throw StorageError("weights file truncated");
  return m;
}

}  // namespace

void save_attention_weights(const AttentionParams& params, const std::string& path) {
  params.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot open weights file for writing: " + path);
  out.write(kWeightsMagic, sizeof(kWeightsMagic));
  out.write(reinterpret_cast<const char*>(&kWeightsVersion), sizeof(kWeightsVersion));
  const std::uint32_t d = static_cast<std::uint32_t>(params.dim());
  out.write(reinterpret_cast<const char*>(&d), sizeof(d));
  write_matrix(out, params.w_q);
  write_matrix(out, params.w_k);
  write_matrix(out, params.w_v);
  if (!out) throw StorageError("failed writing weights file: " + path);
}

AttentionParams load_attention_weights(const std::string& path, bool positional_encoding,
                                       PoolingMode pooling) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open weights file: " + path);
  char magic[4];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kWeightsMagic, sizeof(magic)) != 0) {
    throw StorageError("not a weights file: " + path);
  }
  std::uint16_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kWeightsVersion) {
    throw StorageError("unsupported weights file version");
  }
  std::uint32_t d = 0;
  in.read(reinterpret_cast<char*>(&d), sizeof(d));
  if (!in || d == 0) throw StorageError("weights file has invalid dimension");
  AttentionParams params;
  params.w_q = read_matrix(in, d);
  params.w_k = read_matrix(in, d);
  params.w_v = read_matrix(in, d);
  params.positional_encoding = positional_encoding;
  params.pooling_mode = pooling;
  params.validate();
  return params;
}

}  // namespace ctxcache
