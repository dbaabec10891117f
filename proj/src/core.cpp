#include "ctxcache/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace ctxcache {

namespace {

constexpr double kUnitNormTolerance = 1e-9;

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

double l2_norm(std::span<const double> values) {
  double sum = 0.0;
  for (double v : values) sum += v * v;
  return std::sqrt(sum);
}

}  // namespace

UnitVector UnitVector::normalize(std::span<const double> raw) {
  if (raw.empty()) {
    throw DegenerateVectorError("cannot normalize an empty vector");
  }
  if (!all_finite(raw)) {
    throw DegenerateVectorError("cannot normalize a vector with NaN/Inf components");
  }
  const double norm = l2_norm(raw);
  if (norm == 0.0) {
    throw DegenerateVectorError("cannot normalize the zero vector");
  }
  std::vector<double> scaled(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) scaled[i] = raw[i] / norm;
  return UnitVector(std::move(scaled));
}

UnitVector UnitVector::from_unit_data(std::vector<double> values) {
  if (values.empty() || !all_finite(values)) {
    throw DegenerateVectorError("unit vector data must be non-empty and finite");
  }
  const double norm = l2_norm(values);
  if (std::abs(norm - 1.0) > kUnitNormTolerance) {
    throw DegenerateVectorError("vector data is not unit norm");
  }
  return UnitVector(std::move(values));
}

double cosine(const UnitVector& a, const UnitVector& b) {
  if (a.dim() != b.dim()) {
    throw DimensionError("cosine: dimension mismatch (" + std::to_string(a.dim()) +
                         " vs " + std::to_string(b.dim()) + ")");
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) dot += a[i] * b[i];
  return std::clamp(dot, -1.0, 1.0);
}

std::size_t word_count(const std::string& text) {
  std::size_t count = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++count;
    }
  }
  return count;
}

Turn Turn::make(Role role, std::string text) {
  if (word_count(text) == 0) {
    throw EmptyQueryError("turn text is empty after whitespace normalization");
  }
  Turn turn;
  turn.role = role;
  turn.token_count = word_count(text);
  turn.text = std::move(text);
  return turn;
}

void CacheConfig::validate() const {
  if (dimension < 1) throw ConfigError("dimension", "must be a positive integer");
  if (!(theta1 > 0.0 && theta1 <= 1.0)) throw ConfigError("theta1", "must be in (0, 1]");
  if (!(theta2 > 0.0 && theta2 <= 1.0)) throw ConfigError("theta2", "must be in (0, 1]");
  if (k1_cap < 1) throw ConfigError("k1_cap", "must be >= 1");
  if (max_context_turns < 1) throw ConfigError("max_context_turns", "must be >= 1");
  if (capacity < 1) throw ConfigError("capacity", "must be >= 1");
  if (embed_timeout_ms <= 0) throw ConfigError("embed_timeout_ms", "must be > 0");
  if (embed_max_retries < 0) throw ConfigError("embed_max_retries", "must be >= 0");
  if (llm_mock_delay_ms < 0) throw ConfigError("llm_mock_delay_ms", "must be >= 0");
  if (llm_timeout_ms <= 0) throw ConfigError("llm_timeout_ms", "must be > 0");
  if (embedder_kind == EmbedderKind::remote && embed_endpoint.empty()) {
    throw ConfigError("embed_endpoint", "required when embedder_kind is remote");
  }
  if (llm_backend == LlmKind::remote && llm_endpoint.empty()) {
    throw ConfigError("llm_endpoint", "required when llm_backend is remote");
  }
}

std::string to_string(PoolingMode mode) {
  return mode == PoolingMode::last ? "last" : "mean";
}

std::string to_string(ContextStrategy strategy) {
  switch (strategy) {
    case ContextStrategy::attention: return "attention";
    case ContextStrategy::query_only: return "query_only";
    case ContextStrategy::concat: return "concat";
    case ContextStrategy::average: return "average";
  }
  return "attention";
}

std::string to_string(EmbedderKind kind) {
  return kind == EmbedderKind::token_hash ? "token_hash" : "remote";
}

std::string to_string(LlmKind kind) {
  return kind == LlmKind::mock ? "mock" : "remote";
}

namespace {

std::string trim(const std::string& s) {
  std::size_t begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  std::size_t end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "on" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "off" || value == "0" || value == "no") return false;
  throw ConfigError(key, "expected a boolean, got '" + value + "'");
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    double parsed = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + value + "'");
  }
}

long long parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    long long parsed = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected an integer, got '" + value + "'");
  }
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  long long parsed = parse_int(key, value);
  if (parsed < 0) throw ConfigError(key, "must be non-negative");
  return static_cast<std::size_t>(parsed);
}

PoolingMode parse_pooling(const std::string& key, const std::string& value) {
  if (value == "last") return PoolingMode::last;
  if (value == "mean") return PoolingMode::mean;
  throw ConfigError(key, "expected 'last' or 'mean', got '" + value + "'");
}

ContextStrategy parse_strategy(const std::string& key, const std::string& value) {
  if (value == "attention") return ContextStrategy::attention;
  if (value == "query_only") return ContextStrategy::query_only;
  if (value == "concat") return ContextStrategy::concat;
  if (value == "average") return ContextStrategy::average;
  throw ConfigError(key, "unknown strategy '" + value + "'");
}

EmbedderKind parse_embedder_kind(const std::string& key, const std::string& value) {
  if (value == "token_hash") return EmbedderKind::token_hash;
  if (value == "remote") return EmbedderKind::remote;
  throw ConfigError(key, "expected 'token_hash' or 'remote', got '" + value + "'");
}

LlmKind parse_llm_kind(const std::string& key, const std::string& value) {
  if (value == "mock") return LlmKind::mock;
  if (value == "remote") return LlmKind::remote;
  throw ConfigError(key, "expected 'mock' or 'remote', got '" + value + "'");
}

// Assigns one key/value pair onto the config. Returns false for unknown keys.
bool assign_key(CacheConfig& config, const std::string& key, const std::string& value,
                bool& dimension_set) {
  if (key == "dimension" || key == "d") {
    config.dimension = parse_size(key, value);
    dimension_set = true;
  } else if (key == "theta1") {
    config.theta1 = parse_double(key, value);
  } else if (key == "theta2") {
    config.theta2 = parse_double(key, value);
  } else if (key == "k1_cap") {
    config.k1_cap = parse_size(key, value);
  } else if (key == "max_context_turns") {
    config.max_context_turns = parse_size(key, value);
  } else if (key == "capacity") {
    config.capacity = parse_size(key, value);
  } else if (key == "pooling_mode") {
    config.pooling_mode = parse_pooling(key, value);
  } else if (key == "positional_encoding") {
    config.positional_encoding = parse_bool(key, value);
  } else if (key == "embed_assistant_turns") {
    config.embed_assistant_turns = parse_bool(key, value);
  } else if (key == "record_on_hit") {
    config.record_on_hit = parse_bool(key, value);
  } else if (key == "strategy") {
    config.strategy = parse_strategy(key, value);
  } else if (key == "embedder_kind") {
    config.embedder_kind = parse_embedder_kind(key, value);
  } else if (key == "embed_endpoint") {
    config.embed_endpoint = value;
  } else if (key == "embed_model") {
    config.embed_model = value;
  } else if (key == "embed_timeout_ms") {
    config.embed_timeout_ms = static_cast<int>(parse_int(key, value));
  } else if (key == "embed_max_retries") {
    config.embed_max_retries = static_cast<int>(parse_int(key, value));
  } else if (key == "store_path") {
    config.store_path = value;
  } else if (key == "sync_on_put") {
    config.sync_on_put = parse_bool(key, value);
  } else if (key == "weights_path") {
    config.weights_path = value;
  } else if (key == "llm_backend") {
    config.llm_backend = parse_llm_kind(key, value);
  } else if (key == "llm_mock_delay_ms") {
    config.llm_mock_delay_ms = static_cast<int>(parse_int(key, value));
  } else if (key == "llm_endpoint") {
    config.llm_endpoint = value;
  } else if (key == "llm_model") {
    config.llm_model = value;
  } else if (key == "llm_timeout_ms") {
    config.llm_timeout_ms = static_cast<int>(parse_int(key, value));
  } else {
    return false;
  }
  return true;
}

const char* kConfigKeys[] = {
    "dimension",       "theta1",           "theta2",
    "k1_cap",          "max_context_turns", "capacity",
    "pooling_mode",    "positional_encoding", "embed_assistant_turns",
    "record_on_hit",   "strategy",         "embedder_kind",
    "embed_endpoint",  "embed_model",      "embed_timeout_ms",
    "embed_max_retries", "store_path",     "sync_on_put",
    "weights_path",    "llm_backend",      "llm_mock_delay_ms",
    "llm_endpoint",    "llm_model",        "llm_timeout_ms",
};

}  // namespace

CacheConfig parse_config(const std::string& text) {
  CacheConfig config;
  bool dimension_set = false;
  std::istringstream stream(text);
  std::string line;
  int line_number = 0;
  while (std::getline(stream, line)) {
    ++line_number;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      eq = line.find(':');
    }
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_number),
                        "expected 'key = value', got '" + line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!assign_key(config, key, value, dimension_set)) {
      throw ConfigError(key, "unknown configuration key");
    }
  }
  if (!dimension_set && config.embedder_kind == EmbedderKind::remote) {
    config.dimension = 768;  // typical width of a transformer sentence encoder
  }
  return config;
}

void apply_env_overrides(CacheConfig& config) {
  bool dimension_set = false;
  for (const char* key : kConfigKeys) {
    std::string env_name = "CONTEXTCACHE_";
    for (const char* p = key; *p; ++p) {
      env_name += static_cast<char>(std::toupper(static_cast<unsigned char>(*p)));
    }
    const char* value = std::getenv(env_name.c_str());
    if (value != nullptr) {
      assign_key(config, key, value, dimension_set);
    }
  }
}

CacheConfig load_config(const std::string& text) {
  CacheConfig config = parse_config(text);
  apply_env_overrides(config);
  config.validate();
  return config;
}

CacheConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("config", "cannot open config file '" + path + "'");
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return load_config(buffer.str());
}

std::string save_config(const CacheConfig& config) {
  std::ostringstream out;
  out.precision(17);
  out << "dimension = " << config.dimension << "\n";
  out << "theta1 = " << config.theta1 << "\n";
  out << "theta2 = " << config.theta2 << "\n";
  out << "k1_cap = " << config.k1_cap << "\n";
  out << "max_context_turns = " << config.max_context_turns << "\n";
  out << "capacity = " << config.capacity << "\n";
  out << "pooling_mode = " << to_string(config.pooling_mode) << "\n";
  out << "positional_encoding = " << (config.positional_encoding ? "true" : "false") << "\n";
  out << "embed_assistant_turns = " << (config.embed_assistant_turns ? "true" : "false") << "\n";
  out << "record_on_hit = " << (config.record_on_hit ? "true" : "false") << "\n";
  out << "strategy = " << to_string(config.strategy) << "\n";
  out << "embedder_kind = " << to_string(config.embedder_kind) << "\n";
  out << "embed_endpoint = " << config.embed_endpoint << "\n";
  out << "embed_model = " << config.embed_model << "\n";
  out << "embed_timeout_ms = " << config.embed_timeout_ms << "\n";
  out << "embed_max_retries = " << config.embed_max_retries << "\n";
  out << "store_path = " << config.store_path << "\n";
  out << "sync_on_put = " << (config.sync_on_put ? "true" : "false") << "\n";
  out << "weights_path = " << config.weights_path << "\n";
  out << "llm_backend = " << to_string(config.llm_backend) << "\n";
  out << "llm_mock_delay_ms = " << config.llm_mock_delay_ms << "\n";
  out << "llm_endpoint = " << config.llm_endpoint << "\n";
  out << "llm_model = " << config.llm_model << "\n";
  out << "llm_timeout_ms = " << config.llm_timeout_ms << "\n";
  return out.str();
}

}  // namespace ctxcache
