#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "blockbits/allocator.hpp"
#include "blockbits/binary_io.hpp"

namespace blockbits {

struct RunConfig {
  // model
  std::size_t vocab = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t seq_len = 64;
  std::uint64_t seed = 7;
  // corpus and pretraining
  std::size_t corpus_length = 1 << 18;
  std::uint64_t corpus_seed = 11;
  std::string corpus_path;  // optional raw byte corpus (vocab must be 256)
  std::size_t pretrain_steps = 2000;
  double lr = 1.0;
  std::size_t pretrain_batch = 4;
  std::string checkpoint;  // reuse instead of pretraining when set
  // quantizer and partition
  std::size_t group_size = 32;
  int bit_min = 1;
  int bit_max = 8;
  bool symmetric = false;
  std::size_t block_rows = 16;
  std::size_t block_cols = 32;
  // search
  double budget = 3.0;
  std::vector<double> budgets = {2.0, 2.5, 3.0, 3.5, 4.0};
  double gamma0 = 0.05;
  double gammaT = 0.02;
  std::size_t max_iters = 200;
  std::size_t batch_seqs = 8;
  std::size_t calib_seqs = 128;
  std::uint64_t calib_seed = 3;
  std::uint64_t search_seed = 0;
  std::size_t reorder_seqs = 32;
  bool reorder = true;
  bool adaptive_gradients = true;
  std::string up_aggregation = "signed";
  // output
  std::string out_dir = "run";
  bool heatmaps = true;

  ModelSpec model_spec() const { return {vocab, d_model, n_layers, n_heads, d_ff, seq_len, seed}; }

  QuantConfig quant_config() const {
    QuantConfig q;
    q.group_size = group_size;
    q.bit_min = bit_min;
    q.bit_max = bit_max;
    q.symmetric = symmetric;
    return q;
  }

  SearchOptions search_options(double b) const {
    SearchOptions o;
    o.budget = b;
    o.gamma0 = gamma0;
    o.gammaT = gammaT;
    o.batch_seqs = batch_seqs;
    o.max_iters = max_iters;
    o.adaptive_gradients = adaptive_gradients;
    o.up_aggregation = up_aggregation == "l1" ? UpAggregation::L1 : UpAggregation::Signed;
    o.seed = search_seed;
    return o;
  }

  void validate() const;
};

namespace detail {

enum class KeyKind { Size, Seed, Int, Real, Bool, String, RealList };

struct ConfigKey {
  const char* name;
  KeyKind kind;
  const char* help;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::ordered_json(const RunConfig&)> get;
};

template <class T>
ConfigKey key(const char* name, KeyKind kind, T RunConfig::*field, const char* help) {
  return {name, kind, help, [field](RunConfig& c, const nlohmann::json& j) { c.*field = j.get<T>(); },
          [field](const RunConfig& c) { return nlohmann::ordered_json(c.*field); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      key("vocab", KeyKind::Size, &RunConfig::vocab, "vocabulary size"),
      key("d_model", KeyKind::Size, &RunConfig::d_model, "residual width"),
      key("n_layers", KeyKind::Size, &RunConfig::n_layers, "decoder layers"),
      key("n_heads", KeyKind::Size, &RunConfig::n_heads, "attention heads"),
      key("d_ff", KeyKind::Size, &RunConfig::d_ff, "MLP width"),
      key("seq_len", KeyKind::Size, &RunConfig::seq_len, "sequence length"),
      key("seed", KeyKind::Seed, &RunConfig::seed, "model init seed"),
      key("corpus_length", KeyKind::Size, &RunConfig::corpus_length, "synthetic corpus tokens"),
      key("corpus_seed", KeyKind::Seed, &RunConfig::corpus_seed, "synthetic corpus seed"),
      key("corpus_path", KeyKind::String, &RunConfig::corpus_path, "raw byte corpus file"),
      key("pretrain_steps", KeyKind::Size, &RunConfig::pretrain_steps, "SGD steps"),
      key("lr", KeyKind::Real, &RunConfig::lr, "SGD learning rate"),
      key("pretrain_batch", KeyKind::Size, &RunConfig::pretrain_batch, "sequences per SGD step"),
      key("checkpoint", KeyKind::String, &RunConfig::checkpoint, "existing checkpoint to reuse"),
      key("group_size", KeyKind::Size, &RunConfig::group_size, "weights per scale group"),
      key("bit_min", KeyKind::Int, &RunConfig::bit_min, "lowest bitwidth"),
      key("bit_max", KeyKind::Int, &RunConfig::bit_max, "highest bitwidth"),
      key("symmetric", KeyKind::Bool, &RunConfig::symmetric, "symmetric quantization grid"),
      key("block_rows", KeyKind::Size, &RunConfig::block_rows, "block height"),
      key("block_cols", KeyKind::Size, &RunConfig::block_cols, "block width"),
      key("budget", KeyKind::Real, &RunConfig::budget, "average weight bits"),
      key("budgets", KeyKind::RealList, &RunConfig::budgets, "sweep budgets"),
      key("gamma0", KeyKind::Real, &RunConfig::gamma0, "initial update ratio"),
      key("gammaT", KeyKind::Real, &RunConfig::gammaT, "final update ratio"),
      key("max_iters", KeyKind::Size, &RunConfig::max_iters, "search iteration cap"),
      key("batch_seqs", KeyKind::Size, &RunConfig::batch_seqs, "sequences per search iteration"),
      key("calib_seqs", KeyKind::Size, &RunConfig::calib_seqs, "calibration sequences"),
      key("calib_seed", KeyKind::Seed, &RunConfig::calib_seed, "calibration sampling seed"),
      key("search_seed", KeyKind::Seed, &RunConfig::search_seed, "batch sampling seed"),
      key("reorder_seqs", KeyKind::Size, &RunConfig::reorder_seqs, "sequences for reorder scores"),
      key("reorder", KeyKind::Bool, &RunConfig::reorder, "sensitivity-driven channel reordering"),
      key("adaptive_gradients", KeyKind::Bool, &RunConfig::adaptive_gradients, "recompute gradients each iteration"),
      key("up_aggregation", KeyKind::String, &RunConfig::up_aggregation, "signed or l1"),
      key("out_dir", KeyKind::String, &RunConfig::out_dir, "output directory"),
      key("heatmaps", KeyKind::Bool, &RunConfig::heatmaps, "write PGM/CSV heatmaps"),
  };
  return keys;
}

inline const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (name == k.name) return &k;
  return nullptr;
}

inline void check_kind(const ConfigKey& k, const nlohmann::json& v) {
  bool ok = false;
  switch (k.kind) {
    case KeyKind::Size:
    case KeyKind::Seed: ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0); break;
    case KeyKind::Int: ok = v.is_number_integer(); break;
    case KeyKind::Real: ok = v.is_number(); break;
    case KeyKind::Bool: ok = v.is_boolean(); break;
    case KeyKind::String: ok = v.is_string(); break;
    case KeyKind::RealList:
      ok = v.is_array();
      for (const auto& e : v) ok = ok && e.is_number();
      break;
  }
  if (!ok) throw ConfigError(k.name, "value " + v.dump() + " has the wrong type");
}

// Flag text to the JSON value the key expects.
inline nlohmann::json parse_flag(const ConfigKey& k, const std::string& text) {
  try {
    switch (k.kind) {
      case KeyKind::String: return text;
      case KeyKind::Bool:
        if (text == "true" || text == "1" || text == "on") return true;
        if (text == "false" || text == "0" || text == "off") return false;
        throw ConfigError(k.name, "expected true/false, got '" + text + "'");
      case KeyKind::RealList: {
        nlohmann::json arr = nlohmann::json::array();
        std::size_t start = 0;
        while (start <= text.size()) {
          const auto comma = text.find(',', start);
          const std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
          std::size_t used = 0;
          arr.push_back(std::stod(item, &used));
          if (used != item.size()) throw std::invalid_argument(item);
          if (comma == std::string::npos) break;
          start = comma + 1;
        }
        return arr;
      }
      default: {
        auto v = nlohmann::json::parse(text);
        check_kind(k, v);
        return v;
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError(k.name, "cannot parse '" + text + "'");
  }
}

}  // namespace detail

inline void RunConfig::validate() const {
  try {
    model_spec().validate(group_size);
  } catch (const SpecError& e) {
    throw ConfigError("model", e.what());
  }
  if (group_size == 0) throw ConfigError("group_size", "must be positive");
  if (bit_min < 0 || bit_min > bit_max || bit_max > 8) throw ConfigError("bit_min", "need 0 <= bit_min <= bit_max <= 8");
  if (block_rows == 0) throw ConfigError("block_rows", "must be positive");
  if (block_cols == 0 || block_cols % group_size) throw ConfigError("block_cols", "must be a multiple of group_size");
  if (!(budget >= bit_min && budget <= bit_max)) throw ConfigError("budget", "must lie within [bit_min, bit_max]");
  for (double b : budgets)
    if (!(b >= bit_min && b <= bit_max)) throw ConfigError("budgets", "every budget must lie within [bit_min, bit_max]");
  if (!(gamma0 > 0.0 && gamma0 <= 1.0)) throw ConfigError("gamma0", "must lie in (0, 1]");
  if (!(gammaT > 0.0 && gammaT <= gamma0)) throw ConfigError("gammaT", "must lie in (0, gamma0]");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "must be positive");
  if (batch_seqs == 0) throw ConfigError("batch_seqs", "must be positive");
  if (calib_seqs == 0) throw ConfigError("calib_seqs", "must be positive");
  if (reorder_seqs == 0) throw ConfigError("reorder_seqs", "must be positive");
  if (up_aggregation != "signed" && up_aggregation != "l1") throw ConfigError("up_aggregation", "expected signed or l1");
  if (out_dir.empty()) throw ConfigError("out_dir", "must not be empty");
  if (!corpus_path.empty() && vocab != 256) throw ConfigError("corpus_path", "byte corpora need vocab 256");
}

// Overlays a JSON object onto `c`. Unknown keys and wrong types are rejected.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const detail::ConfigKey* k = detail::find_key(it.key());
    if (!k) throw ConfigError(it.key(), "unknown key");
    detail::check_kind(*k, it.value());
    k->set(c, it.value());
  }
}

inline RunConfig config_from_text(const std::string& text) {
  RunConfig c;
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
  apply_config_json(c, j);
  return c;
}

// File values first, then flag overrides (key -> raw flag text), then
// validation.
inline RunConfig load_config(const std::string& path, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig c = path.empty() ? RunConfig{} : config_from_text(read_text(path));
  for (const auto& [name, text] : flags) {
    const detail::ConfigKey* k = detail::find_key(name);
    if (!k) throw ConfigError(name, "unknown key");
    k->set(c, detail::parse_flag(*k, text));
  }
  c.validate();
  return c;
}

inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  for (const auto& k : detail::config_keys()) j[k.name] = k.get(c);
  return j;
}

}  // namespace blockbits
