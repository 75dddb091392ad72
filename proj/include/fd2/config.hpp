#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "fd2/fde.hpp"
#include "fd2/mrm.hpp"
#include "fd2/training.hpp"

namespace fd2 {

class ConfigError : public ValueError {
 public:
  ConfigError(std::string key, const std::string& what)
      : ValueError("config key '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Everything one configuration file controls.
struct PipelineConfig {
  EncoderConfig encoder;
  TrainConfig train;
  LossWeights loss;
  std::size_t cru_se_reduction = 4;
  std::size_t cru_min_channels = 4;

  PipelineConfig() { encoder.seed = train.seed; }

  CruConfig cru() const {
    CruConfig c = cru_config_for(encoder);
    c.se_reduction = cru_se_reduction;
    c.min_channels = cru_min_channels;
    return c;
  }

  void set_seed(std::uint64_t seed) {
    encoder.seed = seed;
    train.seed = seed;
  }
};

namespace detail {

template <class V>
V config_get(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(key, "wrong type (" + std::string(j.type_name()) + ")");
  }
}

inline std::size_t config_count(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number_unsigned()) throw ConfigError(key, "expected a non-negative integer");
  return j.get<std::size_t>();
}

inline double config_number(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError(key, "expected a number");
  return j.get<double>();
}

inline std::vector<std::pair<std::size_t, std::size_t>> config_pairs(const nlohmann::json& j, const std::string& key) {
  if (!j.is_array()) throw ConfigError(key, "expected a list of pairs");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number_unsigned() || !e[1].is_number_unsigned()) {
      throw ConfigError(key, "entries must be [int, int] pairs");
    }
    out.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
  }
  return out;
}

}  // namespace detail

/// Flat JSON object; unknown keys are rejected. Missing keys keep defaults.
inline PipelineConfig parse_config(const nlohmann::json& j) {
  using namespace detail;
  if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
  PipelineConfig cfg;
  EncoderConfig& e = cfg.encoder;
  TrainConfig& t = cfg.train;
  for (const auto& [key, v] : j.items()) {
    if (key == "alpha") {
      e.alpha = config_number(v, key);
      if (!(e.alpha > 0.0 && e.alpha < 1.0)) throw ConfigError(key, "must lie in (0,1)");
    } else if (key == "stem_channels") {
      e.stem_channels = config_count(v, key);
      if (e.stem_channels == 0) throw ConfigError(key, "must be positive");
    } else if (key == "stages") {
      e.stages = config_count(v, key);
      if (e.stages == 0) throw ConfigError(key, "must be positive");
    } else if (key == "group_count") {
      e.group_count = config_count(v, key);
      if (e.group_count == 0) throw ConfigError(key, "must be positive");
    } else if (key == "frequency_policy") {
      const auto s = config_get<std::string>(v, key);
      if (s == "zigzag_skip_dc") {
        e.frequency_policy = FrequencyPolicy::zigzag_skip_dc;
      } else if (s == "custom") {
        e.frequency_policy = FrequencyPolicy::custom;
      } else {
        throw ConfigError(key, "expected zigzag_skip_dc or custom, got '" + s + "'");
      }
    } else if (key == "custom_frequencies") {
      e.custom_frequencies.clear();
      for (auto [u, w] : config_pairs(v, key)) e.custom_frequencies.push_back({u, w});
    } else if (key == "branches") {
      e.branches.clear();
      for (auto [k, d] : config_pairs(v, key)) e.branches.push_back({k, d});
      if (e.branches.empty()) throw ConfigError(key, "needs at least one branch");
    } else if (key == "receptive_field") {
      e.receptive_field = config_count(v, key);
    } else if (key == "combination_mode") {
      try {
        e.combination_mode = combination_mode_from_string(config_get<std::string>(v, key));
      } catch (const ConfigError&) {
        throw;
      } catch (const ValueError& err) {
        throw ConfigError(key, err.what());
      }
    } else if (key == "lfu_mode") {
      const auto s = config_get<std::string>(v, key);
      if (s == "multi_branch") {
        e.lfu_mode = LfuMode::multi_branch;
      } else if (s == "merged") {
        e.lfu_mode = LfuMode::merged;
      } else {
        throw ConfigError(key, "expected multi_branch or merged, got '" + s + "'");
      }
    } else if (key == "symmetric_css") {
      e.symmetric_css = config_get<bool>(v, key);
    } else if (key == "normalized_dct") {
      e.normalized_dct = config_get<bool>(v, key);
    } else if (key == "seed") {
      if (!v.is_number_unsigned()) throw ConfigError(key, "expected a non-negative integer");
      cfg.set_seed(v.get<std::uint64_t>());
    } else if (key == "learning_rate") {
      t.learning_rate = config_number(v, key);
      if (!(t.learning_rate > 0.0)) throw ConfigError(key, "must be positive");
    } else if (key == "momentum") {
      t.momentum = config_number(v, key);
    } else if (key == "weight_decay") {
      t.weight_decay = config_number(v, key);
    } else if (key == "steps") {
      t.steps = config_count(v, key);
      if (t.steps == 0) throw ConfigError(key, "must be >= 1");
    } else if (key == "batch_size") {
      t.batch_size = config_count(v, key);
      if (t.batch_size == 0) throw ConfigError(key, "must be >= 1");
    } else if (key == "image_size") {
      t.image_size = config_count(v, key);
    } else if (key == "dataset_count") {
      t.dataset_count = config_count(v, key);
      if (t.dataset_count == 0) throw ConfigError(key, "must be >= 1");
    } else if (key == "mask_ratio") {
      t.mask_ratio = config_number(v, key);
      if (!(t.mask_ratio > 0.0 && t.mask_ratio < 1.0)) throw ConfigError(key, "must lie in (0,1)");
    } else if (key == "mask_patch") {
      t.mask_patch = config_count(v, key);
      if (t.mask_patch == 0) throw ConfigError(key, "must be positive");
    } else if (key == "lambda1") {
      cfg.loss.lambda1 = config_number(v, key);
      if (cfg.loss.lambda1 < 0.0) throw ConfigError(key, "must be non-negative");
    } else if (key == "lambda2") {
      cfg.loss.lambda2 = config_number(v, key);
      if (cfg.loss.lambda2 < 0.0) throw ConfigError(key, "must be non-negative");
    } else if (key == "cru_se_reduction") {
      cfg.cru_se_reduction = config_count(v, key);
      if (cfg.cru_se_reduction == 0) throw ConfigError(key, "must be positive");
    } else if (key == "cru_min_channels") {
      cfg.cru_min_channels = config_count(v, key);
      if (cfg.cru_min_channels == 0) throw ConfigError(key, "must be positive");
    } else {
      throw ConfigError(key, "unknown key");
    }
  }
  if (cfg.loss.lambda1 == 0.0 && cfg.loss.lambda2 == 0.0) throw ConfigError("lambda1", "lambda1 and lambda2 are both zero");
  try {
    (void)LfuConfig::make(e.stem_channels, e.receptive_field, e.branches);
  } catch (const ValueError& err) {
    throw ConfigError("branches", err.what());
  }
  return cfg;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& err) {
    throw ConfigError("<file>", std::string("malformed JSON: ") + err.what());
  }
  return parse_config(j);
}

}  // namespace fd2
