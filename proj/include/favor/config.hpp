#pragma once

// Run configuration: a strict JSON schema with defaults taken from the
// reference training table, optionally overridden per key through the
// environment.
//
// Every key has an environment variable FAVOR_<PATH>, where PATH is the key
// path upper-cased and joined with '_' (for example FAVOR_LEARNING_RATE,
// FAVOR_SYNTHETIC_NUM_CLASSES). The variable's value is read as JSON when it
// parses and as a plain string otherwise.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "favor/error.hpp"
#include "favor/fewshot.hpp"
#include "favor/grpo.hpp"
#include "favor/harness.hpp"
#include "favor/policy.hpp"

namespace favor {

enum class RunMode { Grpo, Sft, Eval, Sweep };

inline std::string mode_name(RunMode m) {
  switch (m) {
    case RunMode::Grpo: return "grpo";
    case RunMode::Sft: return "sft";
    case RunMode::Eval: return "eval";
    case RunMode::Sweep: return "sweep";
  }
  return "grpo";
}

inline RunMode parse_mode(const std::string& s) {
  if (s == "grpo") return RunMode::Grpo;
  if (s == "sft") return RunMode::Sft;
  if (s == "eval") return RunMode::Eval;
  if (s == "sweep") return RunMode::Sweep;
  throw ContractViolation("unknown mode '" + s + "' (expected grpo, sft, eval or sweep)");
}

enum class InitKind { Base, Zero };

struct RunConfig {
  GrpoConfig train;
  DecodeMode eval_decoding = DecodeMode::Greedy;

  // Data: exactly one of manifest / synthetic.
  std::optional<std::string> manifest;
  std::optional<SyntheticTaskSpec> synthetic = SyntheticTaskSpec{};
  std::size_t shots = 4;
  std::uint64_t data_seed = kDefaultDataSeed;

  // Policy.
  std::size_t hidden_dim = 32;
  std::size_t filler_count = 8;
  InitKind init = InitKind::Base;
  std::uint64_t init_seed = 0;
  std::vector<std::string> freeze;

  std::uint64_t seed = 0;
  std::string out = "runs/favor";
  RunMode mode = RunMode::Grpo;

  // Sweep grid.
  std::string sweep_axis = "group_size";
  std::vector<std::size_t> sweep_values = {2, 4, 8, 16};
  std::vector<std::uint64_t> sweep_seeds = {1, 2, 3, 4, 5};

  void validate() const {
    train.validate();
    require(manifest.has_value() != synthetic.has_value(), "config: exactly one of manifest or synthetic must be set");
    require(shots >= 1, "config: shots must be at least 1");
    require(hidden_dim >= 1, "config: hidden_dim must be positive");
    require(filler_count >= 1 && filler_count <= 26, "config: filler_count must be in [1, 26]");
    require(!out.empty(), "config: out must not be empty");
    require(!sweep_values.empty() && !sweep_seeds.empty(), "config: sweep values and seeds must be non-empty");
    (void)parse_axis(sweep_axis);
    for (const auto& b : freeze)
      require(parse_block(b).has_value(), "config: freeze names unknown parameter block '" + b + "'");
  }

  Decoding eval_decoder() const {
    return Decoding{eval_decoding == DecodeMode::Greedy ? 1.0 : train.temperature, train.max_response_length,
                    eval_decoding};
  }
};

namespace detail {

using Json = nlohmann::json;

struct ConfigError {
  static void type(const std::string& path, const char* expected) {
    throw ContractViolation("config key '" + path + "': expected " + expected);
  }
};

inline std::size_t as_count(const Json& v, const std::string& path) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
    ConfigError::type(path, "a non-negative integer");
  return v.get<std::size_t>();
}

inline std::uint64_t as_seed(const Json& v, const std::string& path) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0))
    ConfigError::type(path, "a non-negative integer");
  return v.get<std::uint64_t>();
}

inline double as_real(const Json& v, const std::string& path) {
  if (!v.is_number()) ConfigError::type(path, "a number");
  return v.get<double>();
}

inline std::string as_text(const Json& v, const std::string& path) {
  if (!v.is_string()) ConfigError::type(path, "a string");
  return v.get<std::string>();
}

struct KeySpec {
  std::string path;  // dotted
  std::function<void(RunConfig&, const Json&)> apply;
};

inline const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = [] {
    std::vector<KeySpec> k;
    auto add = [&](std::string path, std::function<void(RunConfig&, const Json&)> fn) {
      k.push_back({std::move(path), std::move(fn)});
    };
    add("group_size", [](RunConfig& c, const Json& v) { c.train.group_size = as_count(v, "group_size"); });
    add("kl_coefficient", [](RunConfig& c, const Json& v) { c.train.kl_coefficient = as_real(v, "kl_coefficient"); });
    add("learning_rate", [](RunConfig& c, const Json& v) { c.train.learning_rate = as_real(v, "learning_rate"); });
    add("batch_size", [](RunConfig& c, const Json& v) { c.train.batch_size = as_count(v, "batch_size"); });
    add("gradient_accumulation_steps", [](RunConfig& c, const Json& v) {
      c.train.gradient_accumulation_steps = as_count(v, "gradient_accumulation_steps");
    });
    add("training_steps", [](RunConfig& c, const Json& v) { c.train.training_steps = as_count(v, "training_steps"); });
    add("temperature", [](RunConfig& c, const Json& v) { c.train.temperature = as_real(v, "temperature"); });
    add("max_response_length",
        [](RunConfig& c, const Json& v) { c.train.max_response_length = as_count(v, "max_response_length"); });
    add("std_guard", [](RunConfig& c, const Json& v) { c.train.std_guard = as_real(v, "std_guard"); });
    add("clip_ratio", [](RunConfig& c, const Json& v) {
      if (v.is_null()) c.train.clip_ratio.reset();
      else c.train.clip_ratio = as_real(v, "clip_ratio");
    });
    add("adam_beta1", [](RunConfig& c, const Json& v) { c.train.adam_beta1 = as_real(v, "adam_beta1"); });
    add("adam_beta2", [](RunConfig& c, const Json& v) { c.train.adam_beta2 = as_real(v, "adam_beta2"); });
    add("adam_epsilon", [](RunConfig& c, const Json& v) { c.train.adam_epsilon = as_real(v, "adam_epsilon"); });
    add("eval_decoding", [](RunConfig& c, const Json& v) {
      const auto s = as_text(v, "eval_decoding");
      if (s == "greedy") c.eval_decoding = DecodeMode::Greedy;
      else if (s == "sample") c.eval_decoding = DecodeMode::Sample;
      else ConfigError::type("eval_decoding", "\"greedy\" or \"sample\"");
    });
    add("manifest", [](RunConfig& c, const Json& v) {
      if (v.is_null()) {
        c.manifest.reset();
        return;
      }
      c.manifest = as_text(v, "manifest");
    });
    add("synthetic.num_classes", [](RunConfig& c, const Json& v) {
      c.synthetic.value().num_classes = as_count(v, "synthetic.num_classes");
    });
    add("synthetic.per_class",
        [](RunConfig& c, const Json& v) { c.synthetic.value().per_class = as_count(v, "synthetic.per_class"); });
    add("synthetic.feature_dim",
        [](RunConfig& c, const Json& v) { c.synthetic.value().feature_dim = as_count(v, "synthetic.feature_dim"); });
    add("synthetic.noise_scale",
        [](RunConfig& c, const Json& v) { c.synthetic.value().noise_scale = as_real(v, "synthetic.noise_scale"); });
    add("synthetic.seed", [](RunConfig& c, const Json& v) { c.synthetic.value().seed = as_seed(v, "synthetic.seed"); });
    add("shots", [](RunConfig& c, const Json& v) { c.shots = as_count(v, "shots"); });
    add("data_seed", [](RunConfig& c, const Json& v) { c.data_seed = as_seed(v, "data_seed"); });
    add("hidden_dim", [](RunConfig& c, const Json& v) { c.hidden_dim = as_count(v, "hidden_dim"); });
    add("filler_count", [](RunConfig& c, const Json& v) { c.filler_count = as_count(v, "filler_count"); });
    add("init", [](RunConfig& c, const Json& v) {
      const auto s = as_text(v, "init");
      if (s == "base") c.init = InitKind::Base;
      else if (s == "zero") c.init = InitKind::Zero;
      else ConfigError::type("init", "\"base\" or \"zero\"");
    });
    add("init_seed", [](RunConfig& c, const Json& v) { c.init_seed = as_seed(v, "init_seed"); });
    add("freeze", [](RunConfig& c, const Json& v) {
      if (!v.is_array()) ConfigError::type("freeze", "an array of block names");
      c.freeze.clear();
      for (const auto& e : v) c.freeze.push_back(as_text(e, "freeze[]"));
    });
    add("seed", [](RunConfig& c, const Json& v) { c.seed = as_seed(v, "seed"); });
    add("out", [](RunConfig& c, const Json& v) { c.out = as_text(v, "out"); });
    add("mode", [](RunConfig& c, const Json& v) { c.mode = parse_mode(as_text(v, "mode")); });
    add("sweep.axis", [](RunConfig& c, const Json& v) { c.sweep_axis = as_text(v, "sweep.axis"); });
    add("sweep.values", [](RunConfig& c, const Json& v) {
      if (!v.is_array()) ConfigError::type("sweep.values", "an array of integers");
      c.sweep_values.clear();
      for (const auto& e : v) c.sweep_values.push_back(as_count(e, "sweep.values[]"));
    });
    add("sweep.seeds", [](RunConfig& c, const Json& v) {
      if (!v.is_array()) ConfigError::type("sweep.seeds", "an array of integers");
      c.sweep_seeds.clear();
      for (const auto& e : v) c.sweep_seeds.push_back(as_seed(e, "sweep.seeds[]"));
    });
    return k;
  }();
  return keys;
}

inline const KeySpec* find_key(const std::string& path) {
  for (const auto& k : config_keys())
    if (k.path == path) return &k;
  return nullptr;
}

inline bool is_section(const std::string& name) {
  const std::string prefix = name + ".";
  return std::any_of(config_keys().begin(), config_keys().end(),
                     [&](const KeySpec& k) { return k.path.starts_with(prefix); });
}

/// Flattens a document into (dotted path, value) pairs, rejecting unknown keys.
inline void flatten(const Json& obj, const std::string& prefix, std::vector<std::pair<std::string, Json>>& out) {
  for (const auto& [key, value] : obj.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (find_key(path)) {
      out.emplace_back(path, value);
    } else if (is_section(path)) {
      if (value.is_null() && path == "synthetic") {
        out.emplace_back(path, value);  // "synthetic": null disables the section
        continue;
      }
      if (!value.is_object()) ConfigError::type(path, "an object");
      flatten(value, path, out);
    } else {
      throw ContractViolation("config: unknown key '" + path + "'");
    }
  }
}

inline std::string env_name(const std::string& path) {
  std::string name = "FAVOR_";
  for (char c : path) name += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return name;
}

inline Json parse_env_value(const std::string& raw) {
  auto j = Json::parse(raw, nullptr, false);
  if (j.is_discarded()) return Json(raw);
  return j;
}

}  // namespace detail

using EnvMap = std::map<std::string, std::string>;

/// Environment variable name that overrides a dotted config key.
inline std::string config_env_name(const std::string& key_path) { return detail::env_name(key_path); }

inline std::vector<std::string> config_key_paths() {
  std::vector<std::string> out;
  for (const auto& k : detail::config_keys()) out.push_back(k.path);
  return out;
}

/// Defaults, then the document, then FAVOR_* overrides from `env`.
inline RunConfig config_from_json(const nlohmann::json& doc, const EnvMap& env = {}) {
  if (!doc.is_object()) throw ContractViolation("config: top level must be a JSON object");
  std::vector<std::pair<std::string, nlohmann::json>> entries;
  detail::flatten(doc, "", entries);

  RunConfig cfg;
  auto apply = [&](const std::string& path, const nlohmann::json& value) {
    if (path == "synthetic") {  // explicit null
      cfg.synthetic.reset();
      return;
    }
    if (path == "manifest" && !value.is_null()) cfg.synthetic.reset();
    if (path.starts_with("synthetic.")) {
      if (!cfg.synthetic) cfg.synthetic = SyntheticTaskSpec{};
    }
    detail::find_key(path)->apply(cfg, value);
  };

  // A document naming both sources is an error rather than last-one-wins.
  const bool doc_manifest = doc.contains("manifest") && !doc["manifest"].is_null();
  const bool doc_synthetic = doc.contains("synthetic") && !doc["synthetic"].is_null();
  if (doc_manifest && doc_synthetic) throw ContractViolation("config: set either manifest or synthetic, not both");

  for (const auto& [path, value] : entries) apply(path, value);
  for (const auto& key : detail::config_keys()) {
    auto it = env.find(detail::env_name(key.path));
    if (it != env.end()) apply(key.path, detail::parse_env_value(it->second));
  }
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config(const std::string& text, const EnvMap& env = {}) {
  const bool blank = std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c) != 0; });
  nlohmann::json doc = nlohmann::json::object();
  if (!blank) {
    doc = nlohmann::json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw ContractViolation("config: not valid JSON");
  }
  return config_from_json(doc, env);
}

inline RunConfig load_config(const std::filesystem::path& path, const EnvMap& env = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("config: cannot open " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_config(text.str(), env);
  } catch (const ContractViolation& e) {
    throw ContractViolation(path.string() + ": " + e.what());
  }
}

/// Collects the FAVOR_* variables of the current process.
inline EnvMap process_env() {
  EnvMap env;
  for (const auto& key : detail::config_keys()) {
    const auto name = detail::env_name(key.path);
    if (const char* v = std::getenv(name.c_str())) env[name] = v;
  }
  return env;
}

/// Fully explicit form; load_config(to_json(c)) == c.
inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = mode_name(c.mode);
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["group_size"] = c.train.group_size;
  j["kl_coefficient"] = c.train.kl_coefficient;
  j["learning_rate"] = c.train.learning_rate;
  j["batch_size"] = c.train.batch_size;
  j["gradient_accumulation_steps"] = c.train.gradient_accumulation_steps;
  j["training_steps"] = c.train.training_steps;
  j["temperature"] = c.train.temperature;
  j["max_response_length"] = c.train.max_response_length;
  j["std_guard"] = c.train.std_guard;
  j["clip_ratio"] = c.train.clip_ratio ? nlohmann::ordered_json(*c.train.clip_ratio) : nlohmann::ordered_json();
  j["adam_beta1"] = c.train.adam_beta1;
  j["adam_beta2"] = c.train.adam_beta2;
  j["adam_epsilon"] = c.train.adam_epsilon;
  j["eval_decoding"] = c.eval_decoding == DecodeMode::Greedy ? "greedy" : "sample";
  if (c.manifest) {
    j["manifest"] = *c.manifest;
  } else {
    const auto& s = *c.synthetic;
    j["synthetic"] = {{"num_classes", s.num_classes},
                      {"per_class", s.per_class},
                      {"feature_dim", s.feature_dim},
                      {"noise_scale", s.noise_scale},
                      {"seed", s.seed}};
  }
  j["shots"] = c.shots;
  j["data_seed"] = c.data_seed;
  j["hidden_dim"] = c.hidden_dim;
  j["filler_count"] = c.filler_count;
  j["init"] = c.init == InitKind::Base ? "base" : "zero";
  j["init_seed"] = c.init_seed;
  j["freeze"] = c.freeze;
  j["sweep"] = {{"axis", c.sweep_axis}, {"values", c.sweep_values}, {"seeds", c.sweep_seeds}};
  return j;
}

}  // namespace favor
