#pragma once

// Labeled tasks, k-shot splits, prompts and synthetic feature tasks.
//
// Manifest format (JSON Lines): one object per line with exactly the fields
//
//   {"id": "...", "class_index": 0, "class_name": "...", "features": [..], "source": "..."}
//
// `source` is optional. Strings use JSON escaping; reals are written in the
// shortest decimal form that round-trips to the same binary64 value. Blank
// lines are ignored. The class list is recovered from the (class_index,
// class_name) pairs, which must cover 0..C-1 consistently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "favor/error.hpp"
#include "favor/instance.hpp"

namespace favor {

struct TaskDefinition {
  std::vector<std::string> class_names;
  std::size_t feature_dim = 0;
  std::vector<LabeledInstance> instances;

  std::size_t num_classes() const { return class_names.size(); }

  const LabeledInstance& instance(const std::string& id) const {
    for (const auto& inst : instances)
      if (inst.id == id) return inst;
    throw ContractViolation("TaskDefinition: unknown instance id '" + id + "'");
  }

  bool has_instance(const std::string& id) const {
    return std::any_of(instances.begin(), instances.end(), [&](const auto& i) { return i.id == id; });
  }

  /// Throws DataError naming the first offending record.
  void validate() const {
    if (class_names.size() < 2) throw DataError("task: need at least two classes");
    std::unordered_set<std::string> names;
    for (const auto& n : class_names)
      if (!names.insert(n).second) throw DataError("task: duplicate class name '" + n + "'");
    std::unordered_set<std::string> ids;
    for (const auto& inst : instances) {
      if (!ids.insert(inst.id).second) throw DataError("task: duplicate instance id '" + inst.id + "'");
      if (inst.class_index < 0 || static_cast<std::size_t>(inst.class_index) >= class_names.size())
        throw DataError("task: instance '" + inst.id + "' has class_index " + std::to_string(inst.class_index) +
                        " outside [0, " + std::to_string(class_names.size()) + ")");
      if (inst.features.size() != feature_dim)
        throw DataError("task: instance '" + inst.id + "' has " + std::to_string(inst.features.size()) +
                        " features, expected " + std::to_string(feature_dim));
      for (double x : inst.features)
        if (!std::isfinite(x)) throw DataError("task: instance '" + inst.id + "' has a non-finite feature");
    }
  }
};

// ---------------------------------------------------------------------------
// Manifest IO
// ---------------------------------------------------------------------------

inline TaskDefinition read_manifest(std::istream& in) {
  std::map<int, std::string> names_by_index;
  std::map<std::string, int> index_by_name;
  TaskDefinition task;
  std::optional<std::size_t> feature_dim;
  std::string line;
  std::size_t line_no = 0;
  static const std::set<std::string> kAllowed = {"id", "class_index", "class_name", "features", "source"};

  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "manifest line " + std::to_string(line_no);
    auto doc = nlohmann::json::parse(line, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw DataError(where + ": not a JSON object");
    for (const auto& [key, _] : doc.items())
      if (!kAllowed.count(key)) throw DataError(where + ": unknown field '" + key + "'");
    for (const char* key : {"id", "class_index", "class_name", "features"})
      if (!doc.contains(key)) throw DataError(where + ": missing field '" + key + "'");
    if (!doc["id"].is_string()) throw DataError(where + ": 'id' must be a string");
    const std::string id = doc["id"].get<std::string>();
    const std::string rec = where + " (id '" + id + "')";
    if (!doc["class_index"].is_number_integer()) throw DataError(rec + ": 'class_index' must be an integer");
    if (!doc["class_name"].is_string()) throw DataError(rec + ": 'class_name' must be a string");
    if (!doc["features"].is_array()) throw DataError(rec + ": 'features' must be an array");

    LabeledInstance inst;
    inst.id = id;
    const auto cls = doc["class_index"].get<long long>();
    if (cls < 0 || cls > 1'000'000) throw DataError(rec + ": class_index out of range");
    inst.class_index = static_cast<int>(cls);
    for (const auto& f : doc["features"]) {
      if (!f.is_number()) throw DataError(rec + ": features must be numbers");
      inst.features.push_back(f.get<double>());
    }
    if (doc.contains("source")) {
      if (!doc["source"].is_string()) throw DataError(rec + ": 'source' must be a string");
      inst.source = doc["source"].get<std::string>();
    }
    const auto name = doc["class_name"].get<std::string>();
    if (auto it = names_by_index.find(inst.class_index); it != names_by_index.end() && it->second != name)
      throw DataError(rec + ": class_index " + std::to_string(inst.class_index) + " already named '" + it->second +
                      "'");
    if (auto it = index_by_name.find(name); it != index_by_name.end() && it->second != inst.class_index)
      throw DataError(rec + ": class_name '" + name + "' already has index " + std::to_string(it->second));
    names_by_index[inst.class_index] = name;
    index_by_name[name] = inst.class_index;
    if (!feature_dim) feature_dim = inst.features.size();
    task.instances.push_back(std::move(inst));
  }

  const std::size_t c = names_by_index.size();
  for (const auto& inst : task.instances)
    if (static_cast<std::size_t>(inst.class_index) >= c)
      throw DataError("manifest: instance '" + inst.id + "' has class_index " + std::to_string(inst.class_index) +
                      " but only " + std::to_string(c) + " class names are defined");
  for (const auto& [idx, name] : names_by_index) task.class_names.push_back(name);
  task.feature_dim = feature_dim.value_or(0);
  task.validate();
  return task;
}

inline TaskDefinition load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest: cannot open " + path.string());
  return read_manifest(in);
}

inline void write_manifest(std::ostream& out, const TaskDefinition& task) {
  for (const auto& inst : task.instances) {
    nlohmann::ordered_json rec;
    rec["id"] = inst.id;
    rec["class_index"] = inst.class_index;
    rec["class_name"] = task.class_names.at(static_cast<std::size_t>(inst.class_index));
    rec["features"] = inst.features;
    if (inst.source) rec["source"] = *inst.source;
    out << rec.dump() << '\n';
  }
}

inline std::string manifest_text(const TaskDefinition& task) {
  std::ostringstream out;
  write_manifest(out, task);
  return out.str();
}

// ---------------------------------------------------------------------------
// Few-shot split
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kDefaultDataSeed = 4;

struct EpisodeSplit {
  std::size_t k = 1;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::uint64_t seed = kDefaultDataSeed;
  std::vector<std::string> warnings;
};

/// Per class, draws k instances uniformly without replacement (partial
/// Fisher-Yates on the class's manifest order). Classes with fewer than k
/// instances go entirely to train, with a warning.
inline EpisodeSplit split_few_shot(const TaskDefinition& task, std::size_t k, std::uint64_t seed) {
  require(k >= 1, "split_few_shot: k must be at least 1");
  EpisodeSplit split;
  split.k = k;
  split.seed = seed;
  std::vector<std::vector<std::size_t>> by_class(task.num_classes());
  for (std::size_t i = 0; i < task.instances.size(); ++i)
    by_class.at(static_cast<std::size_t>(task.instances[i].class_index)).push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<char> in_train(task.instances.size(), 0);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) throw DataError("split_few_shot: class '" + task.class_names[c] + "' has no instances");
    if (members.size() < k)
      split.warnings.push_back("class '" + task.class_names[c] + "' has only " + std::to_string(members.size()) +
                               " instances for k=" + std::to_string(k) + "; all go to train");
    const std::size_t take = std::min(k, members.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, members.size() - 1);
      std::swap(members[i], members[pick(rng)]);
      in_train[members[i]] = 1;
    }
  }
  // Both lists keep manifest order.
  for (std::size_t i = 0; i < task.instances.size(); ++i)
    (in_train[i] ? split.train_ids : split.test_ids).push_back(task.instances[i].id);
  return split;
}

// ---------------------------------------------------------------------------
// Prompt
// ---------------------------------------------------------------------------

inline std::string build_prompt(const LabeledInstance& instance, const TaskDefinition& task,
                                std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  std::vector<std::size_t> order(task.num_classes());
  std::iota(order.begin(), order.end(), 0);
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::string prompt = "<image id=\"" + instance.id + "\"> ";
  prompt += "Which activity is shown? ";
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i) prompt += ", ";
    prompt += std::to_string(order[i]) + ": " + task.class_names[order[i]];
  }
  prompt += "\nReason inside <think> </think>, then give the option number as JSON inside <answer> </answer>.";
  return prompt;
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& activity_names() {
  static const std::vector<std::string> names = {
      "brush_hair", "cartwheel",  "catch",      "chew",       "clap",         "climb",          "climb_stairs",
      "dive",       "draw_sword", "dribble",    "drink",      "eat",          "fall_floor",     "fencing",
      "flic_flac",  "golf",       "handstand",  "hit",        "hug",          "jump",           "kick",
      "kick_ball",  "kiss",       "laugh",      "pick",       "pour",         "pullup",         "punch",
      "push",       "pushup",     "ride_bike",  "ride_horse", "run",          "shake_hands",    "shoot_ball",
      "shoot_bow",  "shoot_gun",  "sit",        "situp",      "smile",        "smoke",          "somersault",
      "stand",      "swing_baseball", "sword",  "sword_exercise", "talk",     "throw",          "turn",
      "walk",       "wave"};
  return names;
}

struct SyntheticTaskSpec {
  std::size_t num_classes = 5;
  std::size_t per_class = 20;
  std::size_t feature_dim = 8;
  double noise_scale = 0.25;
  std::uint64_t seed = 0;

  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

/// Class prototypes ~ N(0, I); instances = prototype + noise_scale * N(0, I).
inline TaskDefinition generate_synthetic_task(const SyntheticTaskSpec& spec) {
  require(spec.num_classes >= 2, "generate_synthetic_task: need at least two classes");
  require(spec.per_class >= 1, "generate_synthetic_task: per_class must be positive");
  require(spec.feature_dim >= 1, "generate_synthetic_task: feature_dim must be positive");
  require(spec.noise_scale >= 0.0 && std::isfinite(spec.noise_scale),
          "generate_synthetic_task: noise_scale must be >= 0");
  TaskDefinition task;
  task.feature_dim = spec.feature_dim;
  const auto& names = activity_names();
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    task.class_names.push_back(c < names.size() ? names[c] : "class_" + std::to_string(c));

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> prototypes(spec.num_classes, std::vector<double>(spec.feature_dim));
  for (auto& p : prototypes)
    for (auto& x : p) x = normal(rng);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t n = 0; n < spec.per_class; ++n) {
      LabeledInstance inst;
      std::ostringstream id;
      id << task.class_names[c] << '_' << std::setw(3) << std::setfill('0') << n;
      inst.id = id.str();
      inst.class_index = static_cast<int>(c);
      inst.features = prototypes[c];
      if (spec.noise_scale > 0.0)
        for (auto& x : inst.features) x += spec.noise_scale * normal(rng);
      task.instances.push_back(std::move(inst));
    }
  }
  return task;
}

inline TaskDefinition generate_synthetic_task(std::size_t num_classes, std::size_t per_class, std::size_t feature_dim,
                                              double noise_scale, std::uint64_t seed) {
  return generate_synthetic_task(SyntheticTaskSpec{num_classes, per_class, feature_dim, noise_scale, seed});
}

}  // namespace favor
