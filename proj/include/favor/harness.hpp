#pragma once

// Training loops (GRPO and the SFT baseline), greedy evaluation, sweeps and
// the freeze-mask ablation, plus the on-disk forms of their results.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "favor/error.hpp"
#include "favor/fewshot.hpp"
#include "favor/grpo.hpp"
#include "favor/policy.hpp"
#include "favor/reward.hpp"
#include "favor/vocabulary.hpp"

namespace favor {

/// Mixes a base seed with stream coordinates into an independent 64-bit seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(c),    static_cast<std::uint32_t>(c >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace stream {
inline constexpr std::uint64_t kData = 0xDA7A;
inline constexpr std::uint64_t kSampling = 0x5A3B;
}  // namespace stream

/// Walks the training ids in shuffled epochs, reshuffling each time the set is
/// exhausted. A k-shot set smaller than a batch is simply cycled.
class BatchCycler {
public:
  BatchCycler(std::vector<std::string> ids, std::uint64_t seed) : ids_(std::move(ids)), rng_(seed) {
    require(!ids_.empty(), "BatchCycler: empty training set");
    reshuffle();
  }

  std::vector<std::string> next_batch(std::size_t n) {
    std::vector<std::string> out;
    out.reserve(n);
    while (out.size() < n) {
      if (cursor_ == ids_.size()) reshuffle();
      out.push_back(ids_[cursor_++]);
    }
    return out;
  }

private:
  void reshuffle() {
    std::shuffle(ids_.begin(), ids_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<std::string> ids_;
  std::mt19937_64 rng_;
  std::size_t cursor_ = 0;
};

struct MetricsRecord {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double accuracy_rate = 0.0;
  double format_rate = 0.0;
  double mean_kl = 0.0;
  double loss = 0.0;
  double mean_response_length = 0.0;
  double wall_clock_seconds = 0.0;
};

struct TrainResult {
  PolicyParams params;
  std::vector<MetricsRecord> metrics;
  std::vector<std::string> consumed_ids;  ///< question ids in the order they were used
};

/// Builds the update filter that freezes the named parameter blocks.
inline UpdateFilter freeze_mask(const PolicyParams& params, const std::vector<std::string>& blocks) {
  UpdateFilter filter(params.size());
  for (const auto& name : blocks) {
    const auto block = parse_block(name);
    if (!block) throw ContractViolation("freeze_mask: unknown parameter block '" + name + "'");
    filter.freeze(params.block_offset(*block), params.block_size(*block));
  }
  return filter;
}

/// Canonical SFT target: <think> a <digits> </think> <answer> <digits> </answer> EOS
inline TokenSequence gold_response(const Vocabulary& vocab, int class_index) {
  require(class_index >= 0, "gold_response: negative class index");
  std::vector<TokenId> digits;
  for (char c : std::to_string(class_index)) digits.push_back(vocab.digit(static_cast<unsigned>(c - '0')));
  TokenSequence seq;
  seq.ids.push_back(Vocabulary::kThinkOpen);
  seq.ids.push_back(vocab.filler(0));
  seq.ids.insert(seq.ids.end(), digits.begin(), digits.end());
  seq.ids.push_back(Vocabulary::kThinkClose);
  seq.ids.push_back(Vocabulary::kAnswerOpen);
  seq.ids.insert(seq.ids.end(), digits.begin(), digits.end());
  seq.ids.push_back(Vocabulary::kAnswerClose);
  seq.ids.push_back(vocab.eos());
  seq.terminated = true;
  return seq;
}

struct TrainOptions {
  std::vector<std::string> frozen_blocks;
};

namespace detail {

inline std::unordered_map<std::string, std::size_t> index_instances(const TaskDefinition& task) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < task.instances.size(); ++i) index.emplace(task.instances[i].id, i);
  return index;
}

inline void check_split(const TaskDefinition& task, const EpisodeSplit& split,
                        const std::unordered_map<std::string, std::size_t>& index) {
  require(!split.train_ids.empty(), "train: split has no training instances");
  for (const auto& id : split.train_ids)
    if (!index.count(id)) throw ContractViolation("train: unknown training id '" + id + "'");
  (void)task;
}

struct StepTally {
  double reward = 0, acc = 0, fmt = 0, length = 0, kl = 0, loss = 0;
  std::size_t responses = 0, questions = 0, micro_batches = 0;

  void add_response(const RewardBreakdown& r, std::size_t len) {
    reward += r.r_total;
    acc += r.r_acc;
    fmt += r.r_format;
    length += static_cast<double>(len);
    ++responses;
  }

  MetricsRecord finish(std::size_t step, double seconds) const {
    const double n = static_cast<double>(std::max<std::size_t>(responses, 1));
    const double q = static_cast<double>(std::max<std::size_t>(questions, 1));
    const double m = static_cast<double>(std::max<std::size_t>(micro_batches, 1));
    return MetricsRecord{step, reward / n, acc / n, fmt / n, kl / q, loss / m, length / n, seconds};
  }
};

}  // namespace detail

/// GRPO training. Each optimizer step consumes gradient_accumulation_steps
/// micro-batches of batch_size questions; every question gets its own group.
/// Sampling uses the live parameters (on-policy); the KL anchor is a snapshot
/// of `initial_params`.
inline TrainResult train_grpo(const TaskDefinition& task, const EpisodeSplit& split, const Vocabulary& vocab,
                              const GrpoConfig& config, const PolicyParams& initial_params, std::uint64_t seed,
                              const TrainOptions& options = {}) {
  config.validate();
  const auto index = detail::index_instances(task);
  detail::check_split(task, split, index);
  require(initial_params.shape().vocab_size == vocab.size(), "train_grpo: policy/vocabulary size mismatch");

  const auto start = std::chrono::steady_clock::now();
  const FrozenParams reference = snapshot(initial_params);
  TrainResult result{initial_params, {}, {}};
  PolicyParams& live = result.params;
  auto optimizer = OptimizerState::for_params(live);
  const auto filter = freeze_mask(live, options.frozen_blocks);
  BatchCycler cycler(split.train_ids, derive_seed(seed, stream::kData));
  const double inv_batch = 1.0 / static_cast<double>(config.batch_size);

  for (std::size_t step = 1; step <= config.training_steps; ++step) {
    detail::StepTally tally;
    for (std::size_t micro = 0; micro < config.gradient_accumulation_steps; ++micro) {
      const auto ids = cycler.next_batch(config.batch_size);
      PolicyParams grad(live.shape());
      double loss = 0.0;
      for (std::size_t b = 0; b < ids.size(); ++b) {
        const auto& inst = task.instances[index.at(ids[b])];
        auto group = sample_group(live, inst, vocab, config, derive_seed(seed, stream::kSampling, step, micro * 1'000'003 + b));
        compute_advantages(group, config);
        auto g = grpo_loss_and_grad(live, reference, group, config);
        grad.add_scaled(g.grad, inv_batch);
        loss += g.loss * inv_batch;
        tally.kl += g.kl_estimate;
        ++tally.questions;
        for (std::size_t i = 0; i < group.size(); ++i) tally.add_response(group.breakdowns[i], group.responses[i].size());
        result.consumed_ids.push_back(ids[b]);
      }
      if (!std::isfinite(loss))
        throw NumericError("train_grpo: non-finite loss at step " + std::to_string(step) + ", micro-batch " +
                           std::to_string(micro));
      tally.loss += loss;
      ++tally.micro_batches;
      apply_update(live, grad, optimizer, config, &filter);
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.metrics.push_back(tally.finish(step, seconds));
  }
  return result;
}

/// Supervised baseline: maximizes log-likelihood of gold_response() for each
/// training question with the same optimizer, batching and data order as
/// train_grpo. Metrics score one monitoring sample per question.
inline TrainResult train_sft(const TaskDefinition& task, const EpisodeSplit& split, const Vocabulary& vocab,
                             const GrpoConfig& config, const PolicyParams& initial_params, std::uint64_t seed,
                             const TrainOptions& options = {}) {
  config.validate();
  const auto index = detail::index_instances(task);
  detail::check_split(task, split, index);
  require(initial_params.shape().vocab_size == vocab.size(), "train_sft: policy/vocabulary size mismatch");

  const auto start = std::chrono::steady_clock::now();
  const FrozenParams reference = snapshot(initial_params);
  TrainResult result{initial_params, {}, {}};
  PolicyParams& live = result.params;
  auto optimizer = OptimizerState::for_params(live);
  const auto filter = freeze_mask(live, options.frozen_blocks);
  BatchCycler cycler(split.train_ids, derive_seed(seed, stream::kData));
  const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
  const Decoding decoding = config.decoding();

  for (std::size_t step = 1; step <= config.training_steps; ++step) {
    detail::StepTally tally;
    for (std::size_t micro = 0; micro < config.gradient_accumulation_steps; ++micro) {
      const auto ids = cycler.next_batch(config.batch_size);
      PolicyParams grad(live.shape());
      double loss = 0.0;
      for (std::size_t b = 0; b < ids.size(); ++b) {
        const auto& inst = task.instances[index.at(ids[b])];
        const auto gold = gold_response(vocab, inst.class_index);
        const double logp = accumulate_log_prob_grad(live, inst.features, gold, -inv_batch, grad);
        loss -= logp * inv_batch;
        tally.kl += per_position_kl(live, reference, inst.features, gold);
        ++tally.questions;

        std::mt19937_64 rng(derive_seed(seed, stream::kSampling, step, micro * 1'000'003 + b));
        const auto probe = sample(live, inst.features, decoding, vocab.eos(), rng);
        tally.add_response(classification_reward(render(probe, vocab), inst.class_index), probe.size());
        result.consumed_ids.push_back(ids[b]);
      }
      if (!std::isfinite(loss))
        throw NumericError("train_sft: non-finite loss at step " + std::to_string(step) + ", micro-batch " +
                           std::to_string(micro));
      tally.loss += loss;
      ++tally.micro_batches;
      apply_update(live, grad, optimizer, config, &filter);
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.metrics.push_back(tally.finish(step, seconds));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalEntry {
  std::string id;
  int ground_truth = 0;
  std::string response;
  int r_acc = 0;
  int r_format = 0;
};

struct ClassTally {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
  double accuracy = 0.0;
  double format_rate = 0.0;
  std::map<std::string, ClassTally> per_class;
  std::size_t n = 0;
  std::vector<EvalEntry> log;
};

/// Decodes one response per instance (greedy unless `decoding` says otherwise)
/// and scores it. Sampling mode draws instance i with derive_seed(seed, i).
inline EvalReport evaluate(const PolicyParams& params, const TaskDefinition& task,
                           const std::vector<std::string>& instance_ids, const Vocabulary& vocab,
                           const Decoding& decoding = Decoding::greedy(), std::uint64_t seed = 0) {
  decoding.validate();
  require(!instance_ids.empty(), "evaluate: empty instance id list");
  const auto index = detail::index_instances(task);
  EvalReport report;
  for (const auto& name : task.class_names) report.per_class[name];
  std::size_t correct = 0, formatted = 0;
  for (std::size_t i = 0; i < instance_ids.size(); ++i) {
    auto it = index.find(instance_ids[i]);
    if (it == index.end()) throw ContractViolation("evaluate: unknown instance id '" + instance_ids[i] + "'");
    const auto& inst = task.instances[it->second];
    std::mt19937_64 rng(derive_seed(seed, i));
    const auto seq = sample(params, inst.features, decoding, vocab.eos(), rng);
    EvalEntry entry{inst.id, inst.class_index, render(seq, vocab), 0, 0};
    const auto r = classification_reward(entry.response, inst.class_index);
    entry.r_acc = r.r_acc;
    entry.r_format = r.r_format;
    correct += static_cast<std::size_t>(r.r_acc);
    formatted += static_cast<std::size_t>(r.r_format);
    auto& tally = report.per_class[task.class_names[static_cast<std::size_t>(inst.class_index)]];
    tally.correct += static_cast<std::size_t>(r.r_acc);
    ++tally.total;
    report.log.push_back(std::move(entry));
  }
  report.n = instance_ids.size();
  report.accuracy = static_cast<double>(correct) / static_cast<double>(report.n);
  report.format_rate = static_cast<double>(formatted) / static_cast<double>(report.n);
  return report;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

enum class SweepAxis { GroupSize, Shots };

inline std::string axis_name(SweepAxis axis) { return axis == SweepAxis::GroupSize ? "group_size" : "shots"; }

inline SweepAxis parse_axis(const std::string& name) {
  if (name == "group_size" || name == "P") return SweepAxis::GroupSize;
  if (name == "shots" || name == "k") return SweepAxis::Shots;
  throw ContractViolation("sweep: unknown axis '" + name + "' (expected group_size or shots)");
}

struct SweepRow {
  std::size_t value = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;
  double mean = 0.0;
  double std_dev = 0.0;     ///< sample std across seeds (0 for a single seed)
  double std_error = 0.0;   ///< std_dev / sqrt(n)
  double baseline = 0.0;    ///< greedy accuracy of the initial policy on the same held-out ids
};

struct SweepTable {
  SweepAxis axis = SweepAxis::GroupSize;
  std::vector<SweepRow> rows;
};

struct SweepSpec {
  SweepAxis axis = SweepAxis::GroupSize;
  std::vector<std::size_t> values;
  std::vector<std::uint64_t> seeds;
  std::size_t shots = 4;  ///< k used when sweeping group size
  std::uint64_t data_seed = kDefaultDataSeed;
};

inline SweepRow summarize_row(std::size_t value, std::vector<std::uint64_t> seeds, std::vector<double> accuracies) {
  SweepRow row{value, std::move(seeds), std::move(accuracies), 0.0, 0.0, 0.0, 0.0};
  const double n = static_cast<double>(row.accuracies.size());
  for (double a : row.accuracies) row.mean += a / n;
  if (row.accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : row.accuracies) ss += (a - row.mean) * (a - row.mean);
    row.std_dev = std::sqrt(ss / (n - 1.0));
    row.std_error = row.std_dev / std::sqrt(n);
  }
  return row;
}

/// For every value and seed: split, train_grpo from `initial_params`, evaluate
/// greedily on the held-out ids.
inline SweepTable sweep(const TaskDefinition& task, const Vocabulary& vocab, const GrpoConfig& config,
                        const PolicyParams& initial_params, const SweepSpec& spec, const TrainOptions& options = {}) {
  require(!spec.values.empty(), "sweep: no values");
  require(!spec.seeds.empty(), "sweep: no seeds");
  SweepTable table{spec.axis, {}};
  for (std::size_t value : spec.values) {
    GrpoConfig cfg = config;
    std::size_t k = spec.shots;
    if (spec.axis == SweepAxis::GroupSize) cfg.group_size = value;
    else k = value;
    const auto split = split_few_shot(task, k, spec.data_seed);
    const auto eval_ids = split.test_ids.empty() ? split.train_ids : split.test_ids;
    std::vector<double> accs;
    for (std::uint64_t seed : spec.seeds) {
      const auto trained = train_grpo(task, split, vocab, cfg, initial_params, seed, options);
      accs.push_back(evaluate(trained.params, task, eval_ids, vocab).accuracy);
    }
    table.rows.push_back(summarize_row(value, spec.seeds, std::move(accs)));
    table.rows.back().baseline = evaluate(initial_params, task, eval_ids, vocab).accuracy;
  }
  return table;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// One JSON object per step. Wall-clock is deliberately absent so seeded runs
/// produce byte-identical files; see timing_jsonl().
inline std::string metrics_jsonl(const std::vector<MetricsRecord>& metrics) {
  std::string out;
  for (const auto& m : metrics) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["mean_reward"] = m.mean_reward;
    j["accuracy_rate"] = m.accuracy_rate;
    j["format_rate"] = m.format_rate;
    j["mean_kl"] = m.mean_kl;
    j["loss"] = m.loss;
    j["mean_response_length"] = m.mean_response_length;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::string timing_jsonl(const std::vector<MetricsRecord>& metrics) {
  std::string out;
  for (const auto& m : metrics) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["wall_clock_seconds"] = m.wall_clock_seconds;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<MetricsRecord> parse_metrics_jsonl(const std::string& text) {
  std::vector<MetricsRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("metrics: malformed line");
    MetricsRecord m;
    m.step = j.value("step", std::size_t{0});
    m.mean_reward = j.value("mean_reward", 0.0);
    m.accuracy_rate = j.value("accuracy_rate", 0.0);
    m.format_rate = j.value("format_rate", 0.0);
    m.mean_kl = j.value("mean_kl", 0.0);
    m.loss = j.value("loss", 0.0);
    m.mean_response_length = j.value("mean_response_length", 0.0);
    out.push_back(m);
  }
  return out;
}

inline nlohmann::ordered_json to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["accuracy"] = report.accuracy;
  j["format_rate"] = report.format_rate;
  j["n"] = report.n;
  auto& pc = j["per_class"];
  pc = nlohmann::ordered_json::object();
  for (const auto& [name, t] : report.per_class)
    pc[name] = {{"correct", t.correct}, {"total", t.total}, {"accuracy", t.accuracy()}};
  auto& log = j["instances"];
  log = nlohmann::ordered_json::array();
  for (const auto& e : report.log)
    log.push_back({{"id", e.id}, {"ground_truth", e.ground_truth}, {"response", e.response}, {"r_acc", e.r_acc},
                   {"r_format", e.r_format}});
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.accuracy = j.at("accuracy").get<double>();
    r.format_rate = j.at("format_rate").get<double>();
    r.n = j.at("n").get<std::size_t>();
    for (const auto& [name, t] : j.at("per_class").items())
      r.per_class[name] = ClassTally{t.at("correct").get<std::size_t>(), t.at("total").get<std::size_t>()};
    for (const auto& e : j.at("instances"))
      r.log.push_back(EvalEntry{e.at("id").get<std::string>(), e.at("ground_truth").get<int>(),
                                e.at("response").get<std::string>(), e.at("r_acc").get<int>(),
                                e.at("r_format").get<int>()});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("eval report: ") + e.what());
  }
  return r;
}

inline std::string sweep_label(SweepAxis axis, std::size_t value) {
  return axis == SweepAxis::GroupSize ? "FAVOR P=" + std::to_string(value) : "FAVOR " + std::to_string(value) + "-shot";
}

/// Tab-separated table: one row per swept value.
inline std::string sweep_tsv(const SweepTable& table) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  out << axis_name(table.axis) << "\tmean_accuracy\tstd\tstderr\tbaseline\tn_seeds\taccuracies\n";
  for (const auto& row : table.rows) {
    out << row.value << '\t' << row.mean << '\t' << row.std_dev << '\t' << row.std_error << '\t' << row.baseline
        << '\t' << row.accuracies.size() << '\t';
    for (std::size_t i = 0; i < row.accuracies.size(); ++i) out << (i ? "," : "") << row.accuracies[i];
    out << '\n';
  }
  return out.str();
}

/// Setup label -> accuracy layout, one entry per row.
inline nlohmann::ordered_json to_json(const SweepTable& table) {
  nlohmann::ordered_json j;
  j["axis"] = axis_name(table.axis);
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : table.rows)
    j["rows"].push_back({{"setup", sweep_label(table.axis, row.value)},
                         {"value", row.value},
                         {"accuracy", row.mean},
                         {"std", row.std_dev},
                         {"stderr", row.std_error},
                         {"baseline", row.baseline},
                         {"seeds", row.seeds},
                         {"accuracies", row.accuracies}});
  return j;
}

inline SweepTable sweep_table_from_json(const nlohmann::json& j) {
  SweepTable table;
  try {
    table.axis = parse_axis(j.at("axis").get<std::string>());
    for (const auto& r : j.at("rows")) {
      SweepRow row = summarize_row(r.at("value").get<std::size_t>(), r.at("seeds").get<std::vector<std::uint64_t>>(),
                                   r.at("accuracies").get<std::vector<double>>());
      row.baseline = r.value("baseline", 0.0);
      table.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("sweep table: ") + e.what());
  }
  return table;
}

}  // namespace favor
