#pragma once

// Command-line front end: gen-task, train, eval, sweep and report.
//
// Every subcommand builds its outputs in memory and writes them into --out
// only after all work succeeded, so a failing invocation leaves no files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "favor/base_policy.hpp"
#include "favor/checkpoint.hpp"
#include "favor/config.hpp"
#include "favor/error.hpp"
#include "favor/fewshot.hpp"
#include "favor/harness.hpp"
#include "favor/policy.hpp"
#include "favor/vocabulary.hpp"

namespace favor::cli {

namespace fs = std::filesystem;

/// Files staged for one output directory.
class OutputSet {
public:
  explicit OutputSet(fs::path dir) : dir_(std::move(dir)) {}

  void add(const std::string& name, std::string content) {
    require(name.find('/') == std::string::npos && name.find('\\') == std::string::npos && name != ".." &&
                name != ".",
            "output file names must be plain names");
    files_.emplace_back(name, std::move(content));
  }

  const fs::path& dir() const { return dir_; }

  /// Writes every file via a temporary name and rename; on failure removes
  /// whatever this call already placed.
  void commit() const {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_)) throw DataError("cannot create output directory " + dir_.string());
    std::vector<fs::path> placed;
    try {
      for (const auto& [name, content] : files_) {
        const fs::path target = dir_ / name;
        const fs::path tmp = dir_ / ("." + name + ".tmp");
        {
          std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
          if (!f) throw DataError("cannot write " + tmp.string());
          f.write(content.data(), static_cast<std::streamsize>(content.size()));
          if (!f) throw DataError("write failed for " + tmp.string());
        }
        fs::rename(tmp, target);
        placed.push_back(target);
      }
    } catch (...) {
      for (const auto& [name, content] : files_) fs::remove(dir_ / ("." + name + ".tmp"), ec);
      for (const auto& p : placed) fs::remove(p, ec);
      throw;
    }
  }

private:
  fs::path dir_;
  std::vector<std::pair<std::string, std::string>> files_;
};

inline std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline nlohmann::json read_json(const fs::path& path) {
  auto j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw DataError("malformed JSON in " + path.string());
  return j;
}

inline TaskDefinition build_task(const RunConfig& cfg) {
  if (cfg.manifest) return load_manifest(*cfg.manifest);
  return generate_synthetic_task(*cfg.synthetic);
}

inline PolicyParams initial_policy(const RunConfig& cfg, const TaskDefinition& task, const Vocabulary& vocab) {
  if (cfg.init == InitKind::Zero) return PolicyParams(PolicyShape{vocab.size(), task.feature_dim, cfg.hidden_dim});
  return make_base_policy(vocab, task.num_classes(), task.feature_dim, cfg.hidden_dim, cfg.init_seed);
}

inline const std::vector<std::string>& held_out(const EpisodeSplit& split, std::ostream& err) {
  if (!split.test_ids.empty()) return split.test_ids;
  err << "warning: the split left no held-out instances; evaluating on the training ids\n";
  return split.train_ids;
}

inline nlohmann::ordered_json to_json(const EpisodeSplit& split) {
  nlohmann::ordered_json j;
  j["k"] = split.k;
  j["seed"] = split.seed;
  j["train_ids"] = split.train_ids;
  j["test_ids"] = split.test_ids;
  j["warnings"] = split.warnings;
  return j;
}

inline std::string percent(double x) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * x;
  return s.str();
}

inline std::string signed_percent(double x) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << std::showpos << 100.0 * x;
  return s.str();
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

struct RunSummary {
  fs::path dir;
  RunMode mode = RunMode::Grpo;
  std::size_t shots = 0;
  double accuracy = 0.0;
  double baseline = 0.0;
  std::vector<MetricsRecord> metrics;
};

inline RunSummary load_run(const fs::path& dir) {
  RunSummary r;
  r.dir = dir;
  const auto cfg = load_config(dir / "config.json");
  r.mode = cfg.mode;
  r.shots = cfg.shots;
  if (r.mode != RunMode::Grpo && r.mode != RunMode::Sft)
    throw DataError(dir.string() + ": not a training run (mode " + mode_name(r.mode) + ")");
  r.accuracy = eval_report_from_json(read_json(dir / "eval_report.json")).accuracy;
  r.baseline = eval_report_from_json(read_json(dir / "baseline_eval.json")).accuracy;
  r.metrics = parse_metrics_jsonl(read_file(dir / "metrics.jsonl"));
  return r;
}

struct ComparisonRow {
  std::size_t shots = 0;
  double baseline = 0.0;
  std::optional<double> sft;
  std::optional<double> grpo;
};

/// Groups runs by shot count; means over runs sharing a (shots, mode) cell.
/// Deltas are variant minus baseline.
inline std::vector<ComparisonRow> comparison_rows(const std::vector<RunSummary>& runs) {
  struct Acc {
    double base = 0, sft = 0, grpo = 0;
    std::size_t nb = 0, ns = 0, ng = 0;
  };
  std::map<std::size_t, Acc> by_k;
  for (const auto& r : runs) {
    auto& a = by_k[r.shots];
    a.base += r.baseline;
    ++a.nb;
    if (r.mode == RunMode::Sft) a.sft += r.accuracy, ++a.ns;
    else a.grpo += r.accuracy, ++a.ng;
  }
  std::vector<ComparisonRow> rows;
  for (const auto& [k, a] : by_k) {
    ComparisonRow row{k, a.base / static_cast<double>(a.nb), std::nullopt, std::nullopt};
    if (a.ns) row.sft = a.sft / static_cast<double>(a.ns);
    if (a.ng) row.grpo = a.grpo / static_cast<double>(a.ng);
    rows.push_back(row);
  }
  return rows;
}

struct RenderedReport {
  std::string markdown;
  std::string tsv;
};

inline RenderedReport render_report(const std::vector<RunSummary>& runs,
                                    const std::vector<std::pair<std::string, SweepTable>>& sweeps) {
  std::ostringstream md, tsv;
  auto cell = [](const std::optional<double>& v) { return v ? percent(*v) : std::string("-"); };
  auto delta = [](const std::optional<double>& v, double base) { return v ? signed_percent(*v - base) : std::string("-"); };

  if (!runs.empty()) {
    md << "## Few-shot accuracy (%)\n\n";
    md << "| Setup | Baseline | +SFT | ΔSFT | +FAVOR | ΔFAVOR |\n";
    md << "|---|---|---|---|---|---|\n";
    tsv << "setup\tbaseline\tsft\tdelta_sft\tfavor\tdelta_favor\n";
    for (const auto& row : comparison_rows(runs)) {
      const std::string setup = std::to_string(row.shots) + "-shot";
      md << "| " << setup << " | " << percent(row.baseline) << " | " << cell(row.sft) << " | "
         << delta(row.sft, row.baseline) << " | " << cell(row.grpo) << " | " << delta(row.grpo, row.baseline)
         << " |\n";
      tsv << setup << '\t' << percent(row.baseline) << '\t' << cell(row.sft) << '\t' << delta(row.sft, row.baseline)
          << '\t' << cell(row.grpo) << '\t' << delta(row.grpo, row.baseline) << '\n';
    }
    md << "\n## Training curves\n\n";
    md << "| Run | Mode | k | Steps | Reward (first) | Reward (last) | KL (last) |\n";
    md << "|---|---|---|---|---|---|---|\n";
    for (const auto& r : runs) {
      md << "| " << r.dir.filename().string() << " | " << mode_name(r.mode) << " | " << r.shots << " | "
         << r.metrics.size() << " | ";
      if (r.metrics.empty()) {
        md << "- | - | - |\n";
        continue;
      }
      std::ostringstream nums;
      nums << std::fixed << std::setprecision(4) << r.metrics.front().mean_reward << " | "
           << r.metrics.back().mean_reward << " | " << r.metrics.back().mean_kl;
      md << nums.str() << " |\n";
    }
  }

  for (const auto& [name, table] : sweeps) {
    if (md.tellp() > 0) md << "\n";
    md << "## Sweep over " << axis_name(table.axis) << " (" << name << ")\n\n";
    md << "| Setup | Accuracy (%) | Std | Seeds | Δ vs base |\n|---|---|---|---|---|\n";
    if (tsv.tellp() > 0) tsv << '\n';
    tsv << "setup\taccuracy\tstd\tseeds\tdelta_base\n";
    double base = 0.0;
    for (const auto& row : table.rows) base += row.baseline / static_cast<double>(table.rows.size());
    if (table.axis == SweepAxis::GroupSize) {
      md << "| Base model | " << percent(base) << " | - | - | - |\n";
      tsv << "Base model\t" << percent(base) << "\t-\t-\t-\n";
    }
    for (const auto& row : table.rows) {
      const auto label = sweep_label(table.axis, row.value);
      md << "| " << label << " | " << percent(row.mean) << " | " << percent(row.std_dev) << " | "
         << row.accuracies.size() << " | " << signed_percent(row.mean - row.baseline) << " |\n";
      tsv << label << '\t' << percent(row.mean) << '\t' << percent(row.std_dev) << '\t' << row.accuracies.size()
          << '\t' << signed_percent(row.mean - row.baseline) << '\n';
    }
  }
  return {md.str(), tsv.str()};
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

struct CommonFlags {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
};

inline RunConfig resolve_config(const CommonFlags& flags, const EnvMap& env) {
  RunConfig cfg = flags.config_path.empty() ? parse_config("", env) : load_config(flags.config_path, env);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.mode) cfg.mode = parse_mode(*flags.mode);
  if (!flags.out.empty()) cfg.out = flags.out;
  cfg.validate();
  return cfg;
}

/// Runs one invocation. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const EnvMap& env) {
  CLI::App app{"Few-shot classification with group-relative policy optimization on a toy policy", "favor"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto add_common = [&](CLI::App* sub, bool with_mode) {
    sub->add_option("--config", flags.config_path, "JSON run config (defaults apply to missing keys)");
    sub->add_option("--out", flags.out, "output directory (overrides the config's out)");
    sub->add_option("--seed", flags.seed, "run seed (overrides the config's seed)");
    if (with_mode) sub->add_option("--mode", flags.mode, "grpo | sft");
  };

  auto* gen = app.add_subcommand("gen-task", "write a synthetic task manifest");
  add_common(gen, false);
  std::optional<std::size_t> classes, per_class, feature_dim;
  std::optional<double> noise;
  std::optional<std::uint64_t> task_seed;
  gen->add_option("--classes", classes, "number of classes");
  gen->add_option("--per-class", per_class, "instances per class");
  gen->add_option("--feature-dim", feature_dim, "feature dimension");
  gen->add_option("--noise", noise, "within-class noise scale");
  gen->add_option("--task-seed", task_seed, "generator seed");

  auto* train = app.add_subcommand("train", "train with GRPO or the SFT baseline and evaluate on the held-out split");
  add_common(train, true);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (or the initial policy) on a split");
  add_common(eval, false);
  std::string checkpoint_path, split_name = "test";
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file; omitted means the initial policy");
  eval->add_option("--split", split_name, "test | train")->check(CLI::IsMember({"test", "train"}));

  auto* sw = app.add_subcommand("sweep", "train and evaluate over a grid of group sizes or shot counts");
  add_common(sw, false);
  std::optional<std::string> axis;
  std::vector<std::size_t> values;
  std::vector<std::uint64_t> seeds;
  sw->add_option("--axis", axis, "group_size | shots");
  sw->add_option("--values", values, "comma-separated values")->delimiter(',');
  sw->add_option("--seeds", seeds, "comma-separated run seeds")->delimiter(',');

  auto* rep = app.add_subcommand("report", "render comparison tables from run and sweep directories");
  std::vector<std::string> run_dirs, sweep_dirs;
  std::string report_out;
  rep->add_option("--runs", run_dirs, "training run directories")->expected(1, -1);
  rep->add_option("--sweeps", sweep_dirs, "sweep output directories")->expected(1, -1);
  rep->add_option("--out", report_out, "output directory")->required();

  std::vector<std::string> argv_store{"favor"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (gen->parsed()) {
      RunConfig cfg = resolve_config(flags, env);
      if (!cfg.synthetic) throw ContractViolation("gen-task: the config names a manifest, not a synthetic task");
      auto& spec = *cfg.synthetic;
      if (classes) spec.num_classes = *classes;
      if (per_class) spec.per_class = *per_class;
      if (feature_dim) spec.feature_dim = *feature_dim;
      if (noise) spec.noise_scale = *noise;
      if (task_seed) spec.seed = *task_seed;
      const auto task = generate_synthetic_task(spec);
      OutputSet files(cfg.out);
      files.add("task.jsonl", manifest_text(task));
      files.add("config.json", dump(to_json(cfg)));
      files.commit();
      out << "wrote " << task.instances.size() << " instances to " << (files.dir() / "task.jsonl").string() << "\n";
      return 0;
    }

    if (train->parsed()) {
      RunConfig cfg = resolve_config(flags, env);
      if (cfg.mode != RunMode::Grpo && cfg.mode != RunMode::Sft)
        throw ContractViolation("train: mode must be grpo or sft, got " + mode_name(cfg.mode));
      const Vocabulary vocab(cfg.filler_count);
      const auto task = build_task(cfg);
      const auto split = split_few_shot(task, cfg.shots, cfg.data_seed);
      for (const auto& w : split.warnings) err << "warning: " << w << "\n";
      const auto init = initial_policy(cfg, task, vocab);
      const TrainOptions options{cfg.freeze};
      const auto result = cfg.mode == RunMode::Grpo
                              ? train_grpo(task, split, vocab, cfg.train, init, cfg.seed, options)
                              : train_sft(task, split, vocab, cfg.train, init, cfg.seed, options);
      const auto& ids = held_out(split, err);
      const auto baseline = evaluate(init, task, ids, vocab, cfg.eval_decoder(), cfg.seed);
      const auto report = evaluate(result.params, task, ids, vocab, cfg.eval_decoder(), cfg.seed);

      OutputSet files(cfg.out);
      files.add("config.json", dump(to_json(cfg)));
      files.add("split.json", dump(to_json(split)));
      files.add("metrics.jsonl", metrics_jsonl(result.metrics));
      files.add("timing.jsonl", timing_jsonl(result.metrics));
      files.add("checkpoint.bin", checkpoint_bytes(result.params));
      files.add("baseline_eval.json", dump(favor::to_json(baseline)));
      files.add("eval_report.json", dump(favor::to_json(report)));
      files.commit();
      out << mode_name(cfg.mode) << " " << cfg.shots << "-shot: accuracy " << percent(report.accuracy)
          << "% (baseline " << percent(baseline.accuracy) << "%), format " << percent(report.format_rate)
          << "%, final reward " << result.metrics.back().mean_reward << "\n";
      return 0;
    }

    if (eval->parsed()) {
      RunConfig cfg = resolve_config(flags, env);
      const Vocabulary vocab(cfg.filler_count);
      const auto task = build_task(cfg);
      const auto split = split_few_shot(task, cfg.shots, cfg.data_seed);
      const auto params = checkpoint_path.empty() ? initial_policy(cfg, task, vocab) : load_checkpoint(checkpoint_path);
      if (params.shape().vocab_size != vocab.size() || params.shape().feature_dim != task.feature_dim)
        throw DataError("eval: checkpoint shape does not match the configured vocabulary and task");
      const auto& ids = split_name == "train" ? split.train_ids : held_out(split, err);
      const auto report = evaluate(params, task, ids, vocab, cfg.eval_decoder(), cfg.seed);
      cfg.mode = RunMode::Eval;
      OutputSet files(cfg.out);
      files.add("config.json", dump(to_json(cfg)));
      files.add("eval_report.json", dump(favor::to_json(report)));
      files.commit();
      out << "accuracy " << percent(report.accuracy) << "% format " << percent(report.format_rate) << "% over "
          << report.n << " instances\n";
      return 0;
    }

    if (sw->parsed()) {
      RunConfig cfg = resolve_config(flags, env);
      if (axis) cfg.sweep_axis = *axis;
      if (!values.empty()) cfg.sweep_values = values;
      if (!seeds.empty()) cfg.sweep_seeds = seeds;
      cfg.mode = RunMode::Sweep;
      cfg.validate();
      const Vocabulary vocab(cfg.filler_count);
      const auto task = build_task(cfg);
      const auto init = initial_policy(cfg, task, vocab);
      SweepSpec spec{parse_axis(cfg.sweep_axis), cfg.sweep_values, cfg.sweep_seeds, cfg.shots, cfg.data_seed};
      const auto table = sweep(task, vocab, cfg.train, init, spec, TrainOptions{cfg.freeze});
      OutputSet files(cfg.out);
      files.add("config.json", dump(to_json(cfg)));
      files.add("sweep.tsv", sweep_tsv(table));
      files.add("sweep.json", dump(favor::to_json(table)));
      files.commit();
      out << sweep_tsv(table);
      return 0;
    }

    if (rep->parsed()) {
      if (run_dirs.empty() && sweep_dirs.empty()) throw ContractViolation("report: give --runs and/or --sweeps");
      std::vector<RunSummary> runs;
      for (const auto& d : run_dirs) runs.push_back(load_run(d));
      std::vector<std::pair<std::string, SweepTable>> sweeps;
      for (const auto& d : sweep_dirs)
        sweeps.emplace_back(fs::path(d).filename().string(), sweep_table_from_json(read_json(fs::path(d) / "sweep.json")));
      const auto rendered = render_report(runs, sweeps);
      OutputSet files(report_out);
      files.add("report.md", rendered.markdown);
      files.add("report.tsv", rendered.tsv);
      files.commit();
      out << rendered.markdown;
      return 0;
    }
  } catch (const std::exception& e) {
    err << "favor: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr, process_env());
}

}  // namespace favor::cli
