#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "favor/cli.hpp"

namespace fs = std::filesystem;
using namespace favor;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("favor_cli_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args, const EnvMap& env = {}) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err, env);
  return {code, out.str(), err.str()};
}

void write(const std::string& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

std::vector<std::string> listing(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

// Short but real training runs.
const char* kQuick = R"({"training_steps": 3, "group_size": 4, "batch_size": 4, "synthetic": {"seed": 1}})";

}  // namespace

TEST(Config, EmptyDocumentYieldsDefaults) {
  const auto cfg = parse_config("{}");
  EXPECT_EQ(cfg.train.group_size, 16u);
  EXPECT_EQ(cfg.train.kl_coefficient, 0.04);
  EXPECT_EQ(cfg.train.learning_rate, 5e-5);
  EXPECT_EQ(cfg.train.batch_size, 8u);
  EXPECT_EQ(cfg.train.gradient_accumulation_steps, 2u);
  EXPECT_EQ(cfg.train.training_steps, 20u);
  EXPECT_EQ(cfg.train.temperature, 1.0);
  EXPECT_EQ(cfg.train.max_response_length, 24u);
  EXPECT_EQ(cfg.hidden_dim, 32u);
  EXPECT_TRUE(cfg.synthetic.has_value());
  EXPECT_EQ(to_json(parse_config("")).dump(), to_json(cfg).dump());
}

TEST(Config, OverrideTouchesOnlyItsKey) {
  const auto cfg = parse_config(R"({"group_size": 8})");
  EXPECT_EQ(cfg.train.group_size, 8u);
  auto expect = to_json(parse_config("{}"));
  expect["group_size"] = 8;
  EXPECT_EQ(to_json(cfg).dump(), expect.dump());
}

TEST(Config, UnknownKeyNamed) {
  try {
    parse_config(R"({"learnign_rate": 0.1})");
    FAIL() << "accepted a misspelled key";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("learnign_rate"), std::string::npos);
  }
  EXPECT_THROW(parse_config(R"({"synthetic": {"clases": 3}})"), ContractViolation);
}

TEST(Config, TypeErrorNamesKeyPath) {
  for (const char* doc : {R"({"group_size": "big"})", R"({"synthetic": {"noise_scale": [1]}})", R"({"freeze": "embedding"})"}) {
    try {
      parse_config(doc);
      FAIL() << doc;
    } catch (const ContractViolation& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("config key '"), std::string::npos) << msg;
    }
  }
  try {
    parse_config(R"({"synthetic": {"noise_scale": "x"}})");
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("synthetic.noise_scale"), std::string::npos);
  }
}

TEST(Config, InvalidValuesRejected) {
  EXPECT_THROW(parse_config(R"({"group_size": 1})"), ContractViolation);
  EXPECT_THROW(parse_config(R"({"temperature": 0})"), ContractViolation);
  EXPECT_THROW(parse_config(R"({"manifest": "m.jsonl", "synthetic": {"seed": 1}})"), ContractViolation);
  EXPECT_THROW(parse_config(R"({"synthetic": null})"), ContractViolation);  // no data source left
  EXPECT_THROW(parse_config("{not json"), ContractViolation);
}

TEST(Config, EnvironmentOverridesFile) {
  EXPECT_EQ(config_env_name("synthetic.noise_scale"), "FAVOR_SYNTHETIC_NOISE_SCALE");
  const EnvMap env{{"FAVOR_GROUP_SIZE", "4"}, {"FAVOR_OUT", "elsewhere"}, {"FAVOR_SYNTHETIC_SEED", "9"}};
  const auto cfg = parse_config(R"({"group_size": 8, "out": "here"})", env);
  EXPECT_EQ(cfg.train.group_size, 4u);
  EXPECT_EQ(cfg.out, "elsewhere");
  EXPECT_EQ(cfg.synthetic->seed, 9u);
  EXPECT_THROW(parse_config("{}", {{"FAVOR_GROUP_SIZE", "many"}}), ContractViolation);
}

TEST(Config, EffectiveConfigRoundTrips) {
  const auto cfg = parse_config(R"({"clip_ratio": 0.2, "freeze": ["embedding"], "eval_decoding": "sample", "mode": "sft"})");
  const auto again = config_from_json(nlohmann::json::parse(to_json(cfg).dump()));
  EXPECT_EQ(to_json(again).dump(), to_json(cfg).dump());
  // Only the active data source is written, so a synthetic config omits "manifest".
  for (const auto& key : config_key_paths()) {
    if (key == "manifest") continue;
    EXPECT_NE(to_json(cfg).dump().find('"' + key.substr(key.rfind('.') + 1) + '"'), std::string::npos) << key;
  }
}

TEST(Cli, GenTaskIsDeterministic) {
  TempDir tmp;
  const auto a = invoke({"gen-task", "--out", tmp / "a", "--task-seed", "3"});
  const auto b = invoke({"gen-task", "--out", tmp / "b", "--task-seed", "3"});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  const auto text = cli::read_file(tmp.path / "a" / "task.jsonl");
  EXPECT_EQ(text, cli::read_file(tmp.path / "b" / "task.jsonl"));
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 100);
  const auto task = load_manifest(tmp.path / "a" / "task.jsonl");
  EXPECT_EQ(task.instances.size(), 100u);
  EXPECT_EQ(task.class_names.size(), 5u);
}

TEST(Cli, TrainThenEvalProducesReports) {
  TempDir tmp;
  write(tmp / "cfg.json", kQuick);
  const auto t = invoke({"train", "--config", tmp / "cfg.json", "--out", tmp / "run"});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(listing(tmp.path / "run"),
            (std::vector<std::string>{"baseline_eval.json", "checkpoint.bin", "config.json", "eval_report.json",
                                      "metrics.jsonl", "split.json", "timing.jsonl"}));
  EXPECT_EQ(parse_metrics_jsonl(cli::read_file(tmp.path / "run" / "metrics.jsonl")).size(), 3u);

  const auto e = invoke({"eval", "--config", tmp / "cfg.json", "--checkpoint", tmp / "run/checkpoint.bin", "--out",
                         tmp / "eval"});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto rep = cli::read_json(tmp.path / "eval" / "eval_report.json");
  ASSERT_TRUE(rep.contains("accuracy"));
  // Same checkpoint, same split, same greedy decoding: same numbers as the training run's own report.
  EXPECT_EQ(rep["accuracy"], cli::read_json(tmp.path / "run" / "eval_report.json")["accuracy"]);
  EXPECT_EQ(cli::read_json(tmp.path / "eval" / "config.json")["mode"], "eval");
}

TEST(Cli, EvalRejectsMismatchedCheckpoint) {
  TempDir tmp;
  write(tmp / "cfg.json", kQuick);
  ASSERT_EQ(invoke({"train", "--config", tmp / "cfg.json", "--out", tmp / "run"}).code, 0);
  const auto e = invoke({"eval", "--config", tmp / "cfg.json", "--checkpoint", tmp / "run/checkpoint.bin", "--out",
                         tmp / "eval"},
                        {{"FAVOR_FILLER_COUNT", "4"}});
  EXPECT_EQ(e.code, 1);
  EXPECT_FALSE(fs::exists(tmp.path / "eval"));
}

TEST(Cli, ReportComparesSftAndGrpo) {
  TempDir tmp;
  write(tmp / "cfg.json", kQuick);
  ASSERT_EQ(invoke({"train", "--config", tmp / "cfg.json", "--out", tmp / "grpo", "--mode", "grpo"}).code, 0);
  ASSERT_EQ(invoke({"train", "--config", tmp / "cfg.json", "--out", tmp / "sft", "--mode", "sft"}).code, 0);
  const auto r = invoke({"report", "--runs", tmp / "grpo", tmp / "sft", "--out", tmp / "report"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto md = cli::read_file(tmp.path / "report" / "report.md");
  EXPECT_NE(md.find("| Setup | Baseline | +SFT | ΔSFT | +FAVOR | ΔFAVOR |"), std::string::npos) << md;
  EXPECT_NE(md.find("4-shot"), std::string::npos) << md;
  EXPECT_TRUE(fs::exists(tmp.path / "report" / "report.tsv"));
}

TEST(Cli, SweepWritesTableAndFeedsReport) {
  TempDir tmp;
  write(tmp / "cfg.json", R"({"training_steps": 1, "batch_size": 2, "gradient_accumulation_steps": 1})");
  const auto s = invoke({"sweep", "--config", tmp / "cfg.json", "--out", tmp / "p", "--axis", "group_size", "--values",
                         "2,4", "--seeds", "1,2"});
  ASSERT_EQ(s.code, 0) << s.err;
  const auto tsv = cli::read_file(tmp.path / "p" / "sweep.tsv");
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 3);
  EXPECT_EQ(cli::read_json(tmp.path / "p" / "config.json")["mode"], "sweep");
  const auto r = invoke({"report", "--sweeps", tmp / "p", "--out", tmp / "report"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(cli::read_file(tmp.path / "report" / "report.md").find("FAVOR P=4"), std::string::npos);
}

TEST(Cli, SavedConfigReproducesRunBitForBit) {
  TempDir tmp;
  write(tmp / "cfg.json", kQuick);
  ASSERT_EQ(invoke({"train", "--config", tmp / "cfg.json", "--out", tmp / "a", "--seed", "17"}).code, 0);
  ASSERT_EQ(invoke({"train", "--config", tmp / "a/config.json", "--out", tmp / "b"}).code, 0);
  for (const char* f : {"metrics.jsonl", "checkpoint.bin", "eval_report.json", "split.json"})
    EXPECT_EQ(cli::read_file(tmp.path / "a" / f), cli::read_file(tmp.path / "b" / f)) << f;
}

TEST(Cli, FlagsBeatEnvironment) {
  TempDir tmp;
  write(tmp / "cfg.json", kQuick);
  ASSERT_EQ(invoke({"train", "--config", tmp / "cfg.json", "--out", tmp / "a", "--seed", "2"}, {{"FAVOR_SEED", "5"}}).code, 0);
  EXPECT_EQ(cli::read_json(tmp.path / "a" / "config.json")["seed"], 2);
}

TEST(Cli, BadInvocationsFailWithoutWriting) {
  TempDir tmp;
  EXPECT_NE(invoke({}).code, 0);
  EXPECT_NE(invoke({"train", "--no-such-flag"}).code, 0);
  EXPECT_NE(invoke({"eval", "--split", "validation", "--out", tmp / "x"}).code, 0);
  EXPECT_NE(invoke({"report", "--runs", tmp / "missing"}).code, 0);  // --out is required
  write(tmp / "bad.json", R"({"learnign_rate": 1})");
  const auto r = invoke({"train", "--config", tmp / "bad.json", "--out", tmp / "run"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("learnign_rate"), std::string::npos);
  EXPECT_EQ(listing(tmp.path), (std::vector<std::string>{"bad.json"}));
}

TEST(Cli, FailedCommitLeavesNoPartialFiles) {
  TempDir tmp;
  write(tmp / "cfg.json", kQuick);
  // A directory squatting on the last output name makes the final rename fail.
  fs::create_directories(tmp.path / "run" / "eval_report.json");
  const auto r = invoke({"train", "--config", tmp / "cfg.json", "--out", tmp / "run"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(listing(tmp.path / "run"), (std::vector<std::string>{"eval_report.json"}));
}

TEST(Cli, WritesOnlyUnderOut) {
  TempDir tmp;
  write(tmp / "cfg.json", kQuick);
  ASSERT_EQ(invoke({"train", "--config", tmp / "cfg.json", "--out", tmp / "nested/run"}).code, 0);
  EXPECT_EQ(listing(tmp.path), (std::vector<std::string>{"cfg.json", "nested"}));
  EXPECT_EQ(listing(tmp.path / "nested"), (std::vector<std::string>{"run"}));
}
