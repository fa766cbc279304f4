// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command line binary: exit codes, determinism,
// run-directory contract, overwrite protection.

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include <json.hpp>

#include "testing_util.hpp"

#ifndef MOEBQA_CLI_PATH
#error "MOEBQA_CLI_PATH must point at the binary"
#endif

namespace moebqa {
namespace {

namespace fs = std::filesystem;

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run_cli(const std::string& args) {
  const std::string out_file =
      (fs::temp_directory_path() /
       ("cli_out_" + std::to_string(::getpid()) + ".txt"))
          .string();
  const std::string cmd =
      std::string(MOEBQA_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  const int raw = std::system(cmd.c_str());
  CmdResult result;
  result.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(out_file);
  std::stringstream ss;
  ss << in.rdbuf();
  result.output = ss.str();
  fs::remove(out_file);
  return result;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string tiny_synth_spec_json(const testing::TempDir& dir) {
  const auto path = (dir.path / "spec.json").string();
  std::ofstream(path) << R"({"num_keys":8,"num_values":8,"pairs_min":4,
    "pairs_max":4,"train_size":48,"valid_size":16,"test_size":16,"seed":5})";
  return path;
}

std::string tiny_train_config_json(const testing::TempDir& dir) {
  const auto path = (dir.path / "config.json").string();
  std::ofstream(path) << R"({
    "encoder": {"d_model":16,"n_heads":2,"d_ff":32,"L_b":1,"L_t":1,
                "max_len":24,"dropout_p":0.0},
    "num_experts": 3, "beta": 0.01, "lr": 0.001, "batch_size": 8,
    "grad_accum": 1, "epochs": 1, "warmup_ratio": 0.1, "seed": 3,
    "log_every": 4})";
  return path;
}

class CliPipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<testing::TempDir>("cli");
    data_dir_ = (dir_->path / "data").string();
    auto spec = tiny_synth_spec_json(*dir_);
    auto gen = run_cli("gen-data --spec " + spec + " --out " + data_dir_);
    ASSERT_EQ(gen.exit_code, 0) << gen.output;
  }
  std::unique_ptr<testing::TempDir> dir_;
  std::string data_dir_;
};

TEST_F(CliPipeline, GenDataDeterministicAndProtected) {
  auto spec = tiny_synth_spec_json(*dir_);
  const auto again = (dir_->path / "data2").string();
  auto gen2 = run_cli("gen-data --spec " + spec + " --out " + again);
  ASSERT_EQ(gen2.exit_code, 0);
  for (const char* name : {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt"}) {
    EXPECT_EQ(read_file(fs::path(data_dir_) / name), read_file(fs::path(again) / name))
        << name;
  }
  // Re-running over the same directory requires --force.
  auto clobber = run_cli("gen-data --spec " + spec + " --out " + data_dir_);
  EXPECT_EQ(clobber.exit_code, 2);
  EXPECT_NE(clobber.output.find("--force"), std::string::npos);
  auto forced = run_cli("gen-data --spec " + spec + " --out " + data_dir_ + " --force");
  EXPECT_EQ(forced.exit_code, 0);
}

TEST_F(CliPipeline, MissingSpecFileNamesPathAndExitsTwo) {
  auto r = run_cli("gen-data --spec /nonexistent/spec.json --out " +
                   (dir_->path / "x").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("/nonexistent/spec.json"), std::string::npos);
}

TEST_F(CliPipeline, TrainEvalAnalyzeRoundTrip) {
  auto config = tiny_train_config_json(*dir_);
  const auto run_dir = (dir_->path / "run").string();
  auto tr = run_cli("train --config " + config + " --data " + data_dir_ +
                    " --out " + run_dir + " --quiet");
  ASSERT_EQ(tr.exit_code, 0) << tr.output;
  for (const char* name : {"config.resolved", "metrics.jsonl", "ckpt_best",
                           "ckpt_last", "routing.jsonl"}) {
    EXPECT_TRUE(fs::exists(fs::path(run_dir) / name)) << name;
  }
  // The resolved config is full-fidelity JSON with no unknown keys.
  auto resolved = nlohmann::json::parse(read_file(fs::path(run_dir) / "config.resolved"));
  EXPECT_EQ(resolved.at("num_experts").get<int>(), 3);
  EXPECT_EQ(resolved.at("encoder").at("vocab_size").get<int>(), 40);

  // Training without --force refuses to reuse the run directory.
  auto again = run_cli("train --config " + config + " --data " + data_dir_ +
                       " --out " + run_dir + " --quiet");
  EXPECT_EQ(again.exit_code, 2);

  const auto eval_dir = (dir_->path / "eval").string();
  auto ev = run_cli("eval --checkpoint " + run_dir + "/ckpt_best --data " +
                    data_dir_ + "/valid.jsonl --out " + eval_dir);
  ASSERT_EQ(ev.exit_code, 0) << ev.output;
  EXPECT_NE(ev.output.find("accuracy 0."), std::string::npos);
  // Four decimals.
  const auto pos = ev.output.find("accuracy ");
  EXPECT_EQ(ev.output.substr(pos + 9).find('\n'), 6u);
  EXPECT_TRUE(fs::exists(fs::path(eval_dir) / "routing.jsonl"));

  // The training log's best validation accuracy matches a fresh evaluation
  // of the best checkpoint.
  std::istringstream metrics(read_file(fs::path(run_dir) / "metrics.jsonl"));
  std::string line, best_line;
  while (std::getline(metrics, line)) {
    if (line.find("best_valid_acc") != std::string::npos) best_line = line;
  }
  ASSERT_FALSE(best_line.empty());
  const double best_acc =
      nlohmann::json::parse(best_line).at("best_valid_acc").get<double>();
  char formatted[32];
  std::snprintf(formatted, sizeof(formatted), "accuracy %.4f", best_acc);
  EXPECT_NE(ev.output.find(formatted), std::string::npos)
      << ev.output << " vs " << formatted;

  const auto an_dir = (dir_->path / "analysis").string();
  auto an = run_cli("analyze --checkpoint " + run_dir + "/ckpt_best --data " +
                    data_dir_ + "/test.jsonl --topk 2 --out " + an_dir);
  ASSERT_EQ(an.exit_code, 0) << an.output;
  EXPECT_NE(an.output.find("routing_purity"), std::string::npos);
  for (const char* name : {"similarity.csv", "load_stats.csv",
                           "affinity_report.txt", "affinity_report.jsonl"}) {
    EXPECT_TRUE(fs::exists(fs::path(an_dir) / name)) << name;
  }
  // Fresh (copy-initialized) experts have an all-ones similarity diagonal.
  std::istringstream sim(read_file(fs::path(an_dir) / "similarity.csv"));
  std::string header;
  std::getline(sim, header);
  int row_idx = 0;
  while (std::getline(sim, line)) {
    std::stringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    for (int col = 0; std::getline(row, cell, ','); ++col) {
      if (col == row_idx) EXPECT_EQ(cell, "1.000000");
    }
    ++row_idx;
  }

  auto topk0 = run_cli("analyze --checkpoint " + run_dir + "/ckpt_best --data " +
                       data_dir_ + "/test.jsonl --topk 0 --out " + an_dir +
                       " --force");
  EXPECT_EQ(topk0.exit_code, 2);
}

TEST_F(CliPipeline, AblationFlagEqualsConfigBetaZero) {
  auto config = tiny_train_config_json(*dir_);
  const auto run_a = (dir_->path / "run_flag").string();
  const auto run_b = (dir_->path / "run_beta0").string();
  auto a = run_cli("train --config " + config + " --data " + data_dir_ +
                   " --out " + run_a + " --quiet --no-balance-loss");
  auto b = run_cli("train --config " + config + " --data " + data_dir_ +
                   " --out " + run_b + " --quiet --beta 0");
  ASSERT_EQ(a.exit_code, 0);
  ASSERT_EQ(b.exit_code, 0);
  // Identical loss streams step for step.
  std::istringstream ma(read_file(fs::path(run_a) / "metrics.jsonl"));
  std::istringstream mb(read_file(fs::path(run_b) / "metrics.jsonl"));
  std::string la, lb;
  int compared = 0;
  while (std::getline(ma, la) && std::getline(mb, lb)) {
    auto ja = nlohmann::json::parse(la);
    auto jb = nlohmann::json::parse(lb);
    if (ja.contains("loss")) {
      EXPECT_EQ(ja.at("loss"), jb.at("loss"));
      ++compared;
    }
  }
  EXPECT_GT(compared, 0);
}

// The bitwise interrupted-resume equivalence lives in test_training; the CLI
// cannot be stopped mid-run from here, so this covers the resume wiring:
// config validation against ckpt_last and idempotence on a completed run.
TEST_F(CliPipeline, ResumeValidatesConfigAndIsIdempotentWhenComplete) {
  auto config = tiny_train_config_json(*dir_);
  const auto run_dir = (dir_->path / "resume").string();
  auto first = run_cli("train --config " + config + " --data " + data_dir_ +
                       " --out " + run_dir + " --quiet --epochs 1");
  ASSERT_EQ(first.exit_code, 0);
  const std::string before = read_file(fs::path(run_dir) / "ckpt_last");
  EXPECT_EQ(before.substr(0, 8), "MOEBQA01");

  // Resuming under a different epoch budget is a config mismatch.
  auto bad = run_cli("train --config " + config + " --data " + data_dir_ +
                     " --out " + run_dir + " --quiet --epochs 3 --resume");
  EXPECT_EQ(bad.exit_code, 2);

  // Resuming a finished run trains zero epochs and leaves the state alone.
  auto resumed = run_cli("train --config " + config + " --data " + data_dir_ +
                         " --out " + run_dir + " --quiet --epochs 1 --resume");
  ASSERT_EQ(resumed.exit_code, 0) << resumed.output;
  EXPECT_EQ(read_file(fs::path(run_dir) / "ckpt_last"), before);
}

TEST_F(CliPipeline, EvalWrongVocabExitsTwo) {
  auto config = tiny_train_config_json(*dir_);
  const auto run_dir = (dir_->path / "run_v").string();
  auto tr = run_cli("train --config " + config + " --data " + data_dir_ +
                    " --out " + run_dir + " --quiet");
  ASSERT_EQ(tr.exit_code, 0);
  // A different vocabulary file fails the checksum.
  const auto other_vocab = (dir_->path / "other_vocab.txt").string();
  std::ofstream(other_vocab) << "[PAD]\n[UNK]\n[CLS]\n[SEP]\nzzz\n";
  auto ev = run_cli("eval --checkpoint " + run_dir + "/ckpt_best --data " +
                    data_dir_ + "/valid.jsonl --vocab " + other_vocab +
                    " --out " + (dir_->path / "ev").string());
  EXPECT_EQ(ev.exit_code, 2);
  EXPECT_NE(ev.output.find("does not match"), std::string::npos);
}

TEST(CliGradcheck, PassesAndNegativeControlFails) {
  CmdResult ok = run_cli("gradcheck --warmup-steps 2");
  EXPECT_EQ(ok.exit_code, 0) << ok.output;
  EXPECT_NE(ok.output.find("PASS"), std::string::npos);
  CmdResult bad = run_cli("gradcheck --warmup-steps 2 --corrupt-grad");
  EXPECT_EQ(bad.exit_code, 4) << bad.output;
  EXPECT_NE(bad.output.find("FAIL"), std::string::npos);
  // rtol 0 cannot pass against floating-point roundoff.
  CmdResult zero = run_cli("gradcheck --warmup-steps 2 --rtol 0");
  EXPECT_EQ(zero.exit_code, 4);
}

TEST(CliMisc, UnknownConfigKeyRejected) {
  testing::TempDir dir("cli_misc");
  const auto bad_config = (dir.path / "bad.json").string();
  std::ofstream(bad_config) << R"({"learning_rate": 0.1})";
  auto r = run_cli("train --config " + bad_config + " --out " +
                   (dir.path / "run").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("unknown key"), std::string::npos);
}

TEST(CliMisc, PresetsResolve) {
  testing::TempDir dir("cli_presets");
  // Unknown preset is a config error even before data validation.
  auto r = run_cli("train --preset nosuch --out " + (dir.path / "x").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("unknown preset"), std::string::npos);
}

}  // namespace
}  // namespace moebqa
