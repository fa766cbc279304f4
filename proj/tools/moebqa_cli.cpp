// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0
//
// Command line for the MoE multiple-choice QA stack: synthetic data
// generation, training, evaluation, analysis, and gradient checking.
// Exit codes: 0 success, 2 configuration/input, 3 numerical, 4 verification
// failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moebqa/analysis.hpp"
#include "moebqa/checkpoint.hpp"
#include "moebqa/config.hpp"
#include "moebqa/data.hpp"
#include "moebqa/gradcheck.hpp"
#include "moebqa/model.hpp"
#include "moebqa/optim.hpp"
#include "moebqa/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace moebqa;

int env_threads() {
  const char* v = std::getenv("MOEBQA_THREADS");
  if (!v) return 1;
  const int n = std::atoi(v);
  return n >= 1 ? n : 1;
}

void ensure_writable(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw ConfigError("refusing to overwrite " + path.string() +
                      " (pass --force to allow)");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

// --- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  std::string spec_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool has_seed = false;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& args) {
  SynthSpec spec;
  if (!args.spec_path.empty()) {
    apply_json(spec, load_json_file(args.spec_path, "synth spec"));
  }
  if (args.has_seed) spec.seed = args.seed;
  spec.validate();

  fs::create_directories(args.out_dir);
  const fs::path out(args.out_dir);
  for (const char* name :
       {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt"}) {
    ensure_writable(out / name, args.force);
  }

  auto ds = generate_synthetic(spec);
  auto vocab = build_vocabulary(spec);
  save_records((out / "train.jsonl").string(), ds.train);
  save_records((out / "valid.jsonl").string(), ds.valid);
  save_records((out / "test.jsonl").string(), ds.test);
  vocab.save((out / "vocab.txt").string());
  write_text(out / "spec.resolved", to_json(spec).dump(2) + "\n");

  std::map<int, int> type_counts;
  for (const auto* split : {&ds.train, &ds.valid, &ds.test}) {
    for (const auto& ex : *split) type_counts[ex.type_label] += 1;
  }
  std::printf("wrote %zu train / %zu valid / %zu test examples, vocab %d\n",
              ds.train.size(), ds.valid.size(), ds.test.size(), vocab.size());
  for (const auto& [type, count] : type_counts) {
    std::printf("type %d: %d examples\n", type, count);
  }
  return 0;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string preset;
  std::string data_dir;
  std::string out_dir;
  uint64_t seed = 0;
  bool has_seed = false;
  int epochs = 0;
  double beta = -1.0;
  double lr = 0.0;
  bool no_balance_loss = false;
  bool constant_gate_half = false;
  bool no_shared_expert = false;
  bool route_by_cls = false;
  bool route_per_example = false;
  bool resume = false;
  bool force = false;
  bool quiet = false;
};

TrainConfig resolve_train_config(const TrainArgs& args) {
  if (args.preset.empty() && args.config_path.empty()) {
    throw ConfigError("train needs --preset and/or --config");
  }
  TrainConfig cfg = args.preset.empty() ? TrainConfig{} : make_preset(args.preset);
  if (!args.config_path.empty()) {
    apply_json(cfg, load_json_file(args.config_path, "config"));
  }
  if (!args.data_dir.empty()) {
    const fs::path d(args.data_dir);
    cfg.data.train = (d / "train.jsonl").string();
    cfg.data.valid = (d / "valid.jsonl").string();
    cfg.data.test = (d / "test.jsonl").string();
    cfg.data.vocab = (d / "vocab.txt").string();
  }
  if (args.has_seed) cfg.seed = args.seed;
  if (args.epochs > 0) cfg.epochs = args.epochs;
  if (args.beta >= 0.0) cfg.beta = args.beta;
  if (args.lr > 0.0) cfg.lr = args.lr;
  cfg.ablations.no_balance_loss |= args.no_balance_loss;
  cfg.ablations.constant_gate_half |= args.constant_gate_half;
  cfg.ablations.no_shared_expert |= args.no_shared_expert;
  cfg.ablations.route_by_cls |= args.route_by_cls;
  cfg.ablations.route_per_example |= args.route_per_example;
  if (cfg.data.train.empty() || cfg.data.valid.empty() || cfg.data.vocab.empty()) {
    throw ConfigError("train/valid/vocab data paths are required "
                      "(set --data or config data.*)");
  }
  return cfg;
}

template <typename T>
int run_train(TrainConfig cfg, const TrainArgs& args) {
  auto vocab = Vocabulary::load(cfg.data.vocab);
  cfg.encoder.vocab_size = vocab.size();
  cfg.validate();

  auto train_set = load_records(cfg.data.train);
  auto valid_set = load_records(cfg.data.valid);
  std::vector<RawExample> test_set;
  if (!cfg.data.test.empty() && fs::exists(cfg.data.test)) {
    test_set = load_records(cfg.data.test);
  }

  const fs::path out(args.out_dir);
  fs::create_directories(out);
  if (!args.resume) {
    for (const char* name :
         {"config.resolved", "metrics.jsonl", "ckpt_best", "ckpt_last",
          "routing.jsonl"}) {
      ensure_writable(out / name, args.force);
    }
  }

  Model<T> model(cfg);
  AdamW<T> opt(model.params());
  TrainOptions options;
  options.run_dir = out.string();
  options.console = args.quiet ? nullptr : &std::cout;
  options.eval_threads = env_threads();
  options.vocab_checksum = vocab.checksum();
  if (!test_set.empty()) options.test_set = &test_set;

  if (args.resume) {
    const auto last_path = (out / "ckpt_last").string();
    auto last = load_checkpoint(last_path);
    if (to_json(last.config) != to_json(cfg)) {
      throw CheckpointError(ErrorKind::kCheckpointMismatch,
                            "resume config does not match " + last_path);
    }
    if (last.vocab_checksum != vocab.checksum()) {
      throw ValidationError("vocabulary file does not match checkpoint");
    }
    restore_checkpoint(last, model, &opt);
    options.start_epoch = last.epoch;
    options.start_opt_step = last.opt_step;
    options.start_seq_counter = last.seq_counter;
    options.best_val_acc = last.best_val_acc;
    options.best_epoch = last.best_epoch;
  }

  write_text(out / "config.resolved", to_json(cfg).dump(2) + "\n");
  auto result = train(model, opt, train_set, valid_set, vocab, options);
  std::printf("best_epoch %d valid_acc %.4f", result.best_epoch,
              result.best_val_acc);
  if (result.test_acc >= 0) std::printf(" test_acc %.4f", result.test_acc);
  std::printf("\n");
  return 0;
}

int cmd_train(const TrainArgs& args) {
  TrainConfig cfg = resolve_train_config(args);
  if (cfg.precision == "f64") return run_train<double>(cfg, args);
  return run_train<float>(cfg, args);
}

// --- eval / analyze ---------------------------------------------------------

struct EvalArgs {
  std::string checkpoint_path;
  std::string data_path;
  std::string vocab_path;
  std::string out_dir = ".";
  int topk = 5;
  bool force = false;
};

struct LoadedModel {
  TrainConfig cfg;
  Vocabulary vocab = Vocabulary::with_specials();
  std::vector<RawExample> examples;
  Model<float> model;
};

LoadedModel load_for_inference(const EvalArgs& args) {
  auto ckpt = load_checkpoint(args.checkpoint_path);
  const std::string vocab_path =
      args.vocab_path.empty() ? ckpt.config.data.vocab : args.vocab_path;
  if (vocab_path.empty()) {
    throw ConfigError("no vocabulary: checkpoint carries no path, pass --vocab");
  }
  auto vocab = Vocabulary::load(vocab_path);
  if (vocab.checksum() != ckpt.vocab_checksum) {
    throw ValidationError("vocabulary file " + vocab_path +
                          " does not match checkpoint");
  }
  auto examples = load_records(args.data_path);
  LoadedModel lm{ckpt.config, std::move(vocab), std::move(examples),
                 Model<float>(ckpt.config)};
  restore_checkpoint(ckpt, lm.model, static_cast<AdamW<float>*>(nullptr));
  return lm;
}

int cmd_eval(const EvalArgs& args) {
  auto lm = load_for_inference(args);
  fs::create_directories(args.out_dir);
  const fs::path routing_path = fs::path(args.out_dir) / "routing.jsonl";
  ensure_writable(routing_path, args.force);
  auto result = evaluate(lm.model, lm.examples, lm.vocab, env_threads());
  write_routing_records(routing_path.string(), result.records);
  std::printf("accuracy %.4f\n", result.accuracy);
  return 0;
}

int cmd_analyze(const EvalArgs& args) {
  if (args.topk < 1) throw InputError("--topk must be >= 1");
  auto lm = load_for_inference(args);
  if (!lm.model.has_experts()) {
    throw InputError("analysis needs an MoE checkpoint (m >= 2, L_t >= 1)");
  }
  fs::create_directories(args.out_dir);
  const fs::path out(args.out_dir);
  for (const char* name : {"similarity.csv", "load_stats.csv",
                           "affinity_report.txt", "affinity_report.jsonl"}) {
    ensure_writable(out / name, args.force);
  }

  auto sim = expert_similarity(lm.model);
  write_similarity_csv((out / "similarity.csv").string(), sim);

  auto eval = evaluate(lm.model, lm.examples, lm.vocab, env_threads());
  auto stats = load_stats(eval.records, lm.cfg.num_experts - 1);
  write_load_stats_csv((out / "load_stats.csv").string(), stats);

  auto report = top_affinity_questions(lm.model, lm.examples, lm.vocab, args.topk);
  write_affinity_report((out / "affinity_report.txt").string(),
                        (out / "affinity_report.jsonl").string(), report);

  std::printf("experts %d accuracy %.4f max_uniform_load_ratio %.4f\n",
              lm.cfg.num_experts, eval.accuracy, stats.max_uniform_ratio);
  bool labeled = !eval.records.empty();
  for (const auto& rec : eval.records) labeled = labeled && rec.type_label >= 0;
  if (labeled) {
    std::printf("routing_purity %.4f\n", routing_purity(eval.records));
  }
  return 0;
}

// --- gradcheck ---------------------------------------------------------------

struct GradcheckArgs {
  std::string config_path;
  double rtol = 1e-5;
  double h = 1e-5;
  int warmup_steps = 5;
  bool corrupt_grad = false;
};

int cmd_gradcheck(const GradcheckArgs& args) {
  SynthSpec spec;
  spec.num_keys = 8;
  spec.num_values = 8;
  spec.pairs_min = 4;
  spec.pairs_max = 4;
  spec.train_size = 2;
  spec.valid_size = 0;
  spec.test_size = 1;
  spec.seed = 2024;
  auto vocab = build_vocabulary(spec);
  auto ds = generate_synthetic(spec);

  TrainConfig cfg;
  cfg.encoder.d_model = 8;
  cfg.encoder.n_heads = 2;
  cfg.encoder.d_ff = 16;
  cfg.encoder.num_bottom = 2;
  cfg.encoder.num_top = 1;
  cfg.encoder.max_len = 24;
  cfg.encoder.dropout_p = 0.1;
  cfg.num_experts = 3;
  cfg.beta = 0.01;
  cfg.lr = 1e-3;
  cfg.seed = 7;
  cfg.precision = "f64";
  if (!args.config_path.empty()) {
    apply_json(cfg, load_json_file(args.config_path, "config"));
  }
  cfg.encoder.vocab_size = vocab.size();
  if (cfg.precision != "f64") {
    throw ConfigError("gradient checking requires 64-bit precision");
  }
  cfg.validate();

  Model<double> model(cfg);
  AdamW<double> opt(model.params());

  auto batch_loss = [&](Tape<double>* tape) {
    ForwardCtx<double> ctx{tape, /*training=*/true, cfg.seed, /*step=*/0};
    Tensor<double> task_sum, bal_sum;
    for (size_t i = 0; i < ds.train.size(); ++i) {
      auto fwd = model.forward_example(ctx, ds.train[i], vocab);
      task_sum = i == 0 ? fwd.task : add(tape, task_sum, fwd.task);
      if (fwd.balance) {
        bal_sum = i == 0 ? *fwd.balance : add(tape, bal_sum, *fwd.balance);
      }
    }
    const double inv = 1.0 / static_cast<double>(ds.train.size());
    auto loss = scale(tape, task_sum, inv);
    if (model.has_experts()) {
      loss = add(tape, loss, scale(tape, scale(tape, bal_sum, inv), cfg.beta));
    }
    return loss;
  };

  // A few optimizer steps move the parameters off the symmetric copy-init
  // point so the gate path carries non-zero gradient into the check.
  auto min_selection_margin = [&]() {
    double margin = std::numeric_limits<double>::infinity();
    if (!model.has_experts()) return margin;
    ForwardCtx<double> ctx{nullptr, true, cfg.seed, 0};
    for (const auto& ex : ds.train) {
      auto fwd = model.forward_example(ctx, ex, vocab);
      for (const auto& d : fwd.decisions) {
        const auto& s = d.affinities;
        for (int64_t i = 0; i < s.shape().dim(0); ++i) {
          if (static_cast<int>(i) == d.selected) continue;
          margin = std::min(margin, s.at(d.selected) - s.at(i));
        }
      }
    }
    return margin;
  };
  auto warmup = [&](int steps) {
    for (int step = 0; step < steps; ++step) {
      opt.zero_grad(model.params());
      Tape<double> tape;
      tape.backward(batch_loss(&tape));
      opt.step(model.params(), cfg.lr);
    }
  };
  warmup(args.warmup_steps);
  // The loss is piecewise-smooth in the centroids: an affinity near-tie puts
  // a selection boundary inside the +-h probe. Keep training until every
  // sequence's selection margin clears the probes.
  int extra = 0;
  while (min_selection_margin() < 1e-3 && extra < 200) {
    warmup(5);
    extra += 5;
  }
  if (extra > 0) {
    std::printf("gradcheck: %d extra warmup steps to clear selection ties\n",
                extra);
  }

  std::function<void(ParamStore<double>&)> tamper;
  if (args.corrupt_grad) {
    tamper = [](ParamStore<double>& ps) { ps.items()[0].tensor.grad()[0] += 0.1; };
  }
  auto report = finite_diff_check(batch_loss, model.params(), args.h,
                                  args.rtol, tamper);
  std::printf("gradcheck over %lld scalars: max_rel_err %.3e worst %s[%lld] %s\n",
              static_cast<long long>(model.params().total_scalars()),
              report.max_rel_err, report.worst_param.c_str(),
              static_cast<long long>(report.worst_index),
              report.pass ? "PASS" : "FAIL");
  return report.pass ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixture-of-experts multiple-choice QA at desk scale"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate synthetic QA data");
  gen_cmd->add_option("--spec", gen.spec_path, "synth spec JSON file");
  gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "seed override")
      ->each([&](const std::string&) { gen.has_seed = true; });
  gen_cmd->add_flag("--force", gen.force, "overwrite existing files");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--config", tr.config_path, "config JSON file");
  train_cmd->add_option("--preset", tr.preset,
                        "preset: medqa, headqa, nlpec, desk");
  train_cmd->add_option("--data", tr.data_dir,
                        "data directory from gen-data (sets data paths)");
  train_cmd->add_option("--out", tr.out_dir, "run directory")->required();
  train_cmd->add_option("--seed", tr.seed, "seed override")
      ->each([&](const std::string&) { tr.has_seed = true; });
  train_cmd->add_option("--epochs", tr.epochs, "epoch override");
  train_cmd->add_option("--beta", tr.beta, "balance factor override");
  train_cmd->add_option("--lr", tr.lr, "learning rate override");
  train_cmd->add_flag("--no-balance-loss", tr.no_balance_loss,
                      "drop the balance term");
  train_cmd->add_flag("--constant-gate-half", tr.constant_gate_half,
                      "fix the gate to 0.5 (no gate signal)");
  train_cmd->add_flag("--no-shared-expert", tr.no_shared_expert,
                      "selected expert only");
  train_cmd->add_flag("--route-by-cls", tr.route_by_cls,
                      "route on the CLS state instead of the question span");
  train_cmd->add_flag("--route-per-example", tr.route_per_example,
                      "one routing decision per example");
  train_cmd->add_flag("--resume", tr.resume, "resume from <out>/ckpt_last");
  train_cmd->add_flag("--force", tr.force, "overwrite an existing run dir");
  train_cmd->add_flag("--quiet", tr.quiet, "no metrics mirror on stdout");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint_path)->required();
  eval_cmd->add_option("--data", ev.data_path, "record file")->required();
  eval_cmd->add_option("--vocab", ev.vocab_path, "vocabulary override");
  eval_cmd->add_option("--out", ev.out_dir, "routing record directory");
  eval_cmd->add_flag("--force", ev.force, "overwrite existing outputs");

  EvalArgs an;
  auto* analyze_cmd = app.add_subcommand("analyze", "expert diagnostics");
  analyze_cmd->add_option("--checkpoint", an.checkpoint_path)->required();
  analyze_cmd->add_option("--data", an.data_path, "record file")->required();
  analyze_cmd->add_option("--vocab", an.vocab_path, "vocabulary override");
  analyze_cmd->add_option("--topk", an.topk, "questions per expert");
  analyze_cmd->add_option("--out", an.out_dir, "output directory");
  analyze_cmd->add_flag("--force", an.force, "overwrite existing outputs");

  GradcheckArgs gc;
  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck_cmd->add_option("--config", gc.config_path, "config JSON override");
  gradcheck_cmd->add_option("--rtol", gc.rtol, "relative error tolerance");
  gradcheck_cmd->add_option("--fd-step", gc.h, "finite-difference step");
  gradcheck_cmd->add_option("--warmup-steps", gc.warmup_steps,
                            "optimizer steps before checking");
  gradcheck_cmd->add_flag("--corrupt-grad", gc.corrupt_grad,
                          "test hook: corrupt one gradient entry")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
    if (gen_cmd->parsed()) return cmd_gen_data(gen);
    if (train_cmd->parsed()) return cmd_train(tr);
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (analyze_cmd->parsed()) return cmd_analyze(an);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(gc);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
