// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "moebqa/checkpoint.hpp"
#include "moebqa/model.hpp"
#include "moebqa/optim.hpp"

namespace moebqa {

struct OptionRouting {
  int option = 0;
  int selected = 0;
  double gate = 0.0;
};

struct ExampleRecord {
  int64_t index = 0;
  int predicted = 0;
  int answer = 0;
  bool correct = false;
  int type_label = -1;
  std::vector<OptionRouting> routing;  // empty for dense models
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<ExampleRecord> records;
};

// Frozen-parameter evaluation; pure, so examples may be spread over threads.
// Record order is by example index regardless of thread count.
template <typename T>
EvalResult evaluate(const Model<T>& model, const std::vector<RawExample>& examples,
                    const Vocabulary& vocab, int threads = 1) {
  EvalResult result;
  result.records.resize(examples.size());
  if (examples.empty()) return result;

  auto worker = [&](size_t begin, size_t stride) {
    for (size_t i = begin; i < examples.size(); i += stride) {
      ForwardCtx<T> ctx;  // no tape, no dropout
      auto fwd = model.forward_example(ctx, examples[i], vocab);
      ExampleRecord rec;
      rec.index = static_cast<int64_t>(i);
      rec.predicted = fwd.dist.predicted;
      rec.answer = examples[i].answer;
      rec.correct = rec.predicted == rec.answer;
      rec.type_label = examples[i].type_label;
      for (size_t d = 0; d < fwd.decisions.size(); ++d) {
        rec.routing.push_back({static_cast<int>(d), fwd.decisions[d].selected,
                               static_cast<double>(fwd.decisions[d].gate_value.item())});
      }
      result.records[i] = std::move(rec);
    }
  };

  const int n_threads = std::max(
      1, std::min<int>(threads, static_cast<int>(examples.size())));
  if (n_threads == 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) {
      pool.emplace_back(worker, static_cast<size_t>(t),
                        static_cast<size_t>(n_threads));
    }
    for (auto& th : pool) th.join();
  }

  int64_t correct = 0;
  for (const auto& rec : result.records) correct += rec.correct ? 1 : 0;
  result.accuracy =
      static_cast<double>(correct) / static_cast<double>(examples.size());
  return result;
}

inline nlohmann::json record_to_json(const ExampleRecord& rec) {
  nlohmann::json routing = nlohmann::json::array();
  for (const auto& r : rec.routing) {
    routing.push_back(
        {{"option", r.option}, {"selected", r.selected}, {"gate", r.gate}});
  }
  nlohmann::json j{{"index", rec.index},
                   {"predicted", rec.predicted},
                   {"answer", rec.answer},
                   {"correct", rec.correct},
                   {"routing", routing}};
  if (rec.type_label >= 0) j["type_label"] = rec.type_label;
  return j;
}

inline void write_routing_records(const std::string& path,
                                  const std::vector<ExampleRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write routing records to " + path);
  for (const auto& rec : records) out << record_to_json(rec).dump() << '\n';
}

struct EpochMetrics {
  int epoch = 0;
  double mean_loss = 0.0;
  double mean_task = 0.0;
  double mean_balance = 0.0;
  double valid_acc = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  int best_epoch = -1;
  double best_val_acc = -1.0;
  double test_acc = -1.0;
  int64_t opt_steps = 0;
  uint64_t seq_counter = 0;
};

struct TrainOptions {
  std::string run_dir;              // empty: keep everything in memory
  std::ostream* console = nullptr;  // metrics stream mirror
  int eval_threads = 1;
  const std::vector<RawExample>* test_set = nullptr;
  uint64_t vocab_checksum = 0;
  // Resume state (from a last checkpoint).
  int start_epoch = 0;
  int64_t start_opt_step = 0;
  uint64_t start_seq_counter = 0;
  double best_val_acc = -1.0;
  int best_epoch = -1;
  // Stop early after this many epochs (simulated interruption); the lr
  // schedule still spans the configured epoch count. -1 runs to completion.
  int stop_after_epoch = -1;
};

namespace train_detail {

template <typename T>
std::vector<std::vector<T>> snapshot_params(const Model<T>& model) {
  std::vector<std::vector<T>> snap;
  for (const auto& p : model.params().items()) {
    snap.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  return snap;
}

template <typename T>
void restore_params(Model<T>& model, const std::vector<std::vector<T>>& snap) {
  const auto& items = model.params().items();
  for (size_t i = 0; i < items.size(); ++i) {
    std::copy(snap[i].begin(), snap[i].end(), items[i].tensor.data().begin());
  }
}

}  // namespace train_detail

// One epoch loop composing the whole objective: shuffled micro-batches,
// gradient accumulation, the balance term weighted by beta, load-count
// updates applied once per optimizer step after the step's losses are
// computed, per-epoch validation, and best-checkpoint retention (ties keep
// the earlier epoch).
template <typename T>
TrainResult train(Model<T>& model, AdamW<T>& opt,
                  const std::vector<RawExample>& train_set,
                  const std::vector<RawExample>& valid_set,
                  const Vocabulary& vocab, const TrainOptions& options = {}) {
  const TrainConfig& cfg = model.config();
  if (train_set.empty() || valid_set.empty()) {
    throw ConfigError("training requires non-empty train and valid splits");
  }

  const int64_t n = static_cast<int64_t>(train_set.size());
  const int64_t micro_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t steps_per_epoch =
      (micro_per_epoch + cfg.grad_accum - 1) / cfg.grad_accum;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;

  const bool use_balance = !cfg.ablations.no_balance_loss && cfg.beta > 0.0;

  std::ofstream metrics_file;
  if (!options.run_dir.empty()) {
    std::filesystem::create_directories(options.run_dir);
    metrics_file.open(options.run_dir + "/metrics.jsonl",
                      options.start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics_file) {
      throw InputError("cannot write metrics stream in " + options.run_dir);
    }
  }
  auto log_line = [&](const nlohmann::json& j) {
    const std::string line = j.dump();
    if (metrics_file.is_open()) metrics_file << line << '\n';
    if (options.console) (*options.console) << line << '\n';
  };

  TrainResult result;
  result.best_val_acc = options.best_val_acc;
  result.best_epoch = options.best_epoch;
  int64_t opt_step = options.start_opt_step;
  uint64_t seq_counter = options.start_seq_counter;

  std::vector<std::vector<T>> best_snapshot;
  if (result.best_epoch >= 0 && !options.run_dir.empty()) {
    auto best = load_checkpoint(options.run_dir + "/ckpt_best");
    Model<T> tmp(model.config());
    restore_checkpoint(best, tmp, static_cast<AdamW<T>*>(nullptr));
    best_snapshot = train_detail::snapshot_params(tmp);
  }

  auto save_state = [&](const std::string& name, int completed_epochs) {
    if (options.run_dir.empty()) return;
    auto ckpt = make_checkpoint(model, opt, options.vocab_checksum,
                                completed_epochs, opt_step, seq_counter,
                                result.best_val_acc, result.best_epoch);
    save_checkpoint(options.run_dir + "/" + name, ckpt);
  };

  const int end_epoch = options.stop_after_epoch < 0
                            ? cfg.epochs
                            : std::min(cfg.epochs, options.stop_after_epoch);
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int epoch = options.start_epoch; epoch < end_epoch; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(hash_combine(cfg.seed, hash_combine(hash_str("shuffle"),
                                                        static_cast<uint64_t>(epoch))));
    shuffle_rng.shuffle(order.begin(), order.end());

    double epoch_task = 0.0, epoch_bal = 0.0, epoch_loss = 0.0;
    int64_t epoch_examples = 0;

    int64_t cursor = 0;
    while (cursor < n) {
      // One optimizer step: up to grad_accum micro-batches.
      const int64_t micros_left = (n - cursor + cfg.batch_size - 1) / cfg.batch_size;
      const int64_t group_micros = std::min<int64_t>(cfg.grad_accum, micros_left);
      opt.zero_grad(model.params());
      std::vector<int> pending_assignments;
      double group_task = 0.0, group_bal = 0.0, group_loss = 0.0;
      int64_t group_examples = 0;

      for (int64_t mb = 0; mb < group_micros; ++mb) {
        const int64_t begin = cursor;
        const int64_t end = std::min<int64_t>(begin + cfg.batch_size, n);
        cursor = end;
        const auto micro_size = static_cast<double>(end - begin);

        Tape<T> tape;
        ForwardCtx<T> ctx{&tape, /*training=*/true, cfg.seed, seq_counter};
        std::vector<Tensor<T>> tasks, bals;
        for (int64_t i = begin; i < end; ++i) {
          auto fwd = model.forward_example(
              ctx, train_set[static_cast<size_t>(order[static_cast<size_t>(i)])],
              vocab);
          tasks.push_back(fwd.task);
          if (fwd.balance) bals.push_back(*fwd.balance);
          for (const auto& d : fwd.decisions) {
            pending_assignments.push_back(d.selected);
          }
        }
        seq_counter = ctx.step;

        Tensor<T> task_sum = tasks[0];
        for (size_t i = 1; i < tasks.size(); ++i) {
          task_sum = add(&tape, task_sum, tasks[i]);
        }
        auto task_mean = scale(&tape, task_sum, 1.0 / micro_size);
        Tensor<T> micro_total = task_mean;
        double bal_value = 0.0;
        if (!bals.empty()) {
          Tensor<T> bal_sum = bals[0];
          for (size_t i = 1; i < bals.size(); ++i) {
            bal_sum = add(&tape, bal_sum, bals[i]);
          }
          auto bal_mean = scale(&tape, bal_sum, 1.0 / micro_size);
          bal_value = static_cast<double>(bal_mean.item());
          if (use_balance) {
            micro_total = add(&tape, task_mean, scale(&tape, bal_mean, cfg.beta));
          }
        }
        auto scaled = scale(&tape, micro_total,
                            1.0 / static_cast<double>(group_micros));
        tape.backward(scaled);

        group_task += static_cast<double>(task_mean.item()) * micro_size;
        group_bal += bal_value * micro_size;
        group_loss += static_cast<double>(micro_total.item()) * micro_size;
        group_examples += end - begin;
      }

      // The step's batch never weights its own balance loss.
      if (model.has_experts()) {
        for (int sel : pending_assignments) {
          model.experts().record_assignment(sel, true);
        }
      }

      const double lr = lr_at(opt_step, total_steps, cfg.warmup_ratio, cfg.lr);
      try {
        opt.step(model.params(), lr);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at step " +
                             std::to_string(opt_step));
      }
      opt_step += 1;

      epoch_task += group_task;
      epoch_bal += group_bal;
      epoch_loss += group_loss;
      epoch_examples += group_examples;

      if (opt_step % cfg.log_every == 0 || cursor >= n) {
        log_line({{"step", opt_step},
                  {"epoch", epoch},
                  {"lr", lr},
                  {"loss", group_loss / static_cast<double>(group_examples)},
                  {"task", group_task / static_cast<double>(group_examples)},
                  {"balance", group_bal / static_cast<double>(group_examples)}});
      }
    }

    auto eval = evaluate(model, valid_set, vocab, options.eval_threads);
    EpochMetrics em;
    em.epoch = epoch;
    em.mean_loss = epoch_loss / static_cast<double>(epoch_examples);
    em.mean_task = epoch_task / static_cast<double>(epoch_examples);
    em.mean_balance = epoch_bal / static_cast<double>(epoch_examples);
    em.valid_acc = eval.accuracy;
    result.epochs.push_back(em);
    log_line({{"epoch", epoch},
              {"mean_loss", em.mean_loss},
              {"mean_task", em.mean_task},
              {"mean_balance", em.mean_balance},
              {"valid_acc", em.valid_acc}});

    if (em.valid_acc > result.best_val_acc) {
      result.best_val_acc = em.valid_acc;
      result.best_epoch = epoch;
      best_snapshot = train_detail::snapshot_params(model);
      save_state("ckpt_best", epoch + 1);
    }
    save_state("ckpt_last", epoch + 1);
  }

  result.opt_steps = opt_step;
  result.seq_counter = seq_counter;

  // Reported accuracy and routing records come from the best checkpoint.
  // A simulated interruption skips final reporting, like a real one would.
  if (!best_snapshot.empty() && end_epoch == cfg.epochs) {
    auto last = train_detail::snapshot_params(model);
    train_detail::restore_params(model, best_snapshot);
    auto valid_eval = evaluate(model, valid_set, vocab, options.eval_threads);
    if (!options.run_dir.empty()) {
      write_routing_records(options.run_dir + "/routing.jsonl",
                            valid_eval.records);
    }
    if (options.test_set) {
      result.test_acc =
          evaluate(model, *options.test_set, vocab, options.eval_threads)
              .accuracy;
      log_line({{"best_epoch", result.best_epoch},
                {"best_valid_acc", result.best_val_acc},
                {"test_acc", result.test_acc}});
    } else {
      log_line({{"best_epoch", result.best_epoch},
                {"best_valid_acc", result.best_val_acc}});
    }
    train_detail::restore_params(model, last);
  }
  return result;
}

}  // namespace moebqa
