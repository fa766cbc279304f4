// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "moebqa/encoder.hpp"

namespace moebqa {

// Cumulative per-expert assignment history, initialized to one per expert so
// the initial balance weighting is uniform and never divides by zero.
struct LoadCounter {
  std::vector<int64_t> counts;

  explicit LoadCounter(int num_unshared = 0)
      : counts(static_cast<size_t>(num_unshared), 1) {}

  [[nodiscard]] int64_t total() const {
    int64_t s = 0;
    for (int64_t c : counts) s += c;
    return s;
  }
};

template <typename T>
struct RoutingDecision {
  Tensor<T> affinities;  // s, one score per unshared expert
  Tensor<T> gates;       // softmax(s)
  int selected = 0;      // argmax of s, ties to the lowest index
  Tensor<T> gate_value;  // g_t = gates[selected], scalar on the tape
};

// m expert stacks over the top blocks: indices 0..m-2 unshared, plus one
// shared stack, plus one trainable centroid row per unshared expert. All
// stacks start as copies of the same top blocks; diversity comes from
// routing.
template <typename T>
struct ExpertSet {
  int num_experts = 0;  // m
  std::vector<std::vector<BlockParams<T>>> unshared;
  std::vector<BlockParams<T>> shared;
  Tensor<T> centroids;  // [m-1, d_model]
  LoadCounter loads;
  mutable int64_t train_stack_evals = 0;  // sparsity instrumentation

  static ExpertSet create(ParamStore<T>& store, const EncoderConfig& cfg,
                          int num_experts) {
    if (num_experts < 2) {
      throw ConfigError("an expert set needs m >= 2, got " +
                        std::to_string(num_experts));
    }
    ExpertSet es;
    es.num_experts = num_experts;
    es.loads = LoadCounter(num_experts - 1);
    es.centroids = store.create("router.centroids",
                                Shape(num_experts - 1, cfg.d_model),
                                Init::normal("router.centroids"));
    for (int e = 0; e + 1 < num_experts; ++e) {
      std::vector<BlockParams<T>> stack;
      for (int j = 0; j < cfg.num_top; ++j) {
        const std::string depth = std::to_string(cfg.num_bottom + j);
        stack.push_back(BlockParams<T>::create(
            store, "top.expert." + std::to_string(e) + "." + std::to_string(j),
            "block." + depth,
            "block." + depth + ".expert" + std::to_string(e), cfg));
      }
      es.unshared.push_back(std::move(stack));
    }
    for (int j = 0; j < cfg.num_top; ++j) {
      const std::string depth = std::to_string(cfg.num_bottom + j);
      es.shared.push_back(BlockParams<T>::create(
          store, "top.shared." + std::to_string(j), "block." + depth,
          "block." + depth, cfg));
    }
    return es;
  }

  // c_t += 1. Applied after a batch's losses are computed so the batch never
  // weights itself; forbidden during evaluation.
  void record_assignment(int t, bool training) {
    if (!training) {
      throw ContractError("record_assignment called in evaluation mode");
    }
    if (t < 0 || t >= static_cast<int>(loads.counts.size())) {
      throw RoutingError("expert index " + std::to_string(t) +
                         " out of range");
    }
    loads.counts[static_cast<size_t>(t)] += 1;
  }
};

// h_q: mean of the question-token hidden states in H'.
template <typename T>
Tensor<T> question_pool(ForwardCtx<T>& ctx, const Tensor<T>& h_prime,
                        int64_t q_start, int64_t q_end) {
  return mean_over_span(ctx.tape, h_prime, q_start, q_end);
}

// s_i = e_i . h_q for each unshared expert.
template <typename T>
Tensor<T> affinities(ForwardCtx<T>& ctx, const Tensor<T>& h_q,
                     const Tensor<T>& centroids) {
  return matmul(ctx.tape, centroids, h_q);
}

// Greedy selection; not differentiated through. Ties break to the lowest
// index.
template <typename T>
int select_expert(const Tensor<T>& s) {
  if (s.shape().rank() != 1 || s.shape().dim(0) < 1) {
    throw DimensionError("select_expert expects a non-empty affinity vector");
  }
  int best = 0;
  for (int64_t i = 1; i < s.shape().dim(0); ++i) {
    if (s.at(i) > s.at(best)) best = static_cast<int>(i);
  }
  return best;
}

// Softmax gate over unshared-expert affinities only.
template <typename T>
Tensor<T> gates(ForwardCtx<T>& ctx, const Tensor<T>& s) {
  return softmax_lastdim(ctx.tape, s);
}

template <typename T>
RoutingDecision<T> route(ForwardCtx<T>& ctx, const ExpertSet<T>& experts,
                         const Tensor<T>& h_q) {
  RoutingDecision<T> d;
  d.affinities = affinities(ctx, h_q, experts.centroids);
  d.selected = select_expert(d.affinities);
  d.gates = gates(ctx, d.affinities);
  d.gate_value = pick(ctx.tape, d.gates, d.selected);
  return d;
}

// H = (1 - g_t) * shared(H') + g_t * selected(H'). Exactly two stacks run
// regardless of m; the gate keeps the task gradient flowing into the
// centroids. Ablations:
//   constant_gate_half  g_t fixed to 0.5, detached from the graph
//   no_shared_expert    the selected stack's output alone
template <typename T>
Tensor<T> combine(ForwardCtx<T>& ctx, const EncoderConfig& cfg,
                  const Tensor<T>& h_prime, const RoutingDecision<T>& decision,
                  const ExpertSet<T>& experts,
                  const std::type_identity_t<std::optional<Tensor<T>>>& attn_bias,
                  const AblationFlags& ablations = {}) {
  if (decision.selected < 0 ||
      decision.selected >= static_cast<int>(experts.unshared.size())) {
    throw RoutingError("selected expert " + std::to_string(decision.selected) +
                       " out of range");
  }
  const auto& sel_stack = experts.unshared[static_cast<size_t>(decision.selected)];
  auto run = [&](const std::vector<BlockParams<T>>& stack) {
    if (ctx.training) experts.train_stack_evals += 1;
    return run_top_stack(ctx, std::span<const BlockParams<T>>(stack), cfg,
                         h_prime, attn_bias);
  };

  if (ablations.no_shared_expert) {
    return run(sel_stack);
  }
  auto selected_out = run(sel_stack);
  auto shared_out = run(experts.shared);
  if (ablations.constant_gate_half) {
    return add(ctx.tape, scale(ctx.tape, shared_out, 0.5),
               scale(ctx.tape, selected_out, 0.5));
  }
  auto one_minus_gate =
      add_const(ctx.tape, scale(ctx.tape, decision.gate_value, -1.0), 1.0);
  return add(ctx.tape, scale_by(ctx.tape, shared_out, one_minus_gate),
             scale_by(ctx.tape, selected_out, decision.gate_value));
}

// L_bal = (m-1) * sum_i (c_i / sum_j c_j) * g_i. The count weights are
// constants; gradient reaches the gates only.
template <typename T>
Tensor<T> balance_loss(ForwardCtx<T>& ctx, const Tensor<T>& g,
                       const LoadCounter& counter) {
  const auto m1 = static_cast<int64_t>(counter.counts.size());
  if (g.shape().rank() != 1 || g.shape().dim(0) != m1) {
    throw DimensionError("balance_loss gate vector " + g.shape().str() +
                         " does not match " + std::to_string(m1) +
                         " unshared experts");
  }
  const double total = static_cast<double>(counter.total());
  Tensor<T> weights{Shape(m1)};
  for (int64_t i = 0; i < m1; ++i) {
    weights.set(i, static_cast<T>(
                       static_cast<double>(counter.counts[static_cast<size_t>(i)]) /
                       total));
  }
  return scale(ctx.tape, sum(ctx.tape, mul(ctx.tape, g, weights)),
               static_cast<double>(m1));
}

}  // namespace moebqa
