// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moebqa/moe.hpp"
#include "moebqa/qa_head.hpp"

namespace moebqa {

template <typename T>
struct ForwardResult {
  Tensor<T> task;                    // scalar task loss
  std::optional<Tensor<T>> balance;  // scalar, present when routing ran
  std::vector<RoutingDecision<T>> decisions;  // per option, or one if routed
                                              // per example
  OptionDistribution<T> dist;
  int answer = 0;
};

// The encoder split into shared bottom blocks and MoE-extended top blocks,
// plus the option scoring head. m == 1 or L_t == 0 degenerate to the dense
// baseline: with one expert the shared stack alone runs, with no top blocks
// the routing machinery does not exist at all.
template <typename T>
class Model {
 public:
  explicit Model(TrainConfig cfg) : cfg_(std::move(cfg)), params_(cfg_.seed) {
    cfg_.validate();
    embed_ = EmbeddingTables<T>::create(params_, cfg_.encoder);
    for (int i = 0; i < cfg_.encoder.num_bottom; ++i) {
      const std::string depth = std::to_string(i);
      bottom_.push_back(BlockParams<T>::create(params_,
                                               "bottom." + depth,
                                               "block." + depth,
                                               "block." + depth,
                                               cfg_.encoder));
    }
    if (cfg_.encoder.num_top > 0) {
      if (cfg_.num_experts >= 2) {
        experts_ = ExpertSet<T>::create(params_, cfg_.encoder, cfg_.num_experts);
      } else {
        for (int j = 0; j < cfg_.encoder.num_top; ++j) {
          const std::string depth = std::to_string(cfg_.encoder.num_bottom + j);
          dense_top_.push_back(BlockParams<T>::create(params_,
                                                      "top.shared." + std::to_string(j),
                                                      "block." + depth,
                                                      "block." + depth,
                                                      cfg_.encoder));
        }
      }
    }
    head_ = ScoringHead<T>::create(params_, cfg_.encoder, cfg_.pooler);
  }

  [[nodiscard]] const TrainConfig& config() const { return cfg_; }
  [[nodiscard]] ParamStore<T>& params() { return params_; }
  [[nodiscard]] const ParamStore<T>& params() const { return params_; }
  [[nodiscard]] bool has_experts() const { return experts_.has_value(); }
  [[nodiscard]] ExpertSet<T>& experts() { return *experts_; }
  [[nodiscard]] const ExpertSet<T>& experts() const { return *experts_; }
  [[nodiscard]] const ScoringHead<T>& head() const { return head_; }

  // H' for one option sequence.
  Tensor<T> encode_option(ForwardCtx<T>& ctx, const EncodedInput& enc) const {
    auto bias = make_attention_bias<T>(enc);
    return encode_bottom(ctx, embed_, bottom_, cfg_.encoder, enc, bias);
  }

  // The routing feature: mean-pooled question span, or the CLS state under
  // the route_by_cls ablation.
  Tensor<T> routing_feature(ForwardCtx<T>& ctx, const Tensor<T>& h_prime,
                            const EncodedInput& enc) const {
    if (cfg_.ablations.route_by_cls) {
      return reshape(ctx.tape, slice_rows(ctx.tape, h_prime, 0, 1),
                     Shape(h_prime.shape().cols()));
    }
    return question_pool(ctx, h_prime, enc.q_start, enc.q_end);
  }

  ForwardResult<T> forward_example(ForwardCtx<T>& ctx,
                                   const RawExample& example,
                                   const Vocabulary& vocab) const {
    const int n = static_cast<int>(example.options.size());
    // The i-th option sequence runs at dropout step base + i throughout, no
    // matter which phase touches it; the dense-equivalent models then see
    // identical masks at every depth.
    const uint64_t base_step = ctx.step;
    std::vector<EncodedInput> encs;
    std::vector<std::optional<Tensor<T>>> biases;
    std::vector<Tensor<T>> h_primes;
    std::vector<Tensor<T>> feats;
    encs.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      ctx.step = base_step + static_cast<uint64_t>(i);
      EncodedInput enc = assemble_input(vocab, example, i, cfg_.encoder.max_len);
      auto bias = make_attention_bias<T>(enc);
      auto h_prime =
          encode_bottom(ctx, embed_, bottom_, cfg_.encoder, enc, bias);
      if (experts_) feats.push_back(routing_feature(ctx, h_prime, enc));
      encs.push_back(std::move(enc));
      biases.push_back(std::move(bias));
      h_primes.push_back(std::move(h_prime));
    }

    ForwardResult<T> result;
    result.answer = example.answer;

    auto top_and_score = [&](int i, const std::optional<RoutingDecision<T>>& d)
        -> Tensor<T> {
      ctx.step = base_step + static_cast<uint64_t>(i);
      Tensor<T> h = h_primes[static_cast<size_t>(i)];
      if (d) {
        h = combine(ctx, cfg_.encoder, h, *d, *experts_,
                    biases[static_cast<size_t>(i)], cfg_.ablations);
      } else if (!dense_top_.empty()) {
        h = run_top_stack(ctx, std::span<const BlockParams<T>>(dense_top_),
                          cfg_.encoder, h, biases[static_cast<size_t>(i)]);
      }
      auto pooled = pool(ctx, h, head_);
      return score_option(ctx, pooled, head_);
    };

    std::vector<Tensor<T>> scores;
    scores.reserve(static_cast<size_t>(n));
    if (!experts_) {
      for (int i = 0; i < n; ++i) scores.push_back(top_and_score(i, std::nullopt));
    } else if (cfg_.ablations.route_per_example) {
      // One routing decision per example: average the option-level features.
      Tensor<T> acc = feats[0];
      for (int i = 1; i < n; ++i) acc = add(ctx.tape, acc, feats[static_cast<size_t>(i)]);
      auto h_q = scale(ctx.tape, acc, 1.0 / n);
      auto decision = route(ctx, *experts_, h_q);
      for (int i = 0; i < n; ++i) scores.push_back(top_and_score(i, decision));
      if (ctx.training) {
        result.balance = balance_loss(ctx, decision.gates, experts_->loads);
      }
      result.decisions.push_back(std::move(decision));
    } else {
      // Default: each (context, question, option) sequence routes on its own.
      std::vector<Tensor<T>> balances;
      for (int i = 0; i < n; ++i) {
        auto decision = route(ctx, *experts_, feats[static_cast<size_t>(i)]);
        scores.push_back(top_and_score(i, decision));
        if (ctx.training) {
          balances.push_back(
              balance_loss(ctx, decision.gates, experts_->loads));
        }
        result.decisions.push_back(std::move(decision));
      }
      if (!balances.empty()) {
        Tensor<T> acc = balances[0];
        for (size_t i = 1; i < balances.size(); ++i) {
          acc = add(ctx.tape, acc, balances[i]);
        }
        result.balance = scale(ctx.tape, acc, 1.0 / static_cast<double>(n));
      }
    }
    ctx.step = base_step + static_cast<uint64_t>(n);

    result.dist = option_distribution(ctx, scores);
    result.task = task_loss(ctx, result.dist, example.answer);
    return result;
  }

 private:
  TrainConfig cfg_;
  ParamStore<T> params_;
  EmbeddingTables<T> embed_;
  std::vector<BlockParams<T>> bottom_;
  std::optional<ExpertSet<T>> experts_;
  std::vector<BlockParams<T>> dense_top_;
  ScoringHead<T> head_;
};

}  // namespace moebqa
