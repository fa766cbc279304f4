// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "moebqa/encoder.hpp"

namespace moebqa {

// Scores one option: dot(q, pooled CLS state), optionally through a dense
// pooler with tanh. The pooler defaults off; it exists because the
// routing-by-CLS ablation compares pooled representations.
template <typename T>
struct ScoringHead {
  Tensor<T> q;
  Tensor<T> pooler_w, pooler_b;
  bool pooler_enabled = false;

  static ScoringHead create(ParamStore<T>& store, const EncoderConfig& cfg,
                            bool pooler) {
    ScoringHead h;
    h.q = store.create("head.q", Shape(cfg.d_model), Init::normal("head.q"));
    h.pooler_enabled = pooler;
    if (pooler) {
      h.pooler_w = store.create("head.pooler.w", Shape(cfg.d_model, cfg.d_model),
                                Init::normal("head.pooler.w"));
      h.pooler_b = store.create("head.pooler.b", Shape(cfg.d_model),
                                Init::zeros());
    }
    return h;
  }
};

// Position-0 (CLS) hidden state, optionally through the pooler.
template <typename T>
Tensor<T> pool(ForwardCtx<T>& ctx, const Tensor<T>& h,
               const ScoringHead<T>& head) {
  auto cls = reshape(ctx.tape, slice_rows(ctx.tape, h, 0, 1),
                     Shape(h.shape().cols()));
  if (!head.pooler_enabled) return cls;
  return tanh_op(ctx.tape,
                 add(ctx.tape, matmul(ctx.tape, cls, head.pooler_w),
                     head.pooler_b));
}

template <typename T>
Tensor<T> score_option(ForwardCtx<T>& ctx, const Tensor<T>& pooled,
                       const ScoringHead<T>& head) {
  return matmul(ctx.tape, head.q, pooled);
}

template <typename T>
struct OptionDistribution {
  Tensor<T> alpha;  // probability per option
  int predicted = 0;
};

template <typename T>
OptionDistribution<T> option_distribution(ForwardCtx<T>& ctx,
                                          const std::vector<Tensor<T>>& scores) {
  if (scores.size() < 2) {
    throw InputError("option_distribution needs at least 2 options, got " +
                     std::to_string(scores.size()));
  }
  OptionDistribution<T> dist;
  dist.alpha = softmax_lastdim(ctx.tape, stack(ctx.tape, scores));
  dist.predicted = 0;
  for (int64_t i = 1; i < dist.alpha.shape().dim(0); ++i) {
    if (dist.alpha.at(i) > dist.alpha.at(dist.predicted)) {
      dist.predicted = static_cast<int>(i);
    }
  }
  return dist;
}

// Negative log likelihood of the annotated answer.
template <typename T>
Tensor<T> task_loss(ForwardCtx<T>& ctx, const OptionDistribution<T>& dist,
                    int answer) {
  if (answer < 0 || answer >= dist.alpha.shape().dim(0)) {
    throw ValidationError("answer label " + std::to_string(answer) +
                          " out of range for " +
                          std::to_string(dist.alpha.shape().dim(0)) +
                          " options");
  }
  return scale(ctx.tape, log_op(ctx.tape, pick(ctx.tape, dist.alpha, answer)),
               -1.0);
}

}  // namespace moebqa
