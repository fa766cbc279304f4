// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "moebqa/config.hpp"
#include "moebqa/data.hpp"
#include "moebqa/ops.hpp"
#include "moebqa/params.hpp"

namespace moebqa {

inline constexpr double kLayerNormEps = 1e-12;
inline constexpr double kMaskBias = -1e9;

// Per-forward state threaded through the model. tape == nullptr runs
// inference; `step` is the global option-sequence counter keying dropout.
template <typename T>
struct ForwardCtx {
  Tape<T>* tape = nullptr;
  bool training = false;
  uint64_t seed = 0;
  uint64_t step = 0;
};

// One post-layer-norm transformer block. Initialization keys are structural
// ("block.<depth>..."), so every expert copy of a top block and the block at
// the same depth of a dense model start from identical weights. Dropout call
// sites carry the expert tag instead, keeping unshared experts' masks
// independent.
template <typename T>
struct BlockParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> w1, b1, w2, b2;
  Tensor<T> ln2_gain, ln2_bias;
  uint64_t drop_attn_probs = 0;
  uint64_t drop_attn_out = 0;
  uint64_t drop_ffn_out = 0;

  static BlockParams create(ParamStore<T>& store, const std::string& name,
                            const std::string& init_key,
                            const std::string& drop_key,
                            const EncoderConfig& cfg) {
    const int64_t d = cfg.d_model;
    const int64_t f = cfg.d_ff;
    BlockParams b;
    b.wq = store.create(name + ".attn.wq", Shape(d, d), Init::normal(init_key + ".attn.wq"));
    b.bq = store.create(name + ".attn.bq", Shape(d), Init::zeros());
    // Key projection starts equal to the query projection, so same-token
    // attention logits are maximal at init (a Gram matrix); token-matching
    // heads then form quickly even from scratch.
    b.wk = store.create(name + ".attn.wk", Shape(d, d), Init::normal(init_key + ".attn.wq"));
    b.bk = store.create(name + ".attn.bk", Shape(d), Init::zeros());
    b.wv = store.create(name + ".attn.wv", Shape(d, d), Init::normal(init_key + ".attn.wv"));
    b.bv = store.create(name + ".attn.bv", Shape(d), Init::zeros());
    b.wo = store.create(name + ".attn.wo", Shape(d, d), Init::normal(init_key + ".attn.wo"));
    b.bo = store.create(name + ".attn.bo", Shape(d), Init::zeros());
    b.ln1_gain = store.create(name + ".ln1.gain", Shape(d), Init::ones());
    b.ln1_bias = store.create(name + ".ln1.bias", Shape(d), Init::zeros());
    b.w1 = store.create(name + ".ffn.w1", Shape(d, f), Init::normal(init_key + ".ffn.w1"));
    b.b1 = store.create(name + ".ffn.b1", Shape(f), Init::zeros());
    b.w2 = store.create(name + ".ffn.w2", Shape(f, d), Init::normal(init_key + ".ffn.w2"));
    b.b2 = store.create(name + ".ffn.b2", Shape(d), Init::zeros());
    b.ln2_gain = store.create(name + ".ln2.gain", Shape(d), Init::ones());
    b.ln2_bias = store.create(name + ".ln2.bias", Shape(d), Init::zeros());
    b.drop_attn_probs = hash_str("drop." + drop_key + ".attn_probs");
    b.drop_attn_out = hash_str("drop." + drop_key + ".attn_out");
    b.drop_ffn_out = hash_str("drop." + drop_key + ".ffn_out");
    return b;
  }
};

template <typename T>
struct EmbeddingTables {
  Tensor<T> token, position, segment;
  Tensor<T> ln_gain, ln_bias;
  uint64_t drop_site = 0;

  static EmbeddingTables create(ParamStore<T>& store,
                                const EncoderConfig& cfg) {
    EmbeddingTables e;
    e.token = store.create("embed.token", Shape(cfg.vocab_size, cfg.d_model),
                           Init::normal("embed.token"));
    e.position = store.create("embed.position", Shape(cfg.max_len, cfg.d_model),
                              Init::normal("embed.position"));
    e.segment = store.create("embed.segment", Shape(cfg.n_segments, cfg.d_model),
                             Init::normal("embed.segment"));
    e.ln_gain = store.create("embed.ln.gain", Shape(cfg.d_model), Init::ones());
    e.ln_bias = store.create("embed.ln.bias", Shape(cfg.d_model), Init::zeros());
    e.drop_site = hash_str("drop.embed");
    return e;
  }
};

// Additive attention bias: 0 on real keys, -1e9 on padding keys. Empty when
// nothing is padded.
template <typename T>
std::optional<Tensor<T>> make_attention_bias(const EncodedInput& input) {
  bool any_pad = false;
  for (uint8_t m : input.attention_mask) any_pad = any_pad || m == 0;
  if (!any_pad) return std::nullopt;
  const int64_t t = input.length();
  Tensor<T> bias(Shape(t, t));
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = 0; j < t; ++j) {
      if (input.attention_mask[static_cast<size_t>(j)] == 0) {
        bias.set(i, j, static_cast<T>(kMaskBias));
      }
    }
  }
  return bias;
}

template <typename T>
Tensor<T> embed(ForwardCtx<T>& ctx, const EmbeddingTables<T>& tables,
                const EncoderConfig& cfg, const EncodedInput& input) {
  const int64_t t = input.length();
  if (t < 1 || t > cfg.max_len) {
    throw InputError("sequence length " + std::to_string(t) +
                     " outside [1," + std::to_string(cfg.max_len) + "]");
  }
  std::vector<int> positions(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = static_cast<int>(i);
  auto tok = embedding_lookup(ctx.tape, tables.token, input.token_ids);
  auto pos = embedding_lookup(ctx.tape, tables.position, positions);
  auto seg = embedding_lookup(ctx.tape, tables.segment, input.segment_ids);
  auto sum3 = add(ctx.tape, add(ctx.tape, tok, pos), seg);
  auto normed = layer_norm(ctx.tape, sum3, tables.ln_gain, tables.ln_bias,
                           kLayerNormEps);
  return dropout(ctx.tape, normed, cfg.dropout_p, ctx.seed, tables.drop_site,
                 ctx.step, ctx.training);
}

template <typename T>
Tensor<T> apply_block(ForwardCtx<T>& ctx, const BlockParams<T>& blk,
                      const EncoderConfig& cfg, const Tensor<T>& x,
                      const std::type_identity_t<std::optional<Tensor<T>>>& attn_bias) {
  const int64_t d = cfg.d_model;
  const int64_t dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  auto q = add(ctx.tape, matmul(ctx.tape, x, blk.wq), blk.bq);
  auto k = add(ctx.tape, matmul(ctx.tape, x, blk.wk), blk.bk);
  auto v = add(ctx.tape, matmul(ctx.tape, x, blk.wv), blk.bv);

  std::vector<Tensor<T>> head_ctx;
  head_ctx.reserve(static_cast<size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    const int64_t c0 = h * dh;
    const int64_t c1 = c0 + dh;
    auto qh = slice_cols(ctx.tape, q, c0, c1);
    auto kh = slice_cols(ctx.tape, k, c0, c1);
    auto vh = slice_cols(ctx.tape, v, c0, c1);
    auto scores = scale(ctx.tape, matmul(ctx.tape, qh, transpose(ctx.tape, kh)),
                        inv_sqrt_dh);
    if (attn_bias) scores = add(ctx.tape, scores, *attn_bias);
    auto probs = softmax_lastdim(ctx.tape, scores);
    probs = dropout(ctx.tape, probs, cfg.dropout_p, ctx.seed,
                    blk.drop_attn_probs + static_cast<uint64_t>(h), ctx.step,
                    ctx.training);
    head_ctx.push_back(matmul(ctx.tape, probs, vh));
  }
  auto merged = concat_cols(ctx.tape, head_ctx);
  auto attn_out = add(ctx.tape, matmul(ctx.tape, merged, blk.wo), blk.bo);
  attn_out = dropout(ctx.tape, attn_out, cfg.dropout_p, ctx.seed,
                     blk.drop_attn_out, ctx.step, ctx.training);
  auto h1 = layer_norm(ctx.tape, add(ctx.tape, x, attn_out), blk.ln1_gain,
                       blk.ln1_bias, kLayerNormEps);

  auto f = add(ctx.tape, matmul(ctx.tape, h1, blk.w1), blk.b1);
  f = gelu(ctx.tape, f);
  f = add(ctx.tape, matmul(ctx.tape, f, blk.w2), blk.b2);
  f = dropout(ctx.tape, f, cfg.dropout_p, ctx.seed, blk.drop_ffn_out, ctx.step,
              ctx.training);
  return layer_norm(ctx.tape, add(ctx.tape, h1, f), blk.ln2_gain, blk.ln2_bias,
                    kLayerNormEps);
}

// Embeddings plus the shared bottom blocks: the H' hidden states every
// routing and expert computation starts from.
template <typename T>
Tensor<T> encode_bottom(ForwardCtx<T>& ctx, const EmbeddingTables<T>& tables,
                        const std::vector<BlockParams<T>>& bottom,
                        const EncoderConfig& cfg, const EncodedInput& input,
                        const std::type_identity_t<std::optional<Tensor<T>>>& attn_bias) {
  auto x = embed(ctx, tables, cfg, input);
  for (const auto& blk : bottom) x = apply_block(ctx, blk, cfg, x, attn_bias);
  return x;
}

template <typename T>
Tensor<T> run_top_stack(ForwardCtx<T>& ctx,
                        std::span<const BlockParams<T>> stack,
                        const EncoderConfig& cfg, const Tensor<T>& h_prime,
                        const std::type_identity_t<std::optional<Tensor<T>>>& attn_bias) {
  if (static_cast<int>(stack.size()) != cfg.num_top) {
    throw ConfigError("top stack has " + std::to_string(stack.size()) +
                      " blocks, expected L_t = " + std::to_string(cfg.num_top));
  }
  Tensor<T> x = h_prime;
  for (const auto& blk : stack) x = apply_block(ctx, blk, cfg, x, attn_bias);
  return x;
}

}  // namespace moebqa
