// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "moebqa/encoder.hpp"
#include "moebqa/gradcheck.hpp"
#include "testing_util.hpp"

namespace moebqa {
namespace {

EncoderConfig tiny_cfg() {
  EncoderConfig cfg;
  cfg.vocab_size = 24;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.num_bottom = 2;
  cfg.num_top = 1;
  cfg.max_len = 16;
  cfg.dropout_p = 0.0;
  return cfg;
}

EncodedInput make_input(std::vector<int> ids, int64_t q_start, int64_t q_end,
                        int pad_tail = 0) {
  EncodedInput enc;
  enc.token_ids = std::move(ids);
  enc.q_start = q_start;
  enc.q_end = q_end;
  const size_t real = enc.token_ids.size();
  for (int i = 0; i < pad_tail; ++i) enc.token_ids.push_back(Vocabulary::kPad);
  enc.segment_ids.assign(enc.token_ids.size(), 0);
  enc.attention_mask.assign(enc.token_ids.size(), 1);
  for (size_t i = real; i < enc.token_ids.size(); ++i) enc.attention_mask[i] = 0;
  return enc;
}

// Reference row-wise layer norm, independent of the ops implementation.
std::vector<double> ref_layer_norm_row(const std::vector<double>& row) {
  double mean = 0;
  for (double v : row) mean += v;
  mean /= static_cast<double>(row.size());
  double var = 0;
  for (double v : row) var += (v - mean) * (v - mean);
  var /= static_cast<double>(row.size());
  std::vector<double> out(row.size());
  for (size_t i = 0; i < row.size(); ++i) {
    out[i] = (row[i] - mean) / std::sqrt(var + kLayerNormEps);
  }
  return out;
}

TEST(Embed, ZeroTablesGiveZeroOutput) {
  auto cfg = tiny_cfg();
  ParamStore<double> store(1);
  auto tables = EmbeddingTables<double>::create(store, cfg);
  for (auto& v : tables.token.data()) v = 0;
  for (auto& v : tables.position.data()) v = 0;
  for (auto& v : tables.segment.data()) v = 0;
  ForwardCtx<double> ctx;
  auto enc = make_input({2, 5, 6, 3}, 1, 3);
  auto out = embed(ctx, tables, cfg, enc);
  for (int64_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.at(i), 0.0, 1e-12);
}

TEST(Embed, PaddingTailDoesNotChangeRealPositions) {
  auto cfg = tiny_cfg();
  ParamStore<double> store(2);
  auto tables = EmbeddingTables<double>::create(store, cfg);
  ForwardCtx<double> ctx;
  auto a = embed(ctx, tables, cfg, make_input({2, 5, 6, 3}, 1, 3));
  auto b = embed(ctx, tables, cfg, make_input({2, 5, 6, 3}, 1, 3, 4));
  for (int64_t r = 0; r < 4; ++r) {
    for (int64_t c = 0; c < cfg.d_model; ++c) {
      EXPECT_DOUBLE_EQ(a.at(r, c), b.at(r, c));
    }
  }
}

TEST(Embed, TokenSwapIsLocalGivenZeroPositionTables) {
  auto cfg = tiny_cfg();
  ParamStore<double> store(3);
  auto tables = EmbeddingTables<double>::create(store, cfg);
  for (auto& v : tables.position.data()) v = 0;
  for (auto& v : tables.segment.data()) v = 0;
  ForwardCtx<double> ctx;
  auto a = embed(ctx, tables, cfg, make_input({2, 5, 6, 3}, 1, 3));
  auto b = embed(ctx, tables, cfg, make_input({2, 6, 5, 3}, 1, 3));
  for (int64_t c = 0; c < cfg.d_model; ++c) {
    EXPECT_DOUBLE_EQ(a.at(1, c), b.at(2, c));
    EXPECT_DOUBLE_EQ(a.at(2, c), b.at(1, c));
    EXPECT_DOUBLE_EQ(a.at(0, c), b.at(0, c));
    EXPECT_DOUBLE_EQ(a.at(3, c), b.at(3, c));
  }
}

TEST(Embed, InputViolationsAreErrors) {
  auto cfg = tiny_cfg();
  ParamStore<double> store(4);
  auto tables = EmbeddingTables<double>::create(store, cfg);
  ForwardCtx<double> ctx;
  auto too_big_id = make_input({2, 99, 3}, 1, 2);
  EXPECT_THROW(embed(ctx, tables, cfg, too_big_id), InputError);
  std::vector<int> long_ids(static_cast<size_t>(cfg.max_len) + 1, 5);
  auto too_long = make_input(long_ids, 1, 2);
  EXPECT_THROW(embed(ctx, tables, cfg, too_long), InputError);
}

TEST(EncodeBottom, ZeroSublayersReduceToResidualLayerNorms) {
  auto cfg = tiny_cfg();
  ParamStore<double> store(5);
  auto tables = EmbeddingTables<double>::create(store, cfg);
  std::vector<BlockParams<double>> bottom;
  for (int i = 0; i < cfg.num_bottom; ++i) {
    bottom.push_back(BlockParams<double>::create(
        store, "bottom." + std::to_string(i), "block." + std::to_string(i),
        "block." + std::to_string(i), cfg));
  }
  // Zero every attention/FFN weight and bias; layer norms stay (gain 1, bias 0).
  for (auto& blk : bottom) {
    for (auto* t : {&blk.wq, &blk.bq, &blk.wk, &blk.bk, &blk.wv, &blk.bv,
                    &blk.wo, &blk.bo, &blk.w1, &blk.b1, &blk.w2, &blk.b2}) {
      for (auto& v : t->data()) v = 0;
    }
  }
  ForwardCtx<double> ctx;
  auto enc = make_input({2, 5, 6, 7, 3}, 1, 4);
  auto embedded = embed(ctx, tables, cfg, enc);
  auto out = encode_bottom(ctx, tables, bottom, cfg, enc, std::nullopt);
  // Each block with zero sublayers maps x to LN(LN(x)).
  for (int64_t r = 0; r < embedded.shape().rows(); ++r) {
    std::vector<double> row(static_cast<size_t>(cfg.d_model));
    for (int64_t c = 0; c < cfg.d_model; ++c) row[static_cast<size_t>(c)] = embedded.at(r, c);
    for (int i = 0; i < cfg.num_bottom; ++i) {
      row = ref_layer_norm_row(ref_layer_norm_row(row));
    }
    for (int64_t c = 0; c < cfg.d_model; ++c) {
      EXPECT_NEAR(out.at(r, c), row[static_cast<size_t>(c)], 1e-9);
    }
  }
}

TEST(EncodeBottom, PaddingInvariance) {
  auto cfg = tiny_cfg();
  ParamStore<double> store(6);
  auto tables = EmbeddingTables<double>::create(store, cfg);
  std::vector<BlockParams<double>> bottom;
  for (int i = 0; i < cfg.num_bottom; ++i) {
    bottom.push_back(BlockParams<double>::create(
        store, "bottom." + std::to_string(i), "block." + std::to_string(i),
        "block." + std::to_string(i), cfg));
  }
  ForwardCtx<double> ctx;
  auto plain = make_input({2, 5, 6, 7, 8, 3}, 1, 5);
  auto padded = make_input({2, 5, 6, 7, 8, 3}, 1, 5, 5);
  auto bias_plain = make_attention_bias<double>(plain);
  auto bias_padded = make_attention_bias<double>(padded);
  EXPECT_FALSE(bias_plain.has_value());
  ASSERT_TRUE(bias_padded.has_value());
  auto a = encode_bottom(ctx, tables, bottom, cfg, plain, bias_plain);
  auto b = encode_bottom(ctx, tables, bottom, cfg, padded, bias_padded);
  for (int64_t r = 0; r < 6; ++r) {
    for (int64_t c = 0; c < cfg.d_model; ++c) {
      EXPECT_NEAR(a.at(r, c), b.at(r, c), 1e-6);
    }
  }
}

TEST(EncodeBottom, DeterministicInEvalMode) {
  auto cfg = tiny_cfg();
  cfg.dropout_p = 0.1;  // must be ignored outside training
  ParamStore<double> store(7);
  auto tables = EmbeddingTables<double>::create(store, cfg);
  std::vector<BlockParams<double>> bottom;
  bottom.push_back(BlockParams<double>::create(store, "bottom.0", "block.0",
                                               "block.0", cfg));
  ForwardCtx<double> ctx;
  auto enc = make_input({2, 5, 6, 3}, 1, 3);
  auto a = encode_bottom(ctx, tables, bottom, cfg, enc, std::nullopt);
  auto b = encode_bottom(ctx, tables, bottom, cfg, enc, std::nullopt);
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_DOUBLE_EQ(a.at(i), b.at(i));
}

TEST(RunTopStack, EmptyStackIsIdentity) {
  auto cfg = tiny_cfg();
  cfg.num_top = 0;
  Rng rng(1);
  auto h = testing::rand_tensor<double>(Shape(5, cfg.d_model), rng);
  ForwardCtx<double> ctx;
  std::vector<BlockParams<double>> empty;
  auto out = run_top_stack(ctx, std::span<const BlockParams<double>>(empty),
                           cfg, h, std::nullopt);
  for (int64_t i = 0; i < h.numel(); ++i) EXPECT_DOUBLE_EQ(out.at(i), h.at(i));
}

TEST(RunTopStack, StackLengthMismatchIsConfigError) {
  auto cfg = tiny_cfg();  // num_top = 1
  ParamStore<double> store(8);
  std::vector<BlockParams<double>> two;
  two.push_back(BlockParams<double>::create(store, "a0", "a0", "a0", cfg));
  two.push_back(BlockParams<double>::create(store, "a1", "a1", "a1", cfg));
  Rng rng(2);
  auto h = testing::rand_tensor<double>(Shape(4, cfg.d_model), rng);
  ForwardCtx<double> ctx;
  EXPECT_THROW(run_top_stack(ctx, std::span<const BlockParams<double>>(two),
                             cfg, h, std::nullopt),
               ConfigError);
}

TEST(RunTopStack, DistinctStacksGenerallyDiffer) {
  auto cfg = tiny_cfg();
  ParamStore<double> store(9);
  std::vector<BlockParams<double>> s1, s2;
  s1.push_back(BlockParams<double>::create(store, "s1.0", "s1.0", "s1.0", cfg));
  s2.push_back(BlockParams<double>::create(store, "s2.0", "s2.0", "s2.0", cfg));
  Rng rng(3);
  auto h = testing::rand_tensor<double>(Shape(4, cfg.d_model), rng);
  ForwardCtx<double> ctx;
  auto a = run_top_stack(ctx, std::span<const BlockParams<double>>(s1), cfg, h,
                         std::nullopt);
  auto b = run_top_stack(ctx, std::span<const BlockParams<double>>(s2), cfg, h,
                         std::nullopt);
  double max_diff = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    max_diff = std::max(max_diff, std::abs(a.at(i) - b.at(i)));
  }
  EXPECT_GT(max_diff, 1e-6);
}

TEST(EncoderGradients, FullEncoderPassesFiniteDifferences) {
  auto cfg = tiny_cfg();
  cfg.dropout_p = 0.1;  // exercised through the counter-based mask
  ParamStore<double> store(10);
  auto tables = EmbeddingTables<double>::create(store, cfg);
  std::vector<BlockParams<double>> bottom;
  for (int i = 0; i < cfg.num_bottom; ++i) {
    bottom.push_back(BlockParams<double>::create(
        store, "bottom." + std::to_string(i), "block." + std::to_string(i),
        "block." + std::to_string(i), cfg));
  }
  std::vector<BlockParams<double>> top;
  top.push_back(BlockParams<double>::create(store, "top.0", "block.2",
                                            "block.2", cfg));
  auto enc = make_input({2, 5, 6, 7, 8, 9, 10, 11, 12, 4, 3}, 2, 6, 1);
  auto bias = make_attention_bias<double>(enc);
  Rng rng(11);
  auto w = testing::rand_const<double>(Shape(12, cfg.d_model), rng);

  auto report = finite_diff_check(
      [&](Tape<double>* tape) {
        ForwardCtx<double> ctx{tape, /*training=*/true, /*seed=*/77, /*step=*/5};
        auto h = encode_bottom(ctx, tables, bottom, cfg, enc, bias);
        auto out = run_top_stack(ctx, std::span<const BlockParams<double>>(top),
                                 cfg, h, bias);
        return sum(tape, mul(tape, out, w));
      },
      store, 1e-5, 1e-5);
  EXPECT_TRUE(report.pass) << "worst=" << report.worst_param
                           << " rel=" << report.max_rel_err;
}

}  // namespace
}  // namespace moebqa
