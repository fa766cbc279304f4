// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <vector>

#include <gtest/gtest.h>

#include "moebqa/analysis.hpp"
#include "testing_util.hpp"

namespace moebqa {
namespace {

SynthSpec tiny_spec() {
  SynthSpec spec;
  spec.num_keys = 12;
  spec.num_values = 12;
  spec.pairs_min = 4;
  spec.pairs_max = 5;
  spec.train_size = 16;
  spec.valid_size = 8;
  spec.test_size = 8;
  spec.seed = 11;
  return spec;
}

TrainConfig tiny_cfg(const Vocabulary& vocab, int experts = 3) {
  TrainConfig cfg;
  cfg.encoder.vocab_size = vocab.size();
  cfg.encoder.d_model = 8;
  cfg.encoder.n_heads = 2;
  cfg.encoder.d_ff = 16;
  cfg.encoder.num_bottom = 1;
  cfg.encoder.num_top = 1;
  cfg.encoder.max_len = 32;
  cfg.encoder.dropout_p = 0.0;
  cfg.num_experts = experts;
  cfg.seed = 13;
  return cfg;
}

template <typename T>
void fill_expert_stack(Model<T>& model, int expert, double value) {
  const std::string prefix = "top.expert." + std::to_string(expert) + ".";
  for (const auto& p : model.params().items()) {
    if (p.name.starts_with(prefix)) {
      for (auto& v : p.tensor.data()) v = static_cast<T>(value);
    }
  }
}

TEST(ExpertSimilarity, FreshCopiesAreMaximallySimilar) {
  auto spec = tiny_spec();
  auto vocab = build_vocabulary(spec);
  Model<double> model(tiny_cfg(vocab, 4));
  auto sim = expert_similarity(model);
  ASSERT_EQ(sim.size(), 4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      EXPECT_DOUBLE_EQ(sim.values[static_cast<size_t>(i)][static_cast<size_t>(j)], 1.0);
    }
  }
}

TEST(ExpertSimilarity, EndpointsAndSymmetry) {
  auto spec = tiny_spec();
  auto vocab = build_vocabulary(spec);
  Model<double> model(tiny_cfg(vocab, 3));
  // Expert 1 = -Expert 0 (cosine -1 -> 0), shared stays a copy of expert 0.
  const std::string p0 = "top.expert.0.";
  for (const auto& p : model.params().items()) {
    if (p.name.starts_with(p0)) {
      const std::string suffix = p.name.substr(p0.size());
      auto other = model.params().get("top.expert.1." + suffix);
      auto src = p.tensor.data();
      auto dst = other.data();
      for (size_t i = 0; i < dst.size(); ++i) dst[i] = -src[i];
    }
  }
  auto sim = expert_similarity(model);
  ASSERT_EQ(sim.size(), 3);
  EXPECT_NEAR(sim.values[0][1], 0.0, 1e-9);
  EXPECT_NEAR(sim.values[0][2], 1.0, 1e-9);  // shared == expert 0 copy
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(sim.values[static_cast<size_t>(i)][static_cast<size_t>(i)], 1.0);
    for (int j = 0; j < 3; ++j) {
      EXPECT_DOUBLE_EQ(sim.values[static_cast<size_t>(i)][static_cast<size_t>(j)],
                       sim.values[static_cast<size_t>(j)][static_cast<size_t>(i)]);
      EXPECT_GE(sim.values[static_cast<size_t>(i)][static_cast<size_t>(j)], 0.0);
      EXPECT_LE(sim.values[static_cast<size_t>(i)][static_cast<size_t>(j)], 1.0);
    }
  }
}

TEST(ExpertSimilarity, OrthogonalVectorsLandAtHalf) {
  auto spec = tiny_spec();
  auto vocab = build_vocabulary(spec);
  Model<double> model(tiny_cfg(vocab, 3));
  // Build orthogonal parameter vectors by zeroing everything and setting
  // disjoint coordinates.
  fill_expert_stack(model, 0, 0.0);
  fill_expert_stack(model, 1, 0.0);
  model.params().get("top.expert.0.0.attn.wq").set(0, 0, 1.0);
  model.params().get("top.expert.1.0.attn.wk").set(0, 0, 1.0);
  auto sim = expert_similarity(model);
  EXPECT_NEAR(sim.values[0][1], 0.5, 1e-12);
}

TEST(LoadStatsTest, HandComputedFractions) {
  std::vector<ExampleRecord> records;
  auto add_n = [&](int expert, int n) {
    for (int i = 0; i < n; ++i) {
      ExampleRecord rec;
      rec.routing.push_back({0, expert, 0.5});
      records.push_back(rec);
    }
  };
  add_n(0, 50);
  add_n(1, 50);
  add_n(2, 60);
  add_n(3, 40);
  auto stats = load_stats(records, 4);
  EXPECT_NEAR(stats.fractions[0], 0.25, 1e-12);
  EXPECT_NEAR(stats.fractions[1], 0.25, 1e-12);
  EXPECT_NEAR(stats.fractions[2], 0.30, 1e-12);
  EXPECT_NEAR(stats.fractions[3], 0.20, 1e-12);
  EXPECT_NEAR(stats.max_uniform_ratio, 1.2, 1e-12);
}

TEST(LoadStatsTest, ExtremesAndErrors) {
  std::vector<ExampleRecord> one;
  ExampleRecord rec;
  rec.routing.push_back({0, 2, 1.0});
  one.push_back(rec);
  auto stats = load_stats(one, 4);
  EXPECT_NEAR(stats.max_uniform_ratio, 4.0, 1e-12);  // everything on one expert

  std::vector<ExampleRecord> uniform;
  for (int e = 0; e < 4; ++e) {
    ExampleRecord r;
    r.routing.push_back({0, e, 0.5});
    uniform.push_back(r);
  }
  EXPECT_NEAR(load_stats(uniform, 4).max_uniform_ratio, 1.0, 1e-12);

  EXPECT_THROW(load_stats({}, 4), InputError);
}

TEST(RoutingPurityTest, PerfectAndDegenerateCases) {
  // Each expert receives exactly one type: purity 1.
  std::vector<ExampleRecord> perfect;
  for (int e = 0; e < 4; ++e) {
    for (int i = 0; i < 10; ++i) {
      ExampleRecord rec;
      rec.type_label = e;
      rec.routing.push_back({0, e, 0.5});
      perfect.push_back(rec);
    }
  }
  EXPECT_DOUBLE_EQ(routing_purity(perfect), 1.0);

  // One expert receives everything, K=4 balanced types: purity 1/K.
  std::vector<ExampleRecord> collapsed;
  for (int t = 0; t < 4; ++t) {
    for (int i = 0; i < 10; ++i) {
      ExampleRecord rec;
      rec.type_label = t;
      rec.routing.push_back({0, 0, 0.5});
      collapsed.push_back(rec);
    }
  }
  EXPECT_DOUBLE_EQ(routing_purity(collapsed), 0.25);

  // Missing labels are an input error.
  std::vector<ExampleRecord> unlabeled(1);
  unlabeled[0].routing.push_back({0, 0, 0.5});
  EXPECT_THROW(routing_purity(unlabeled), InputError);
}

TEST(RoutingPurityTest, UniformRandomRoutingIsNearChance) {
  // Expectation of the majority fraction under uniform routing, checked by
  // simulation: with K=4 types and 4 experts it sits just above 1/K.
  Rng rng(77);
  std::vector<ExampleRecord> records;
  for (int i = 0; i < 4000; ++i) {
    ExampleRecord rec;
    rec.type_label = static_cast<int>(rng.below(4));
    rec.routing.push_back({0, static_cast<int>(rng.below(4)), 0.5});
    records.push_back(rec);
  }
  const double purity = routing_purity(records);
  EXPECT_GT(purity, 0.24);
  EXPECT_LT(purity, 0.30);
}

TEST(RoutingPurityTest, InvariantToExpertRelabeling) {
  Rng rng(78);
  std::vector<ExampleRecord> records;
  for (int i = 0; i < 500; ++i) {
    ExampleRecord rec;
    rec.type_label = static_cast<int>(rng.below(4));
    rec.routing.push_back(
        {0, static_cast<int>(rng.below(3)), 0.5});
    records.push_back(rec);
  }
  auto relabeled = records;
  const int perm[3] = {2, 0, 1};
  for (auto& rec : relabeled) rec.routing[0].selected = perm[rec.routing[0].selected];
  EXPECT_DOUBLE_EQ(routing_purity(records), routing_purity(relabeled));
}

TEST(AffinityReportTest, DegenerateDatasetAndOrderInvariance) {
  auto spec = tiny_spec();
  auto vocab = build_vocabulary(spec);
  auto ds = generate_synthetic(spec);
  Model<double> model(tiny_cfg(vocab, 3));

  std::vector<RawExample> one{ds.train[0]};
  auto rep = top_affinity_questions(model, one, vocab, 1);
  ASSERT_EQ(rep.per_expert.size(), 2u);
  for (const auto& entries : rep.per_expert) {
    ASSERT_EQ(entries.size(), 1u);
    EXPECT_EQ(entries[0].question, ds.train[0].question);
  }

  auto base = top_affinity_questions(model, ds.train, vocab, 5);
  auto shuffled = ds.train;
  Rng rng(5);
  rng.shuffle(shuffled.begin(), shuffled.end());
  auto perm = top_affinity_questions(model, shuffled, vocab, 5);
  for (size_t e = 0; e < base.per_expert.size(); ++e) {
    for (size_t r = 0; r < base.per_expert[e].size(); ++r) {
      EXPECT_EQ(base.per_expert[e][r].question, perm.per_expert[e][r].question);
      EXPECT_DOUBLE_EQ(base.per_expert[e][r].affinity,
                       perm.per_expert[e][r].affinity);
    }
  }

  EXPECT_THROW(top_affinity_questions(model, ds.train, vocab, 0), InputError);
}

TEST(AnalysisWriters, CsvAndReportFiles) {
  testing::TempDir dir("analysis");
  auto spec = tiny_spec();
  auto vocab = build_vocabulary(spec);
  auto ds = generate_synthetic(spec);
  Model<double> model(tiny_cfg(vocab, 3));

  auto sim = expert_similarity(model);
  write_similarity_csv((dir.path / "sim.csv").string(), sim);
  std::ifstream simf(dir.path / "sim.csv");
  std::string header;
  std::getline(simf, header);
  EXPECT_EQ(header, "expert,expert_1,expert_2,shared");
  std::string row;
  std::getline(simf, row);
  EXPECT_EQ(row.substr(0, 9), "expert_1,");

  auto eval = evaluate(model, ds.valid, vocab);
  auto stats = load_stats(eval.records, 2);
  write_load_stats_csv((dir.path / "load.csv").string(), stats);
  std::ifstream loadf(dir.path / "load.csv");
  std::getline(loadf, header);
  EXPECT_EQ(header, "expert,count,fraction");

  auto rep = top_affinity_questions(model, ds.valid, vocab, 3);
  write_affinity_report((dir.path / "aff.txt").string(),
                        (dir.path / "aff.jsonl").string(), rep);
  std::ifstream aff(dir.path / "aff.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(aff, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("expert"));
    EXPECT_TRUE(j.contains("affinity"));
    ++lines;
  }
  EXPECT_EQ(lines, 6);  // 2 experts x top-3
}

}  // namespace
}  // namespace moebqa
