// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "moebqa/model.hpp"
#include "moebqa/train.hpp"

namespace moebqa {

// m x m normalized cosine similarities between flattened expert parameter
// vectors, unshared experts first, the shared expert last. Normalization is
// the affine map (cos + 1) / 2 into [0,1]; the diagonal is exactly 1.
struct SimilarityMatrix {
  std::vector<std::vector<double>> values;

  [[nodiscard]] int size() const { return static_cast<int>(values.size()); }
};

namespace analysis_detail {

// Parameter suffixes in canonical (lexicographic) order, so every expert
// flattens identically.
template <typename T>
std::vector<std::vector<double>> flatten_experts(const Model<T>& model) {
  if (!model.has_experts()) {
    throw InputError("expert similarity requires an MoE model (m >= 2, L_t >= 1)");
  }
  const int m = model.config().num_experts;
  std::vector<std::map<std::string, const Parameter<T>*>> by_suffix(
      static_cast<size_t>(m));
  for (const auto& p : model.params().items()) {
    for (int e = 0; e + 1 < m; ++e) {
      const std::string prefix = "top.expert." + std::to_string(e) + ".";
      if (p.name.starts_with(prefix)) {
        by_suffix[static_cast<size_t>(e)][p.name.substr(prefix.size())] = &p;
      }
    }
    if (p.name.starts_with("top.shared.")) {
      by_suffix[static_cast<size_t>(m - 1)]
               [p.name.substr(std::string("top.shared.").size())] = &p;
    }
  }
  // Unshared stacks are named "<e>.<block>.<sub>", the shared one
  // "<block>.<sub>"; both sort to the same per-stack order.
  std::vector<std::vector<double>> flat(static_cast<size_t>(m));
  size_t expected = by_suffix[0].size();
  for (int e = 0; e < m; ++e) {
    if (by_suffix[static_cast<size_t>(e)].size() != expected) {
      throw InternalError("expert parameter manifests disagree");
    }
    for (const auto& [suffix, p] : by_suffix[static_cast<size_t>(e)]) {
      for (T v : p->tensor.data()) {
        flat[static_cast<size_t>(e)].push_back(static_cast<double>(v));
      }
    }
  }
  for (int e = 1; e < m; ++e) {
    if (flat[static_cast<size_t>(e)].size() != flat[0].size()) {
      throw InternalError("expert parameter manifests disagree in size");
    }
  }
  return flat;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace analysis_detail

template <typename T>
SimilarityMatrix expert_similarity(const Model<T>& model) {
  auto flat = analysis_detail::flatten_experts(model);
  const int m = static_cast<int>(flat.size());
  SimilarityMatrix sim;
  sim.values.assign(static_cast<size_t>(m),
                    std::vector<double>(static_cast<size_t>(m), 1.0));
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      double c = analysis_detail::cosine(flat[static_cast<size_t>(i)],
                                         flat[static_cast<size_t>(j)]);
      c = std::clamp(c, -1.0, 1.0);
      const double v = (c + 1.0) / 2.0;
      sim.values[static_cast<size_t>(i)][static_cast<size_t>(j)] = v;
      sim.values[static_cast<size_t>(j)][static_cast<size_t>(i)] = v;
    }
  }
  return sim;
}

struct AffinityEntry {
  std::string question;
  double affinity = 0.0;
  int type_label = -1;
};

struct AffinityReport {
  std::vector<std::vector<AffinityEntry>> per_expert;  // sorted descending
};

// For every example, pool one question representation (averaging the
// option-level features, as in per-example routing) and score it against
// each centroid; report each unshared expert's k highest-affinity questions.
template <typename T>
AffinityReport top_affinity_questions(const Model<T>& model,
                                      const std::vector<RawExample>& dataset,
                                      const Vocabulary& vocab, int k) {
  if (k <= 0) throw InputError("top_affinity_questions needs k >= 1");
  if (!model.has_experts()) {
    throw InputError("affinity report requires an MoE model");
  }
  if (dataset.empty()) throw InputError("affinity report needs examples");
  k = std::min<int>(k, static_cast<int>(dataset.size()));

  const int m1 = model.config().num_experts - 1;
  std::vector<std::vector<AffinityEntry>> all(static_cast<size_t>(m1));
  for (const auto& ex : dataset) {
    ForwardCtx<T> ctx;
    Tensor<T> acc;
    const int n = static_cast<int>(ex.options.size());
    for (int i = 0; i < n; ++i) {
      auto enc = assemble_input(vocab, ex, i, model.config().encoder.max_len);
      auto h_prime = model.encode_option(ctx, enc);
      auto feat = model.routing_feature(ctx, h_prime, enc);
      acc = i == 0 ? feat : add(ctx.tape, acc, feat);
    }
    auto h_q = scale(ctx.tape, acc, 1.0 / n);
    auto s = affinities(ctx, h_q, model.experts().centroids);
    for (int e = 0; e < m1; ++e) {
      all[static_cast<size_t>(e)].push_back(
          {ex.question, static_cast<double>(s.at(e)), ex.type_label});
    }
  }
  AffinityReport report;
  for (auto& entries : all) {
    std::sort(entries.begin(), entries.end(),
              [](const AffinityEntry& a, const AffinityEntry& b) {
                if (a.affinity != b.affinity) return a.affinity > b.affinity;
                return a.question < b.question;
              });
    entries.resize(static_cast<size_t>(k));
    report.per_expert.push_back(std::move(entries));
  }
  return report;
}

struct LoadStats {
  std::vector<int64_t> counts;
  std::vector<double> fractions;
  double max_uniform_ratio = 0.0;
};

// Empirical assignment distribution over unshared experts from routing
// records, plus the ratio of the heaviest load to the uniform share.
inline LoadStats load_stats(const std::vector<ExampleRecord>& records,
                            int num_unshared) {
  if (records.empty()) throw InputError("load_stats needs at least one record");
  if (num_unshared < 1) throw InputError("load_stats needs at least one expert");
  LoadStats stats;
  stats.counts.assign(static_cast<size_t>(num_unshared), 0);
  int64_t total = 0;
  for (const auto& rec : records) {
    for (const auto& r : rec.routing) {
      if (r.selected < 0 || r.selected >= num_unshared) {
        throw InputError("routing record selects expert " +
                         std::to_string(r.selected) + " of " +
                         std::to_string(num_unshared));
      }
      stats.counts[static_cast<size_t>(r.selected)] += 1;
      total += 1;
    }
  }
  if (total == 0) throw InputError("no routing entries in records");
  double max_frac = 0.0;
  for (int64_t c : stats.counts) {
    const double f = static_cast<double>(c) / static_cast<double>(total);
    stats.fractions.push_back(f);
    max_frac = std::max(max_frac, f);
  }
  stats.max_uniform_ratio = max_frac * static_cast<double>(num_unshared);
  return stats;
}

// Fraction of routed inputs whose latent type matches their expert's
// majority type.
inline double routing_purity(const std::vector<ExampleRecord>& records) {
  std::map<int, std::map<int, int64_t>> per_expert_type;
  int64_t total = 0;
  for (const auto& rec : records) {
    for (const auto& r : rec.routing) {
      if (rec.type_label < 0) {
        throw InputError("routing_purity requires type labels on every record");
      }
      per_expert_type[r.selected][rec.type_label] += 1;
      total += 1;
    }
  }
  if (total == 0) throw InputError("routing_purity needs routed records");
  int64_t majority_sum = 0;
  for (const auto& [expert, types] : per_expert_type) {
    int64_t best = 0;
    for (const auto& [type, count] : types) best = std::max(best, count);
    majority_sum += best;
  }
  return static_cast<double>(majority_sum) / static_cast<double>(total);
}

inline void write_similarity_csv(const std::string& path,
                                 const SimilarityMatrix& sim) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  const int m = sim.size();
  out << "expert";
  for (int j = 0; j < m; ++j) {
    out << ',' << (j == m - 1 ? "shared" : "expert_" + std::to_string(j + 1));
  }
  out << '\n';
  for (int i = 0; i < m; ++i) {
    out << (i == m - 1 ? "shared" : "expert_" + std::to_string(i + 1));
    char buf[32];
    for (int j = 0; j < m; ++j) {
      std::snprintf(buf, sizeof(buf), "%.6f",
                    sim.values[static_cast<size_t>(i)][static_cast<size_t>(j)]);
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline void write_load_stats_csv(const std::string& path, const LoadStats& stats) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out << "expert,count,fraction\n";
  char buf[32];
  for (size_t i = 0; i < stats.counts.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.6f", stats.fractions[i]);
    out << "expert_" << (i + 1) << ',' << stats.counts[i] << ',' << buf << '\n';
  }
}

inline void write_affinity_report(const std::string& txt_path,
                                  const std::string& jsonl_path,
                                  const AffinityReport& report) {
  std::ofstream txt(txt_path, std::ios::trunc);
  std::ofstream jsonl(jsonl_path, std::ios::trunc);
  if (!txt || !jsonl) {
    throw InputError("cannot write affinity report to " + txt_path);
  }
  for (size_t e = 0; e < report.per_expert.size(); ++e) {
    txt << "expert " << (e + 1) << "\n";
    for (size_t r = 0; r < report.per_expert[e].size(); ++r) {
      const auto& entry = report.per_expert[e][r];
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%+.4f", entry.affinity);
      txt << "  " << buf << "  " << entry.question;
      if (entry.type_label >= 0) txt << "  (type " << entry.type_label << ")";
      txt << "\n";
      nlohmann::json j{{"expert", e},
                       {"rank", r},
                       {"affinity", entry.affinity},
                       {"question", entry.question}};
      if (entry.type_label >= 0) j["type_label"] = entry.type_label;
      jsonl << j.dump() << '\n';
    }
    txt << "\n";
  }
}

}  // namespace moebqa
