// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "moebqa/data.hpp"
#include "moebqa/error.hpp"

namespace moebqa {

struct EncoderConfig {
  int vocab_size = 0;  // resolved from the vocabulary file
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int num_bottom = 3;  // shared bottom blocks
  int num_top = 1;     // per-expert top blocks
  int max_len = 64;
  int n_segments = 2;
  double dropout_p = 0.1;

  [[nodiscard]] int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 5) {
      throw ConfigError("vocab_size must cover the specials, got " +
                        std::to_string(vocab_size));
    }
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " must be positive and divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (d_ff <= 0) throw ConfigError("d_ff must be positive");
    if (num_bottom < 1) throw ConfigError("L_b must be >= 1");
    if (num_top < 0) throw ConfigError("L_t must be >= 0");
    if (max_len < 4) throw ConfigError("max_len must be >= 4");
    if (n_segments != 2) throw ConfigError("n_segments is fixed to 2");
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
      throw ConfigError("dropout_p must be in [0,1)");
    }
  }
};

struct AblationFlags {
  bool no_balance_loss = false;
  bool constant_gate_half = false;  // "w/o gate signal"
  bool no_shared_expert = false;
  bool route_by_cls = false;
  bool route_per_example = false;
};

struct DataPaths {
  std::string train;
  std::string valid;
  std::string test;
  std::string vocab;
};

struct TrainConfig {
  EncoderConfig encoder;
  int num_experts = 5;  // m: 1 shared + m-1 unshared; 1 means dense
  double beta = 0.01;
  double lr = 3e-4;
  int batch_size = 8;
  int grad_accum = 1;
  int epochs = 3;
  double warmup_ratio = 0.1;
  uint64_t seed = 1;
  std::string precision = "f32";  // fixed per process run; f64 for gradcheck
  bool pooler = false;            // CLS pooling is the default head
  int log_every = 10;
  AblationFlags ablations;
  std::string preset;
  DataPaths data;

  void validate() const {
    encoder.validate();
    if (num_experts < 1) throw ConfigError("num_experts must be >= 1");
    if (beta < 0.0) throw ConfigError("beta must be >= 0");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (grad_accum < 1) throw ConfigError("grad_accum must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
      throw ConfigError("warmup_ratio must be in [0,1)");
    }
    if (precision != "f32" && precision != "f64") {
      throw ConfigError("precision must be f32 or f64, got " + precision);
    }
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
  }
};

namespace cfg_detail {

inline void check_keys(const nlohmann::json& j,
                       const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ParseError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.contains(it.key())) {
      throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
    }
  }
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace cfg_detail

// Keys present in the JSON override the current values; unknown keys are
// rejected so typos never silently fall back to defaults.
inline void apply_json(EncoderConfig& c, const nlohmann::json& j) {
  cfg_detail::check_keys(j,
                         {"vocab_size", "d_model", "n_heads", "d_ff", "L_b",
                          "L_t", "max_len", "dropout_p"},
                         "encoder");
  cfg_detail::maybe(j, "vocab_size", c.vocab_size);
  cfg_detail::maybe(j, "d_model", c.d_model);
  cfg_detail::maybe(j, "n_heads", c.n_heads);
  cfg_detail::maybe(j, "d_ff", c.d_ff);
  cfg_detail::maybe(j, "L_b", c.num_bottom);
  cfg_detail::maybe(j, "L_t", c.num_top);
  cfg_detail::maybe(j, "max_len", c.max_len);
  cfg_detail::maybe(j, "dropout_p", c.dropout_p);
}

inline void apply_json(AblationFlags& a, const nlohmann::json& j) {
  cfg_detail::check_keys(j,
                         {"no_balance_loss", "constant_gate_half",
                          "no_shared_expert", "route_by_cls",
                          "route_per_example"},
                         "ablations");
  cfg_detail::maybe(j, "no_balance_loss", a.no_balance_loss);
  cfg_detail::maybe(j, "constant_gate_half", a.constant_gate_half);
  cfg_detail::maybe(j, "no_shared_expert", a.no_shared_expert);
  cfg_detail::maybe(j, "route_by_cls", a.route_by_cls);
  cfg_detail::maybe(j, "route_per_example", a.route_per_example);
}

inline void apply_json(DataPaths& d, const nlohmann::json& j) {
  cfg_detail::check_keys(j, {"train", "valid", "test", "vocab"}, "data");
  cfg_detail::maybe(j, "train", d.train);
  cfg_detail::maybe(j, "valid", d.valid);
  cfg_detail::maybe(j, "test", d.test);
  cfg_detail::maybe(j, "vocab", d.vocab);
}

inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
  cfg_detail::check_keys(
      j, {"encoder", "num_experts", "beta", "lr", "batch_size", "grad_accum",
          "epochs", "warmup_ratio", "seed", "precision", "pooler",
          "log_every", "ablations", "preset", "data"},
      "config");
  if (j.contains("encoder")) apply_json(c.encoder, j.at("encoder"));
  cfg_detail::maybe(j, "num_experts", c.num_experts);
  cfg_detail::maybe(j, "beta", c.beta);
  cfg_detail::maybe(j, "lr", c.lr);
  cfg_detail::maybe(j, "batch_size", c.batch_size);
  cfg_detail::maybe(j, "grad_accum", c.grad_accum);
  cfg_detail::maybe(j, "epochs", c.epochs);
  cfg_detail::maybe(j, "warmup_ratio", c.warmup_ratio);
  cfg_detail::maybe(j, "seed", c.seed);
  cfg_detail::maybe(j, "precision", c.precision);
  cfg_detail::maybe(j, "pooler", c.pooler);
  cfg_detail::maybe(j, "log_every", c.log_every);
  if (j.contains("ablations")) apply_json(c.ablations, j.at("ablations"));
  cfg_detail::maybe(j, "preset", c.preset);
  if (j.contains("data")) apply_json(c.data, j.at("data"));
}

inline void apply_json(SynthSpec& s, const nlohmann::json& j) {
  cfg_detail::check_keys(j,
                         {"num_types", "num_keys", "num_values", "pairs_min",
                          "pairs_max", "num_options", "train_size",
                          "valid_size", "test_size", "seed"},
                         "synth spec");
  cfg_detail::maybe(j, "num_types", s.num_types);
  cfg_detail::maybe(j, "num_keys", s.num_keys);
  cfg_detail::maybe(j, "num_values", s.num_values);
  cfg_detail::maybe(j, "pairs_min", s.pairs_min);
  cfg_detail::maybe(j, "pairs_max", s.pairs_max);
  cfg_detail::maybe(j, "num_options", s.num_options);
  cfg_detail::maybe(j, "train_size", s.train_size);
  cfg_detail::maybe(j, "valid_size", s.valid_size);
  cfg_detail::maybe(j, "test_size", s.test_size);
  cfg_detail::maybe(j, "seed", s.seed);
}

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},   {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},         {"L_b", c.num_bottom},
          {"L_t", c.num_top},       {"max_len", c.max_len},
          {"dropout_p", c.dropout_p}};
}

inline nlohmann::json to_json(const AblationFlags& a) {
  return {{"no_balance_loss", a.no_balance_loss},
          {"constant_gate_half", a.constant_gate_half},
          {"no_shared_expert", a.no_shared_expert},
          {"route_by_cls", a.route_by_cls},
          {"route_per_example", a.route_per_example}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"encoder", to_json(c.encoder)},
          {"num_experts", c.num_experts},
          {"beta", c.beta},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"grad_accum", c.grad_accum},
          {"epochs", c.epochs},
          {"warmup_ratio", c.warmup_ratio},
          {"seed", c.seed},
          {"precision", c.precision},
          {"pooler", c.pooler},
          {"log_every", c.log_every},
          {"ablations", to_json(c.ablations)},
          {"preset", c.preset},
          {"data",
           {{"train", c.data.train},
            {"valid", c.data.valid},
            {"test", c.data.test},
            {"vocab", c.data.vocab}}}};
}

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"num_types", s.num_types},   {"num_keys", s.num_keys},
          {"num_values", s.num_values}, {"pairs_min", s.pairs_min},
          {"pairs_max", s.pairs_max},   {"num_options", s.num_options},
          {"train_size", s.train_size}, {"valid_size", s.valid_size},
          {"test_size", s.test_size},   {"seed", s.seed}};
}

inline nlohmann::json load_json_file(const std::string& path,
                                     const std::string& what) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + what + " file " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// Named configuration presets. medqa/headqa/nlpec carry the published
// hyper-parameters on their BERT-base / RoBERTa-large sized backbones; desk
// is a deliberately small configuration for CPU-scale experiments and CI.
inline TrainConfig make_preset(const std::string& name) {
  TrainConfig c;
  c.preset = name;
  if (name == "medqa") {
    c.encoder = {0, 768, 12, 3072, 10, 2, 512, 2, 0.1};
    c.num_experts = 5;
    c.beta = 0.01;
    c.lr = 3e-5;
    c.batch_size = 8;
    c.grad_accum = 2;
    c.epochs = 5;
    c.warmup_ratio = 0.1;
  } else if (name == "headqa") {
    c.encoder = {0, 768, 12, 3072, 10, 2, 512, 2, 0.1};
    c.num_experts = 3;
    c.beta = 0.003;
    c.lr = 5e-5;
    c.batch_size = 8;
    c.grad_accum = 1;
    c.epochs = 2;
    c.warmup_ratio = 0.1;
  } else if (name == "nlpec") {
    c.encoder = {0, 1024, 16, 4096, 20, 4, 512, 2, 0.1};
    c.num_experts = 5;
    c.beta = 0.001;
    c.lr = 2e-5;
    c.batch_size = 8;
    c.grad_accum = 2;
    c.epochs = 35;
    c.warmup_ratio = 0.1;
  } else if (name == "desk") {
    c.encoder = {0, 64, 4, 256, 3, 1, 64, 2, 0.0};
    c.num_experts = 5;
    c.beta = 0.01;
    c.lr = 3e-4;
    c.batch_size = 8;
    c.grad_accum = 1;
    c.epochs = 3;
    c.warmup_ratio = 0.1;
  } else {
    throw ConfigError("unknown preset \"" + name +
                      "\" (known: medqa, headqa, nlpec, desk)");
  }
  return c;
}

}  // namespace moebqa
