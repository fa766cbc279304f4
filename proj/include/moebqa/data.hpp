// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moebqa/error.hpp"
#include "moebqa/rng.hpp"
#include "moebqa/vocab.hpp"

namespace moebqa {

struct RawExample {
  std::string context;  // possibly empty
  std::string question;
  std::vector<std::string> options;
  int answer = 0;
  int type_label = -1;  // synthetic only; never visible to the model

  void validate(const std::string& where = "example") const {
    if (options.size() < 2 || options.size() > 5) {
      throw ValidationError(where + ": option count " +
                            std::to_string(options.size()) +
                            " outside [2,5]");
    }
    if (answer < 0 || answer >= static_cast<int>(options.size())) {
      throw ValidationError(where + ": answer index " +
                            std::to_string(answer) + " out of range for " +
                            std::to_string(options.size()) + " options");
    }
    if (split_lower(question).empty()) {
      throw ValidationError(where + ": question is empty");
    }
  }
};

// One tokenized "[CLS] C Q [SEP] O_i [SEP]" sequence with the question span
// recorded as [q_start, q_end).
struct EncodedInput {
  std::vector<int> token_ids;
  std::vector<int> segment_ids;          // 0 through the first [SEP], then 1
  std::vector<uint8_t> attention_mask;   // 1 = real token, 0 = padding
  int64_t q_start = 0;
  int64_t q_end = 0;

  [[nodiscard]] int64_t length() const {
    return static_cast<int64_t>(token_ids.size());
  }
};

// Concatenates per the multiple-choice template. When the sequence would
// exceed max_len, context tokens are dropped from the left first, then
// question tokens from the right; option and special tokens are never cut.
inline EncodedInput assemble_input(const Vocabulary& vocab,
                                   const RawExample& example,
                                   int option_index, int64_t max_len) {
  if (option_index < 0 ||
      option_index >= static_cast<int>(example.options.size())) {
    throw InputError("option index " + std::to_string(option_index) +
                     " out of range");
  }
  std::vector<int> ctx = tokenize(vocab, example.context);
  std::vector<int> qst = tokenize(vocab, example.question);
  std::vector<int> opt =
      tokenize(vocab, example.options[static_cast<size_t>(option_index)]);
  if (qst.empty()) throw SpanError("question tokenizes to nothing");
  const int64_t opt_len = static_cast<int64_t>(opt.size());
  if (opt_len > max_len - 4) {
    throw InputError("option of " + std::to_string(opt_len) +
                     " tokens exceeds max_len-4 = " +
                     std::to_string(max_len - 4));
  }

  const int64_t budget = max_len - 3 - opt_len;  // room for C + Q
  int64_t q_len = static_cast<int64_t>(qst.size());
  int64_t c_len = static_cast<int64_t>(ctx.size());
  if (c_len + q_len > budget) {
    c_len = std::max<int64_t>(0, budget - q_len);
    if (c_len + q_len > budget) q_len = budget;  // c_len == 0 here
  }
  const int64_t c_drop = static_cast<int64_t>(ctx.size()) - c_len;

  EncodedInput enc;
  enc.token_ids.push_back(Vocabulary::kCls);
  enc.token_ids.insert(enc.token_ids.end(), ctx.begin() + c_drop, ctx.end());
  enc.q_start = static_cast<int64_t>(enc.token_ids.size());
  enc.token_ids.insert(enc.token_ids.end(), qst.begin(), qst.begin() + q_len);
  enc.q_end = static_cast<int64_t>(enc.token_ids.size());
  enc.token_ids.push_back(Vocabulary::kSep);
  enc.token_ids.insert(enc.token_ids.end(), opt.begin(), opt.end());
  enc.token_ids.push_back(Vocabulary::kSep);

  const size_t total = enc.token_ids.size();
  enc.segment_ids.assign(total, 1);
  for (int64_t i = 0; i <= enc.q_end; ++i) enc.segment_ids[static_cast<size_t>(i)] = 0;
  enc.attention_mask.assign(total, 1);
  return enc;
}

// ---------------------------------------------------------------------------
// Synthetic multi-type QA.
//
// Contexts are key-value logs ("k3 v7 k1 v2 ..."). Four rule families, each
// with its own trigger phrasing so the question span carries a learnable
// routing signal:
//   type 0  value lookup by key
//   type 1  reverse lookup: key holding a value
//   type 2  last value written
//   type 3  key presence (yes/no plus filler options)
// ---------------------------------------------------------------------------

struct SynthSpec {
  int num_types = 4;    // K
  int num_keys = 16;
  int num_values = 16;
  int pairs_min = 4;
  int pairs_max = 7;
  int num_options = 4;  // n
  int train_size = 4000;
  int valid_size = 500;
  int test_size = 500;
  uint64_t seed = 1;

  void validate() const {
    if (num_types < 1 || num_types > 4) {
      throw ConfigError("num_types must be in [1,4], got " +
                        std::to_string(num_types));
    }
    if (num_options < 2 || num_options > 5) {
      throw ConfigError("num_options must be in [2,5], got " +
                        std::to_string(num_options));
    }
    if (pairs_min < num_options) {
      throw ConfigError(
          "pairs_min must be >= num_options so distractors exist in context");
    }
    if (pairs_min > pairs_max) throw ConfigError("pairs_min > pairs_max");
    if (num_keys <= pairs_max || num_values < pairs_max) {
      throw ConfigError(
          "num_keys must exceed pairs_max (absent-key questions) and "
          "num_values must cover pairs_max distinct values");
    }
    if (train_size < 0 || valid_size < 0 || test_size < 0 ||
        train_size + valid_size + test_size == 0) {
      throw ConfigError("split sizes must be non-negative and sum positive");
    }
  }
};

namespace synth_detail {

inline const std::vector<std::string>& answer_words() {
  static const std::vector<std::string> words = {"yes", "no", "maybe",
                                                 "unknown", "never"};
  return words;
}

inline const std::vector<std::string>& template_words() {
  static const std::vector<std::string> words = {
      "what", "value", "does", "key",     "hold", "which", "stores",
      "is",   "the",   "last", "written", "present", "in", "log", "?"};
  return words;
}

inline std::vector<int> sample_distinct(Rng& rng, int pool, int count) {
  std::vector<int> idx(static_cast<size_t>(pool));
  for (int i = 0; i < pool; ++i) idx[static_cast<size_t>(i)] = i;
  for (int i = 0; i < count; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<uint64_t>(pool - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(count));
  return idx;
}

}  // namespace synth_detail

inline Vocabulary build_vocabulary(const SynthSpec& spec) {
  spec.validate();
  Vocabulary v = Vocabulary::with_specials();
  for (const auto& w : synth_detail::template_words()) v.add(w);
  for (const auto& w : synth_detail::answer_words()) v.add(w);
  for (int k = 0; k < spec.num_keys; ++k) v.add("k" + std::to_string(k));
  for (int k = 0; k < spec.num_values; ++k) v.add("v" + std::to_string(k));
  return v;
}

// Deterministic from (spec.seed, index); callers may generate examples in
// parallel because each index derives its own stream.
inline RawExample synth_example(const SynthSpec& spec, int64_t index) {
  Rng rng(hash_combine(spec.seed, static_cast<uint64_t>(index)));
  const int type = static_cast<int>(index % spec.num_types);
  const int npairs =
      spec.pairs_min +
      static_cast<int>(rng.below(
          static_cast<uint64_t>(spec.pairs_max - spec.pairs_min + 1)));

  const auto keys = synth_detail::sample_distinct(rng, spec.num_keys, npairs);
  const auto values =
      synth_detail::sample_distinct(rng, spec.num_values, npairs);

  RawExample ex;
  ex.type_label = type;
  for (int i = 0; i < npairs; ++i) {
    if (i) ex.context += ' ';
    ex.context += 'k' + std::to_string(keys[static_cast<size_t>(i)]);
    ex.context += ' ';
    ex.context += 'v' + std::to_string(values[static_cast<size_t>(i)]);
  }

  std::string correct;
  std::vector<std::string> distractor_pool;
  switch (type) {
    case 0: {
      const int p = static_cast<int>(rng.below(static_cast<uint64_t>(npairs)));
      ex.question = "what value does key k" +
                    std::to_string(keys[static_cast<size_t>(p)]) + " hold ?";
      correct = 'v' + std::to_string(values[static_cast<size_t>(p)]);
      for (int i = 0; i < npairs; ++i) {
        if (i != p) {
          distractor_pool.push_back(
              'v' + std::to_string(values[static_cast<size_t>(i)]));
        }
      }
      break;
    }
    case 1: {
      const int p = static_cast<int>(rng.below(static_cast<uint64_t>(npairs)));
      ex.question = "which key stores value v" +
                    std::to_string(values[static_cast<size_t>(p)]) + " ?";
      correct = 'k' + std::to_string(keys[static_cast<size_t>(p)]);
      for (int i = 0; i < npairs; ++i) {
        if (i != p) {
          distractor_pool.push_back(
              'k' + std::to_string(keys[static_cast<size_t>(i)]));
        }
      }
      break;
    }
    case 2: {
      ex.question = "what is the last value written ?";
      correct = 'v' + std::to_string(values[static_cast<size_t>(npairs - 1)]);
      for (int i = 0; i + 1 < npairs; ++i) {
        distractor_pool.push_back(
            'v' + std::to_string(values[static_cast<size_t>(i)]));
      }
      break;
    }
    default: {  // type 3
      const bool present = rng.below(2) == 0;
      int key_id;
      if (present) {
        key_id = keys[rng.below(static_cast<uint64_t>(npairs))];
      } else {
        do {
          key_id = static_cast<int>(rng.below(static_cast<uint64_t>(spec.num_keys)));
        } while (std::find(keys.begin(), keys.end(), key_id) != keys.end());
      }
      ex.question = "is key k" + std::to_string(key_id) + " present in the log ?";
      correct = present ? "yes" : "no";
      // The complement of yes/no lands at pool index 0, so it always
      // survives into the option set.
      for (const auto& w : synth_detail::answer_words()) {
        if (w != correct) distractor_pool.push_back(w);
      }
      break;
    }
  }

  const int n = spec.num_options;
  ex.options.assign(1, correct);
  if (type == 3) {
    for (int i = 0; i + 1 < n; ++i) ex.options.push_back(distractor_pool[static_cast<size_t>(i)]);
  } else {
    auto picks = synth_detail::sample_distinct(
        rng, static_cast<int>(distractor_pool.size()), n - 1);
    for (int i : picks) ex.options.push_back(distractor_pool[static_cast<size_t>(i)]);
  }
  // Uniformly random answer position.
  rng.shuffle(ex.options.begin(), ex.options.end());
  for (int i = 0; i < n; ++i) {
    if (ex.options[static_cast<size_t>(i)] == correct) {
      ex.answer = i;
      break;
    }
  }
  return ex;
}

struct SynthDataset {
  std::vector<RawExample> train;
  std::vector<RawExample> valid;
  std::vector<RawExample> test;
};

inline SynthDataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  SynthDataset ds;
  int64_t index = 0;
  auto fill = [&](std::vector<RawExample>& out, int size) {
    out.reserve(static_cast<size_t>(size));
    for (int i = 0; i < size; ++i) out.push_back(synth_example(spec, index++));
  };
  fill(ds.train, spec.train_size);
  fill(ds.valid, spec.valid_size);
  fill(ds.test, spec.test_size);
  return ds;
}

// ---------------------------------------------------------------------------
// Line-delimited record files: one JSON object per line with keys "context",
// "question", "options", "answer" and optionally "type_label".
// ---------------------------------------------------------------------------

inline void save_records(const std::string& path,
                         const std::vector<RawExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write record file " + path);
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["context"] = ex.context;
    j["question"] = ex.question;
    j["options"] = ex.options;
    j["answer"] = ex.answer;
    if (ex.type_label >= 0) j["type_label"] = ex.type_label;
    out << j.dump() << '\n';
  }
}

inline std::vector<RawExample> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read record file " + path);
  std::vector<RawExample> examples;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": malformed record: " + e.what());
    }
    RawExample ex;
    try {
      ex.context = j.value("context", std::string{});
      ex.question = j.at("question").get<std::string>();
      ex.options = j.at("options").get<std::vector<std::string>>();
      ex.answer = j.at("answer").get<int>();
      ex.type_label = j.value("type_label", -1);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": missing or mistyped field: " + e.what());
    }
    try {
      ex.validate("line " + std::to_string(line_no));
    } catch (const ValidationError& e) {
      throw ValidationError(path + ":" + e.what());
    }
    examples.push_back(std::move(ex));
  }
  return examples;
}

}  // namespace moebqa
