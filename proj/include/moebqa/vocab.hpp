// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "moebqa/error.hpp"
#include "moebqa/rng.hpp"

namespace moebqa {

// Closed whitespace-token vocabulary. File format: one token per line,
// id = line number; the first four lines are [PAD], [UNK], [CLS], [SEP].
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;

  static Vocabulary with_specials() {
    Vocabulary v;
    v.add("[PAD]");
    v.add("[UNK]");
    v.add("[CLS]");
    v.add("[SEP]");
    return v;
  }

  int add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_[token] = id;
    return id;
  }

  [[nodiscard]] int id_or_unk(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  [[nodiscard]] const std::string& token(int id) const {
    if (id < 0 || id >= size()) {
      throw InputError("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<size_t>(id)];
  }

  [[nodiscard]] int size() const { return static_cast<int>(tokens_.size()); }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write vocabulary file " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read vocabulary file " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      v.add(line);
    }
    static const char* kSpecials[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    if (v.size() < 4) {
      throw ValidationError("vocabulary file " + path +
                            " is missing the reserved special tokens");
    }
    for (int i = 0; i < 4; ++i) {
      if (v.tokens_[static_cast<size_t>(i)] != kSpecials[i]) {
        throw ValidationError("vocabulary file " + path + " line " +
                              std::to_string(i) + " must be " + kSpecials[i]);
      }
    }
    return v;
  }

  // Order-sensitive content hash; stored in checkpoints to detect evaluating
  // with the wrong vocabulary.
  [[nodiscard]] uint64_t checksum() const {
    uint64_t h = 0x9ae16a3b2f90404fULL;
    for (const auto& t : tokens_) h = hash_combine(h, hash_str(t));
    return h;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

inline std::vector<std::string> split_lower(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

// Lowercase, whitespace-split, map to ids; unknown words become [UNK].
inline std::vector<int> tokenize(const Vocabulary& vocab, std::string_view text) {
  std::vector<int> ids;
  for (const auto& w : split_lower(text)) ids.push_back(vocab.id_or_unk(w));
  return ids;
}

}  // namespace moebqa
