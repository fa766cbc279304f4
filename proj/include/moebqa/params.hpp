// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "moebqa/rng.hpp"
#include "moebqa/tensor.hpp"

namespace moebqa {

template <typename T>
struct Parameter {
  std::string name;  // hierarchical path, e.g. "top.expert.3.0.ffn.w1"
  Tensor<T> tensor;  // requires_grad = true
};

struct Init {
  enum class Kind { kZeros, kOnes, kNormal } kind = Kind::kZeros;
  double stddev = 0.02;
  // Seed key for normal init. Structurally equivalent parameters across
  // configurations share a key (e.g. all expert copies of a top block, or a
  // block at the same depth in a dense model), so equivalent models start
  // from identical weights.
  std::string key;

  static Init zeros() { return {Kind::kZeros, 0.0, {}}; }
  static Init ones() { return {Kind::kOnes, 0.0, {}}; }
  static Init normal(std::string key, double stddev = 0.02) {
    return {Kind::kNormal, stddev, std::move(key)};
  }
};

// Owns every trainable tensor of a model, in registration order. Names are
// unique and the manifest order is stable, which checkpointing relies on.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

  Tensor<T> create(const std::string& name, Shape shape, const Init& init) {
    if (index_.contains(name)) {
      throw InternalError("duplicate parameter name: " + name);
    }
    Tensor<T> t(shape);
    switch (init.kind) {
      case Init::Kind::kZeros:
        break;
      case Init::Kind::kOnes:
        for (auto& v : t.data()) v = T(1);
        break;
      case Init::Kind::kNormal: {
        Rng rng(hash_combine(seed_, hash_str(init.key)));
        for (auto& v : t.data()) {
          v = static_cast<T>(rng.normal() * init.stddev);
        }
        break;
      }
    }
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.push_back({name, t});
    return t;
  }

  [[nodiscard]] bool has(const std::string& name) const {
    return index_.contains(name);
  }
  [[nodiscard]] Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InternalError("unknown parameter: " + name);
    return items_[it->second].tensor;
  }

  [[nodiscard]] const std::vector<Parameter<T>>& items() const { return items_; }
  [[nodiscard]] size_t size() const { return items_.size(); }
  [[nodiscard]] int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) {
      p.tensor.ensure_grad();
      p.tensor.zero_grad();
    }
  }

  [[nodiscard]] uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::vector<Parameter<T>> items_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace moebqa
