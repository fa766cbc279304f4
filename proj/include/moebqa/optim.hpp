// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "moebqa/params.hpp"

namespace moebqa {

// Linear warmup to max_lr over warmup_ratio * total_steps, then linear decay
// to zero at total_steps. step counts optimizer steps, 0-based.
inline double lr_at(int64_t step, int64_t total_steps, double warmup_ratio,
                    double max_lr) {
  if (total_steps <= 0) {
    throw ConfigError("lr schedule needs total_steps > 0");
  }
  if (step < 0 || step > total_steps) {
    throw ConfigError("lr schedule step " + std::to_string(step) +
                      " outside [0," + std::to_string(total_steps) + "]");
  }
  const double wu = warmup_ratio * static_cast<double>(total_steps);
  if (static_cast<double>(step) < wu) {
    return max_lr * static_cast<double>(step) / wu;
  }
  return max_lr * static_cast<double>(total_steps - step) /
         (static_cast<double>(total_steps) - wu);
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay Adam. Moments are stored per parameter in the model
// precision; the bias-corrected scalar math runs in double.
template <typename T>
class AdamW {
 public:
  AdamW(const ParamStore<T>& params, AdamWOptions opts = {})
      : opts_(opts) {
    slots_.reserve(params.size());
    for (const auto& p : params.items()) {
      slots_.push_back({std::vector<T>(static_cast<size_t>(p.tensor.numel()), T(0)),
                        std::vector<T>(static_cast<size_t>(p.tensor.numel()), T(0))});
    }
  }

  void step(ParamStore<T>& params, double lr) {
    step_count_ += 1;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_count_));
    for (size_t pi = 0; pi < params.items().size(); ++pi) {
      const auto& p = params.items()[pi];
      auto theta = p.tensor.data();
      auto grad = p.tensor.grad();
      auto& m = slots_[pi].m;
      auto& v = slots_[pi].v;
      for (size_t i = 0; i < m.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        if (!std::isfinite(g)) {
          throw NumericalError("non-finite gradient in parameter " + p.name);
        }
        const double mi = opts_.beta1 * static_cast<double>(m[i]) +
                          (1.0 - opts_.beta1) * g;
        const double vi = opts_.beta2 * static_cast<double>(v[i]) +
                          (1.0 - opts_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update =
            (mi / bc1) / (std::sqrt(vi / bc2) + opts_.eps) +
            opts_.weight_decay * static_cast<double>(theta[i]);
        theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * update);
      }
    }
  }

  void zero_grad(ParamStore<T>& params) { params.zero_grad(); }

  [[nodiscard]] int64_t step_count() const { return step_count_; }
  void set_step_count(int64_t s) { step_count_ = s; }
  [[nodiscard]] const AdamWOptions& options() const { return opts_; }

  [[nodiscard]] std::vector<T>& moment1(size_t i) { return slots_[i].m; }
  [[nodiscard]] std::vector<T>& moment2(size_t i) { return slots_[i].v; }
  [[nodiscard]] const std::vector<T>& moment1(size_t i) const { return slots_[i].m; }
  [[nodiscard]] const std::vector<T>& moment2(size_t i) const { return slots_[i].v; }
  [[nodiscard]] size_t num_slots() const { return slots_.size(); }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  AdamWOptions opts_;
  std::vector<Slot> slots_;
  int64_t step_count_ = 0;
};

}  // namespace moebqa
