// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "moebqa/params.hpp"
#include "moebqa/tensor.hpp"

namespace moebqa {

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  bool pass = false;
  std::vector<GradCheckEntry> per_param;
};

// Central-difference comparison. The loss closure receives a tape pointer:
// with a tape it runs the differentiable path, with nullptr it runs a plain
// forward used for the (f(x+h)-f(x-h))/2h probes. The loss must be a pure
// function of the parameter values for a fixed closure state (counter-based
// dropout satisfies this).
//
// Relative error uses |ga - gn| / max(|ga| + |gn|, 1e-3) so near-zero
// gradients do not blow up on central-difference roundoff.
template <typename LossFn>
GradCheckReport finite_diff_check(
    LossFn&& loss_fn, ParamStore<double>& params, double h, double rtol,
    const std::function<void(ParamStore<double>&)>& tamper_grads = nullptr) {
  static constexpr double kDenomFloor = 1e-3;

  // Analytic gradients from one taped pass.
  params.zero_grad();
  {
    Tape<double> tape;
    Tensor<double> loss = loss_fn(&tape);
    if (!std::isfinite(loss.item())) {
      throw NumericalError("finite_diff_check: loss is not finite");
    }
    tape.backward(loss);
  }
  if (tamper_grads) tamper_grads(params);

  auto eval = [&]() -> double {
    Tensor<double> v = loss_fn(static_cast<Tape<double>*>(nullptr));
    const double f = v.item();
    if (!std::isfinite(f)) {
      throw NumericalError("finite_diff_check: loss is not finite");
    }
    return f;
  };

  GradCheckReport report;
  for (auto& p : params.items()) {
    GradCheckEntry entry;
    entry.param = p.name;
    auto data = p.tensor.data();
    auto grad = p.tensor.grad();
    for (int64_t i = 0; i < p.tensor.numel(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double f_plus = eval();
      data[i] = orig - h;
      const double f_minus = eval();
      data[i] = orig;
      const double gn = (f_plus - f_minus) / (2.0 * h);
      const double ga = grad[i];
      const double rel =
          std::abs(ga - gn) / std::max(std::abs(ga) + std::abs(gn), kDenomFloor);
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
        entry.analytic = ga;
        entry.numeric = gn;
      }
    }
    if (entry.max_rel_err > report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst_param = entry.param;
      report.worst_index = entry.worst_index;
    }
    report.per_param.push_back(std::move(entry));
  }
  report.pass = report.max_rel_err <= rtol;
  return report;
}

}  // namespace moebqa
