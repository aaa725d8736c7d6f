// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace cotr_moe {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& options) {
  PrecisionScope wide(Precision::wide);

  std::vector<Tensor> tensors;
  std::vector<bool> previous_flags;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    previous_flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
    tensors.push_back(t);
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  for (auto& t : tensors) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  auto evaluate = [&]() {
    const double v = loss_fn().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss at a perturbed point");
    return v;
  };

  GradCheckReport report;
  for (std::size_t p = 0; p < tensors.size(); ++p) {
    GradCheckEntry entry;
    entry.name = params[p].name;
    entry.size = tensors[p].numel();
    auto values = tensors[p].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + options.epsilon;
      const double plus = evaluate();
      values[i] = saved - options.epsilon;
      const double minus = evaluate();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.epsilon);
      const double rel = relative_error(analytic[p][i], numeric, options.magnitude_floor);
      const double abs_err = std::fabs(analytic[p][i] - numeric);
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
      }
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
    }
    entry.passed = entry.max_rel_error < options.tolerance;
    report.worst_rel_error = std::max(report.worst_rel_error, entry.max_rel_error);
    report.passed = report.passed && entry.passed;
    report.entries.push_back(entry);
  }

  for (std::size_t p = 0; p < tensors.size(); ++p) {
    tensors[p].zero_grad();
    tensors[p].set_requires_grad(previous_flags[p]);
  }
  return report;
}

}  // namespace cotr_moe
