// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cotr_moe/tensor.hpp"

namespace cotr_moe {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckEntry {
  std::string name;
  std::size_t size = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error; gradients smaller than this are
  // compared in absolute terms.
  double magnitude_floor = 1e-6;
};

// Compares tape gradients of the scalar `loss_fn` against central
// differences for every entry of every parameter. Runs in wide precision.
// Throws NumericError if the loss is non-finite at any perturbed point.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& options = {});

double relative_error(double analytic, double numeric, double floor);

}  // namespace cotr_moe
