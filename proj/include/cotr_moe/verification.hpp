// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cotr_moe/config.hpp"
#include "cotr_moe/gradcheck.hpp"

// Finite-difference suites shared by the CLI and the test binaries.
namespace cotr_moe::verification {

struct NamedReport {
  std::string name;
  GradCheckReport report;
};

// One check per differentiable op on random shapes with extents in
// [1, max_extent]. Loss is Σ op(x) ⊙ R for a fixed random R.
std::vector<NamedReport> tensor_op_suite(std::uint64_t seed, std::size_t max_extent = 16,
                                         const GradCheckOptions& options = {});

// Full token-reduction forward (projector included) at the configured
// geometry with random visual and text tokens.
GradCheckReport cotr_suite(const RunConfig& config, std::uint64_t seed, const GradCheckOptions& options = {});

// Soft mixture forward of one MMoE layer with randomised up-maps, over the
// router, routed experts and general expert.
GradCheckReport mmoe_suite(const RunConfig& config, std::uint64_t seed, const GradCheckOptions& options = {});

// Worst relative error per parameter group, keyed by the parameter name up
// to its last '.'-separated component.
std::vector<std::pair<std::string, double>> worst_by_group(const GradCheckReport& report);

}  // namespace cotr_moe::verification
