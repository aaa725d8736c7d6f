// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "cotr_moe/config.hpp"
#include "cotr_moe/dataset.hpp"

namespace cotr_moe::cli {

enum ExitCode : int { kOk = 0, kVerificationFailed = 1, kUsageError = 2, kIoError = 3 };

// Training corpus: data.train_path when set, otherwise synthesised from
// data.seed. The evaluation corpus uses a seed derived from data.seed.
std::vector<stack::SyntheticSample> training_set(const RunConfig& config);
std::vector<stack::SyntheticSample> evaluation_set(const RunConfig& config);

// Worker count from COTR_MOE_THREADS (default 1). Throws ConfigError when
// the variable is set to anything but a positive integer.
std::size_t thread_count();

// Entry point of the cotr-moe tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace cotr_moe::cli
