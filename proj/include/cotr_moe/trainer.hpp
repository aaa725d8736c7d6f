// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cotr_moe/dataset.hpp"
#include "cotr_moe/mmoe.hpp"
#include "cotr_moe/model.hpp"
#include "cotr_moe/parameters.hpp"

namespace cotr_moe::stack {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StagePlan {
  int stage = 1;
  std::array<bool, 5> trainable{};  // indexed by ParamGroup

  static StagePlan for_stage(int stage);
  bool trains(ParamGroup group) const { return trainable[static_cast<std::size_t>(group)]; }
  Wiring wiring() const { return wiring_for_stage(stage); }
};

struct TrainOptions {
  std::size_t steps = 300;
  double learning_rate = 0.05;
  std::size_t batch = 16;
  double clip = 1.0;
  double balance_weight = 0.05;
  std::uint64_t seed = 7;
};

TrainOptions options_for_stage(const RunConfig& config, int stage);

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;                 // total objective
  double cross_entropy = 0.0;
  std::optional<double> balance;     // mean per-layer balance loss (stage 3)
  double grad_norm = 0.0;            // before clipping
};

struct StageReport {
  int stage = 1;
  std::vector<StepRecord> history;
  // Mean per-layer balance loss on a fixed batch with an equal share of
  // every task family, measured before the first and after the last step.
  std::optional<double> balance_probe_initial;
  std::optional<double> balance_probe_final;
  std::map<std::string, bool> group_changed;  // by group name
};

// Batch with the same number of samples from every task family, in a fixed
// order; `per_task` samples each.
std::vector<SyntheticSample> balanced_batch(const std::vector<SyntheticSample>& data, std::size_t per_task);

// Mean over MMoE layers of the per-layer batch balance loss.
double batch_balance(const MultimodalModel& model, const std::vector<SyntheticSample>& batch);

StageReport train_stage(MultimodalModel& model, const StagePlan& plan, const std::vector<SyntheticSample>& data,
                        const TrainOptions& options);

struct EvalReport {
  std::size_t total = 0;
  std::size_t correct = 0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_task;  // name -> (correct, total)

  double exact_match() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

// Greedy exact-match; `threads` workers share the read-only model.
EvalReport evaluate(const MultimodalModel& model, const std::vector<SyntheticSample>& samples, std::size_t threads = 1);

// Teacher-forced routing statistics over [visual ; instruction ; response]
// for the samples of one task family.
moe::ExpertUsage routing_usage(const MultimodalModel& model, const std::vector<SyntheticSample>& samples,
                               std::size_t threads = 1);

}  // namespace cotr_moe::stack
