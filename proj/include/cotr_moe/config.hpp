// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cotr_moe/mmoe.hpp"
#include "cotr_moe/tensor.hpp"
#include "cotr_moe/token_reduction.hpp"

namespace cotr_moe {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LmGeometry {
  std::size_t vocab = 64;
  std::size_t width = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t mlp_hidden = 128;
};

struct VisionConfig {
  std::vector<cotr::ExpertGeometry> experts{{36, 16}, {36, 24}};

  bool equal_lengths() const;
  std::size_t total_width() const;
  std::size_t total_tokens() const;
};

struct ReductionSettings {
  std::size_t queries = 8;
  std::size_t score_width = 32;
  cotr::ScaleOrder order = cotr::ScaleOrder::pre_softmax;
  cotr::ScaleWidth scale_width = cotr::ScaleWidth::score_width;
};

struct TrainSchedule {
  std::array<std::size_t, 3> steps{300, 1500, 1000};
  std::array<double, 3> learning_rate{0.05, 0.1, 0.05};
  std::size_t batch = 16;
  double clip = 1.0;
  double balance_weight = 0.05;
};

struct DataConfig {
  std::string train_path;  // empty: synthesise
  std::string eval_path;   // empty: synthesise
  std::size_t train_samples = 2048;
  std::size_t eval_samples = 256;
  std::uint64_t seed = 1;
};

struct EfficiencyConfig {
  std::size_t baseline_tokens = 2880;
  std::vector<std::size_t> reduced_tokens{64, 1};
  std::size_t text_tokens = 32;
};

struct RunConfig {
  std::uint64_t seed = 7;
  Precision precision = Precision::standard;
  LmGeometry lm;
  VisionConfig vision;
  ReductionSettings reduction;
  moe::MmoeConfig mmoe;
  TrainSchedule train;
  DataConfig data;
  EfficiencyConfig efficiency;
  std::string out_dir = "runs/default";

  void validate() const;

  // `include_output` controls whether out_dir is emitted; the digest covers
  // everything else.
  nlohmann::json to_json(bool include_output = true) const;
  // Unknown keys are errors; missing keys keep their defaults.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  // 16 hex digits of a 64-bit FNV-1a hash over the canonical JSON form.
  std::string digest() const;
};

}  // namespace cotr_moe
