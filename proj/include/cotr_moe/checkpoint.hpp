// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotr_moe/config.hpp"
#include "cotr_moe/model.hpp"
#include "cotr_moe/parameters.hpp"

// Binary layout (little-endian):
//   "CTRMOECK" | u32 version | 16-byte config digest | i32 stage | u8 wiring
//   | u64 len + config JSON | u64 count | count × block | u64 FNV-1a of all
//   preceding bytes.
// block: u32 len + name | u8 group | u32 rank | rank × u64 dims | f64 data.
namespace cotr_moe::stack {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct ParameterBlock {
  std::string name;
  ParamGroup group = ParamGroup::llm;
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  RunConfig config;
  std::string digest;
  int stage = 0;
  Wiring wiring = Wiring::concat;
  std::vector<ParameterBlock> blocks;
};

std::string encode_checkpoint(const MultimodalModel& model, int stage);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const MultimodalModel& model, int stage, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Builds a model for `wiring` from `config` and assigns every stored block
// by name. Groups missing from the checkpoint keep their fresh seeded
// initialisation; stored blocks the model does not have are an error.
MultimodalModel restore_model(const Checkpoint& checkpoint, const RunConfig& config, Wiring wiring);
MultimodalModel restore_model(const Checkpoint& checkpoint);

}  // namespace cotr_moe::stack
