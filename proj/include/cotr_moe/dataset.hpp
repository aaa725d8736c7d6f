// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace cotr_moe::stack {

// Synthetic "image": two content attributes plus a seed for the clutter
// that fills the rest of each expert's view.
struct Descriptor {
  int color = 0;
  int glyph = 0;
  std::uint64_t seed = 0;

  bool operator==(const Descriptor&) const = default;
};

enum class TaskFamily { general, ocr, knowledge };

inline constexpr TaskFamily kAllTasks[] = {TaskFamily::general, TaskFamily::ocr, TaskFamily::knowledge};

std::string to_string(TaskFamily task);  // "general", "ocr-like", "knowledge-like"
TaskFamily parse_task(const std::string& text);

// Integer toy vocabulary layout.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kSep = 4;
inline constexpr int kEnd = 5;
inline constexpr int kContentClasses = 8;
inline constexpr int kFillerBegin = 40;
inline constexpr int kFillerEnd = 64;
inline constexpr int kMinVocab = 64;
inline constexpr std::size_t kMaxInstruction = 12;
int task_token(TaskFamily task);
int answer_base(TaskFamily task);
}  // namespace vocab

struct SyntheticSample {
  Descriptor descriptor;
  std::vector<int> instruction;
  std::vector<int> response;
  TaskFamily task = TaskFamily::general;

  bool operator==(const SyntheticSample&) const = default;
};

// general reads the colour, ocr-like the glyph, knowledge-like combines both.
int answer_class(TaskFamily task, const Descriptor& d);

// Target response, a deterministic function of (descriptor, instruction).
std::vector<int> target_response(const Descriptor& d, const std::vector<int>& instruction);

// Tasks cycle general/ocr/knowledge so any aligned triple is balanced.
std::vector<SyntheticSample> synthesize(std::size_t count, std::uint64_t seed);

nlohmann::json to_json(const SyntheticSample& s);
SyntheticSample sample_from_json(const nlohmann::json& j);

void write_jsonl(const std::filesystem::path& path, const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> read_jsonl(const std::filesystem::path& path);

}  // namespace cotr_moe::stack
