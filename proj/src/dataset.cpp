// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/dataset.hpp"

#include <fstream>
#include <stdexcept>

#include "cotr_moe/random.hpp"

namespace cotr_moe::stack {

using nlohmann::json;

std::string to_string(TaskFamily task) {
  switch (task) {
    case TaskFamily::general:
      return "general";
    case TaskFamily::ocr:
      return "ocr-like";
    case TaskFamily::knowledge:
      return "knowledge-like";
  }
  return "?";
}

TaskFamily parse_task(const std::string& text) {
  for (auto t : kAllTasks) {
    if (to_string(t) == text) return t;
  }
  throw std::invalid_argument("unknown task tag '" + text + "'");
}

namespace vocab {

int task_token(TaskFamily task) { return 1 + static_cast<int>(task); }

int answer_base(TaskFamily task) { return 8 + kContentClasses * static_cast<int>(task); }

}  // namespace vocab

int answer_class(TaskFamily task, const Descriptor& d) {
  switch (task) {
    case TaskFamily::general:
      return d.color;
    case TaskFamily::ocr:
      return d.glyph;
    case TaskFamily::knowledge:
      return (d.color + 3 * d.glyph) % vocab::kContentClasses;
  }
  return 0;
}

std::vector<int> target_response(const Descriptor& d, const std::vector<int>& instruction) {
  if (instruction.empty()) throw std::invalid_argument("instruction must start with a task token");
  TaskFamily task = TaskFamily::general;
  bool found = false;
  for (auto t : kAllTasks) {
    if (instruction.front() == vocab::task_token(t)) {
      task = t;
      found = true;
    }
  }
  if (!found) throw std::invalid_argument("instruction does not start with a task token");
  return {vocab::answer_base(task) + answer_class(task, d), vocab::kEnd};
}

std::vector<SyntheticSample> synthesize(std::size_t count, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "dataset"));
  std::vector<SyntheticSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticSample s;
    s.task = kAllTasks[i % 3];
    s.descriptor.color = static_cast<int>(rng.below(vocab::kContentClasses));
    s.descriptor.glyph = static_cast<int>(rng.below(vocab::kContentClasses));
    s.descriptor.seed = rng.next_u64() >> 11;  // stays exact through JSON doubles
    s.instruction.push_back(vocab::task_token(s.task));
    const std::size_t filler = 1 + rng.below(vocab::kMaxInstruction - 3);
    for (std::size_t f = 0; f < filler; ++f) {
      s.instruction.push_back(vocab::kFillerBegin + static_cast<int>(rng.below(vocab::kFillerEnd - vocab::kFillerBegin)));
    }
    s.instruction.push_back(vocab::kSep);
    s.response = target_response(s.descriptor, s.instruction);
    out.push_back(std::move(s));
  }
  return out;
}

json to_json(const SyntheticSample& s) {
  return {{"descriptor", {{"color", s.descriptor.color}, {"glyph", s.descriptor.glyph}, {"seed", s.descriptor.seed}}},
          {"instruction", s.instruction},
          {"response", s.response},
          {"task", to_string(s.task)}};
}

SyntheticSample sample_from_json(const json& j) {
  SyntheticSample s;
  try {
    const json& d = j.at("descriptor");
    s.descriptor.color = d.at("color").get<int>();
    s.descriptor.glyph = d.at("glyph").get<int>();
    s.descriptor.seed = d.at("seed").get<std::uint64_t>();
    s.instruction = j.at("instruction").get<std::vector<int>>();
    s.response = j.at("response").get<std::vector<int>>();
    s.task = parse_task(j.at("task").get<std::string>());
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("malformed sample: ") + e.what());
  }
  if (s.descriptor.color < 0 || s.descriptor.color >= vocab::kContentClasses || s.descriptor.glyph < 0 ||
      s.descriptor.glyph >= vocab::kContentClasses) {
    throw std::runtime_error("malformed sample: descriptor attribute out of range");
  }
  if (s.instruction.empty() || s.instruction.size() > vocab::kMaxInstruction || s.response.empty()) {
    throw std::runtime_error("malformed sample: instruction/response length");
  }
  return s;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<SyntheticSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<SyntheticSample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<SyntheticSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cotr_moe::stack
