// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cotr_moe/trainer.hpp"

namespace cotr_moe::metrics {

// 1 - reduced/baseline. Both counts must be positive.
double token_reduction_ratio(std::size_t reduced, std::size_t baseline);

struct ModelGeometry {
  std::size_t layers = 0;
  std::size_t width = 0;
  std::size_t mlp_hidden = 0;
  std::size_t heads = 0;
  std::size_t vocab = 0;
  std::size_t visual_tokens = 0;
  std::size_t text_tokens = 0;
  bool gated_mlp = false;  // three MLP matrices (gate, up, down) instead of two

  void validate() const;
  std::size_t sequence() const { return visual_tokens + text_tokens; }
};

// 32 layers, width 4096, MLP 14336, 32 heads, V = 128256, gated MLP.
ModelGeometry llama3_8b(std::size_t visual_tokens, std::size_t text_tokens);

struct FlopsConvention {
  double per_mac = 2.0;
  double per_softmax_element = 5.0;
};

// With n = sequence length, d = width, f = MLP width, h = heads:
//   projections 4·n·d² MACs, scores n²·d MACs, context n²·d MACs,
//   softmax h·n² elements, MLP (2 or 3)·n·d·f MACs, all per layer;
//   head n·d·V MACs once.
struct FlopsBreakdown {
  double projections = 0.0;
  double scores = 0.0;
  double context = 0.0;
  double softmax = 0.0;
  double mlp = 0.0;
  double head = 0.0;

  double total() const { return projections + scores + context + softmax + mlp + head; }
};

FlopsBreakdown prefill_breakdown(const ModelGeometry& geometry, const FlopsConvention& convention = {});
double prefill_flops(const ModelGeometry& geometry, const FlopsConvention& convention = {});

// Per-layer selection frequencies, rows = layers, columns = experts.
using UsageMatrix = std::vector<std::vector<double>>;

// "layer,expert,frequency" header, one LF-terminated row per cell. Values
// use the shortest decimal form that parses back to the identical double.
std::string format_usage_csv(const UsageMatrix& usage);
void export_usage_csv(const UsageMatrix& usage, const std::filesystem::path& path);
UsageMatrix parse_usage_csv(const std::string& text);
UsageMatrix read_usage_csv(const std::filesystem::path& path);

// Largest total-variation distance between any two task rows of one layer.
double max_total_variation(const std::vector<UsageMatrix>& per_task, std::size_t layer);
double total_variation(const std::vector<double>& p, const std::vector<double>& q);

struct MetricsRecord {
  std::string digest;
  std::string command;
  std::optional<int> stage;
  std::vector<stack::StepRecord> history;
  std::optional<double> balance_probe_initial;
  std::optional<double> balance_probe_final;
  nlohmann::json evaluation;  // null when absent
  nlohmann::json extra;       // null when absent
};

nlohmann::json metrics_json(const MetricsRecord& record, const std::string& created_at);
// Refuses a record with neither history nor evaluation; nothing is written
// in that case.
void export_metrics_json(const MetricsRecord& record, const std::filesystem::path& path);
// Same document without volatile fields (created_at).
nlohmann::json strip_volatile(nlohmann::json doc);

std::string utc_timestamp();
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace cotr_moe::metrics
