// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/metrics.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cotr_moe::metrics {

double token_reduction_ratio(std::size_t reduced, std::size_t baseline) {
  if (baseline == 0) throw std::invalid_argument("token reduction: baseline count must be positive");
  if (reduced == 0) throw std::invalid_argument("token reduction: reduced count must be positive");
  return 1.0 - static_cast<double>(reduced) / static_cast<double>(baseline);
}

void ModelGeometry::validate() const {
  if (width == 0 || mlp_hidden == 0 || heads == 0 || vocab == 0) {
    throw std::invalid_argument("model geometry: width, MLP width, heads and vocabulary must be positive");
  }
  if (sequence() == 0) throw std::invalid_argument("model geometry: empty sequence");
}

ModelGeometry llama3_8b(std::size_t visual_tokens, std::size_t text_tokens) {
  ModelGeometry g;
  g.layers = 32;
  g.width = 4096;
  g.mlp_hidden = 14336;
  g.heads = 32;
  g.vocab = 128256;
  g.visual_tokens = visual_tokens;
  g.text_tokens = text_tokens;
  g.gated_mlp = true;
  return g;
}

FlopsBreakdown prefill_breakdown(const ModelGeometry& g, const FlopsConvention& c) {
  g.validate();
  const double n = static_cast<double>(g.sequence());
  const double d = static_cast<double>(g.width);
  const double f = static_cast<double>(g.mlp_hidden);
  const double h = static_cast<double>(g.heads);
  const double L = static_cast<double>(g.layers);
  FlopsBreakdown b;
  b.projections = L * c.per_mac * 4.0 * n * d * d;
  b.scores = L * c.per_mac * n * n * d;
  b.context = L * c.per_mac * n * n * d;
  b.softmax = L * c.per_softmax_element * h * n * n;
  b.mlp = L * c.per_mac * (g.gated_mlp ? 3.0 : 2.0) * n * d * f;
  b.head = c.per_mac * n * d * static_cast<double>(g.vocab);
  return b;
}

double prefill_flops(const ModelGeometry& geometry, const FlopsConvention& convention) {
  return prefill_breakdown(geometry, convention).total();
}

std::string format_usage_csv(const UsageMatrix& usage) {
  if (usage.empty()) throw std::invalid_argument("usage export: no layers");
  std::string out = "layer,expert,frequency\n";
  char value[64];
  for (std::size_t l = 0; l < usage.size(); ++l) {
    if (usage[l].empty()) throw std::invalid_argument("usage export: layer without experts");
    for (std::size_t e = 0; e < usage[l].size(); ++e) {
      // Shortest form that reads back to the same double.
      const auto res = std::to_chars(value, value + sizeof value, usage[l][e]);
      out += std::to_string(l) + "," + std::to_string(e) + "," + std::string(value, res.ptr) + "\n";
    }
  }
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out << text;
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
}

void export_usage_csv(const UsageMatrix& usage, const std::filesystem::path& path) {
  write_text_file(path, format_usage_csv(usage));
}

UsageMatrix parse_usage_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "layer,expert,frequency") {
    throw std::invalid_argument("usage CSV: missing header");
  }
  UsageMatrix m;
  while (std::getline(in, line)) {
    std::size_t l = 0, e = 0;
    double v = 0.0;
    int consumed = 0;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf%n", &l, &e, &v, &consumed) != 3 ||
        static_cast<std::size_t>(consumed) != line.size()) {
      throw std::invalid_argument("usage CSV: malformed row '" + line + "'");
    }
    const bool opens_layer = l == m.size() && e == 0;
    const bool continues_layer = l + 1 == m.size() && e == m.back().size();
    if (!opens_layer && !continues_layer) throw std::invalid_argument("usage CSV: rows out of order");
    if (opens_layer) m.emplace_back();
    m[l].push_back(v);
  }
  if (m.empty()) throw std::invalid_argument("usage CSV: no rows");
  return m;
}

UsageMatrix read_usage_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_usage_csv(ss.str());
}

double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("total variation: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

double max_total_variation(const std::vector<UsageMatrix>& per_task, std::size_t layer) {
  double best = 0.0;
  for (std::size_t a = 0; a < per_task.size(); ++a) {
    for (std::size_t b = a + 1; b < per_task.size(); ++b) {
      best = std::max(best, total_variation(per_task[a].at(layer), per_task[b].at(layer)));
    }
  }
  return best;
}

nlohmann::json metrics_json(const MetricsRecord& record, const std::string& created_at) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& s : record.history) {
    nlohmann::json row = {{"step", s.step}, {"loss", s.loss}, {"cross_entropy", s.cross_entropy},
                          {"grad_norm", s.grad_norm}};
    row["balance_loss"] = s.balance ? nlohmann::json(*s.balance) : nlohmann::json(nullptr);
    history.push_back(std::move(row));
  }
  nlohmann::json doc = {{"digest", record.digest}, {"command", record.command}, {"created_at", created_at}};
  doc["stage"] = record.stage ? nlohmann::json(*record.stage) : nlohmann::json(nullptr);
  doc["history"] = std::move(history);
  nlohmann::json probe = nlohmann::json::object();
  if (record.balance_probe_initial) probe["initial"] = *record.balance_probe_initial;
  if (record.balance_probe_final) probe["final"] = *record.balance_probe_final;
  doc["balance_probe"] = probe;
  doc["evaluation"] = record.evaluation;
  if (!record.extra.is_null()) doc["extra"] = record.extra;
  return doc;
}

void export_metrics_json(const MetricsRecord& record, const std::filesystem::path& path) {
  if (record.history.empty() && record.evaluation.is_null()) {
    throw std::invalid_argument("metrics export: nothing to report (empty history and no evaluation)");
  }
  write_text_file(path, metrics_json(record, utc_timestamp()).dump(2) + "\n");
}

nlohmann::json strip_volatile(nlohmann::json doc) {
  if (doc.is_object()) doc.erase("created_at");
  return doc;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace cotr_moe::metrics
