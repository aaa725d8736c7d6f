// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "cotr_moe/random.hpp"

namespace cotr_moe {

using nlohmann::json;

namespace {

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
}

void reject_unknown(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  std::set<std::string> keys;
  for (const char* k : allowed) keys.insert(k);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!keys.count(it.key())) throw ConfigError("unknown configuration key '" + path + it.key() + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& dst, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("invalid value for '" + path + key + "': " + e.what());
  }
}

void positive(std::size_t v, const char* what) {
  if (v == 0) throw ConfigError(std::string(what) + " must be positive");
}

}  // namespace

bool VisionConfig::equal_lengths() const {
  for (const auto& e : experts) {
    if (e.tokens != experts.front().tokens) return false;
  }
  return true;
}

std::size_t VisionConfig::total_width() const {
  std::size_t w = 0;
  for (const auto& e : experts) w += e.width;
  return w;
}

std::size_t VisionConfig::total_tokens() const {
  std::size_t n = 0;
  for (const auto& e : experts) n += e.tokens;
  return n;
}

void RunConfig::validate() const {
  positive(lm.vocab, "lm.vocab");
  positive(lm.width, "lm.width");
  positive(lm.heads, "lm.heads");
  positive(lm.mlp_hidden, "lm.mlp_hidden");
  if (lm.vocab < 64) throw ConfigError("lm.vocab must be at least 64 (synthetic vocabulary)");
  if (lm.width % lm.heads != 0) throw ConfigError("lm.width must be divisible by lm.heads");
  if (vision.experts.empty() || vision.experts.size() > 3) throw ConfigError("vision.experts must list 1 to 3 experts");
  for (const auto& e : vision.experts) {
    positive(e.tokens, "vision expert tokens");
    positive(e.width, "vision expert width");
  }
  positive(reduction.queries, "reduction.queries");
  positive(reduction.score_width, "reduction.score_width");
  try {
    mmoe.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  positive(train.batch, "train.batch");
  for (double lr : train.learning_rate) {
    if (!(lr > 0.0)) throw ConfigError("train.learning_rate entries must be positive");
  }
  if (!(train.clip > 0.0)) throw ConfigError("train.clip must be positive");
  if (train.balance_weight < 0.0) throw ConfigError("train.balance_weight must be non-negative");
  positive(data.train_samples, "data.train_samples");
  positive(data.eval_samples, "data.eval_samples");
  positive(efficiency.baseline_tokens, "efficiency.baseline_tokens");
  for (auto n : efficiency.reduced_tokens) positive(n, "efficiency.reduced_tokens entries");
  positive(efficiency.text_tokens, "efficiency.text_tokens");
}

json RunConfig::to_json(bool include_output) const {
  json experts = json::array();
  for (const auto& e : vision.experts) experts.push_back({{"tokens", e.tokens}, {"width", e.width}});
  json j = {
      {"seed", seed},
      {"precision", precision == Precision::wide ? "wide" : "standard"},
      {"lm",
       {{"vocab", lm.vocab},
        {"width", lm.width},
        {"layers", lm.layers},
        {"heads", lm.heads},
        {"mlp_hidden", lm.mlp_hidden}}},
      {"vision", {{"experts", experts}}},
      {"reduction",
       {{"queries", reduction.queries},
        {"score_width", reduction.score_width},
        {"mode", cotr::to_string(reduction.order)},
        {"scale_width", cotr::to_string(reduction.scale_width)}}},
      {"mmoe",
       {{"experts", mmoe.experts},
        {"top_k", mmoe.top_k},
        {"rank", mmoe.rank},
        {"router_hidden", mmoe.router_hidden},
        {"lora_scale", mmoe.lora_scale}}},
      {"train",
       {{"steps", train.steps},
        {"learning_rate", train.learning_rate},
        {"batch", train.batch},
        {"clip", train.clip},
        {"balance_weight", train.balance_weight}}},
      {"data",
       {{"train_path", data.train_path},
        {"eval_path", data.eval_path},
        {"train_samples", data.train_samples},
        {"eval_samples", data.eval_samples},
        {"seed", data.seed}}},
      {"efficiency",
       {{"baseline_tokens", efficiency.baseline_tokens},
        {"reduced_tokens", efficiency.reduced_tokens},
        {"text_tokens", efficiency.text_tokens}}},
  };
  if (include_output) j["out_dir"] = out_dir;
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  require_object(j, "config");
  reject_unknown(j, "",
                 {"seed", "precision", "lm", "vision", "reduction", "mmoe", "train", "data", "efficiency", "out_dir"});
  read(j, "seed", c.seed, "");
  read(j, "out_dir", c.out_dir, "");
  if (j.contains("precision")) {
    std::string p;
    read(j, "precision", p, "");
    if (p == "wide") {
      c.precision = Precision::wide;
    } else if (p == "standard") {
      c.precision = Precision::standard;
    } else {
      throw ConfigError("precision must be 'wide' or 'standard'");
    }
  }
  if (j.contains("lm")) {
    const json& s = j["lm"];
    require_object(s, "lm");
    reject_unknown(s, "lm.", {"vocab", "width", "layers", "heads", "mlp_hidden"});
    read(s, "vocab", c.lm.vocab, "lm.");
    read(s, "width", c.lm.width, "lm.");
    read(s, "layers", c.lm.layers, "lm.");
    read(s, "heads", c.lm.heads, "lm.");
    read(s, "mlp_hidden", c.lm.mlp_hidden, "lm.");
  }
  if (j.contains("vision")) {
    const json& s = j["vision"];
    require_object(s, "vision");
    reject_unknown(s, "vision.", {"experts"});
    if (s.contains("experts")) {
      if (!s["experts"].is_array()) throw ConfigError("vision.experts must be an array");
      c.vision.experts.clear();
      for (const auto& e : s["experts"]) {
        require_object(e, "vision.experts[]");
        reject_unknown(e, "vision.experts[].", {"tokens", "width"});
        cotr::ExpertGeometry g;
        read(e, "tokens", g.tokens, "vision.experts[].");
        read(e, "width", g.width, "vision.experts[].");
        c.vision.experts.push_back(g);
      }
    }
  }
  if (j.contains("reduction")) {
    const json& s = j["reduction"];
    require_object(s, "reduction");
    reject_unknown(s, "reduction.", {"queries", "score_width", "mode", "scale_width"});
    read(s, "queries", c.reduction.queries, "reduction.");
    read(s, "score_width", c.reduction.score_width, "reduction.");
    try {
      if (s.contains("mode")) c.reduction.order = cotr::parse_scale_order(s["mode"].get<std::string>());
      if (s.contains("scale_width")) c.reduction.scale_width = cotr::parse_scale_width(s["scale_width"].get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("reduction: ") + e.what());
    }
  }
  if (j.contains("mmoe")) {
    const json& s = j["mmoe"];
    require_object(s, "mmoe");
    reject_unknown(s, "mmoe.", {"experts", "top_k", "rank", "router_hidden", "lora_scale"});
    read(s, "experts", c.mmoe.experts, "mmoe.");
    read(s, "top_k", c.mmoe.top_k, "mmoe.");
    read(s, "rank", c.mmoe.rank, "mmoe.");
    read(s, "router_hidden", c.mmoe.router_hidden, "mmoe.");
    read(s, "lora_scale", c.mmoe.lora_scale, "mmoe.");
  }
  if (j.contains("train")) {
    const json& s = j["train"];
    require_object(s, "train");
    reject_unknown(s, "train.", {"steps", "learning_rate", "batch", "clip", "balance_weight"});
    read(s, "steps", c.train.steps, "train.");
    read(s, "learning_rate", c.train.learning_rate, "train.");
    read(s, "batch", c.train.batch, "train.");
    read(s, "clip", c.train.clip, "train.");
    read(s, "balance_weight", c.train.balance_weight, "train.");
  }
  if (j.contains("data")) {
    const json& s = j["data"];
    require_object(s, "data");
    reject_unknown(s, "data.", {"train_path", "eval_path", "train_samples", "eval_samples", "seed"});
    read(s, "train_path", c.data.train_path, "data.");
    read(s, "eval_path", c.data.eval_path, "data.");
    read(s, "train_samples", c.data.train_samples, "data.");
    read(s, "eval_samples", c.data.eval_samples, "data.");
    read(s, "seed", c.data.seed, "data.");
  }
  if (j.contains("efficiency")) {
    const json& s = j["efficiency"];
    require_object(s, "efficiency");
    reject_unknown(s, "efficiency.", {"baseline_tokens", "reduced_tokens", "text_tokens"});
    read(s, "baseline_tokens", c.efficiency.baseline_tokens, "efficiency.");
    read(s, "reduced_tokens", c.efficiency.reduced_tokens, "efficiency.");
    read(s, "text_tokens", c.efficiency.text_tokens, "efficiency.");
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse config file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string RunConfig::digest() const {
  const std::uint64_t h = fnv1a64(to_json(false).dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace cotr_moe
