// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/mmoe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cotr_moe::moe {

LoraExpert LoraExpert::init(std::size_t in_width, std::size_t out_width, std::size_t rank, Rng& rng, double scale) {
  if (rank == 0) throw std::invalid_argument("LoRA rank must be positive");
  LoraExpert e;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_width));
  e.down = random_uniform({in_width, rank}, rng, -bound, bound);
  e.up = Tensor::zeros({rank, out_width});
  e.scale = scale;
  return e;
}

Tensor LoraExpert::apply(const Tensor& x) const {
  Tensor y = matmul(matmul(x, down), up);
  return scale == 1.0 ? y : cotr_moe::scale(y, scale);
}

Router Router::init(std::size_t in_width, std::size_t hidden, std::size_t experts, Rng& rng) {
  Router r;
  r.w1 = xavier_uniform(in_width, hidden, rng);
  r.b1 = Tensor::zeros({1, hidden});
  r.w2 = xavier_uniform(hidden, experts, rng);
  r.b2 = Tensor::zeros({1, experts});
  return r;
}

Tensor Router::logits(const Tensor& features) const {
  if (features.cols() != in_width()) {
    throw ShapeError("router expects " + std::to_string(in_width()) + " features, got " +
                     std::to_string(features.cols()));
  }
  return linear(gelu(linear(features, w1, b1)), w2, b2);
}

Tensor Router::probabilities(const Tensor& features) const { return softmax(logits(features), 1); }

RoutingContext pool_context(const Tensor& visual, const std::optional<Tensor>& text, std::size_t text_width) {
  RoutingContext ctx;
  ctx.visual = mean(visual, 0);
  if (text) {
    if (text->cols() != text_width) throw ShapeError("pool_context: text width mismatch");
    ctx.text = mean(*text, 0);
  } else {
    ctx.text = Tensor::zeros({1, text_width});
  }
  return ctx;
}

Tensor router_features(const RoutingContext& context, const Tensor& x) {
  const Tensor row = concat({context.visual, context.text}, 1);
  const Tensor repeated = matmul(Tensor::full({x.rows(), 1}, 1.0), row);
  return concat({repeated, x}, 1);
}

std::vector<std::size_t> top_k(std::span<const double> probabilities, std::size_t k) {
  if (k == 0 || k > probabilities.size()) throw std::invalid_argument("top_k: k must be in [1, E]");
  std::vector<std::size_t> idx(probabilities.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return probabilities[a] > probabilities[b]; });
  idx.resize(k);
  return idx;
}

void MmoeConfig::validate() const {
  if (experts == 0) throw std::invalid_argument("mmoe: need at least one routed expert");
  if (top_k == 0 || top_k > experts) throw std::invalid_argument("mmoe: top_k must be in [1, experts]");
  if (rank == 0) throw std::invalid_argument("mmoe: rank must be positive");
  if (router_hidden == 0) throw std::invalid_argument("mmoe: router hidden width must be positive");
}

MmoeLayer MmoeLayer::wrap(Tensor weight, Tensor bias, const MmoeConfig& config, std::size_t context_width,
                          Rng& rng) {
  config.validate();
  MmoeLayer layer;
  layer.weight = std::move(weight);
  layer.bias = std::move(bias);
  const std::size_t din = layer.weight.rows(), dout = layer.weight.cols();
  if (layer.bias.shape() != Shape{1, dout}) throw ShapeError("mmoe: bias must be 1 x d_out");
  layer.general = LoraExpert::init(din, dout, config.rank, rng, config.lora_scale);
  for (std::size_t e = 0; e < config.experts; ++e) {
    layer.experts.push_back(LoraExpert::init(din, dout, config.rank, rng, config.lora_scale));
  }
  layer.router = Router::init(context_width + din, config.router_hidden, config.experts, rng);
  layer.k = config.top_k;
  return layer;
}

MmoeOutput MmoeLayer::forward(const Tensor& x, const RoutingContext& context) const {
  if (x.cols() != in_width()) throw ShapeError("mmoe: input width mismatch");
  const std::size_t n = x.rows();
  const std::size_t E = experts.size();

  MmoeOutput out;
  out.probabilities = router.probabilities(router_features(context, x));
  const auto probs = out.probabilities.data();
  std::vector<std::vector<double>> gates(E, std::vector<double>(n, 0.0));
  for (std::size_t r = 0; r < n; ++r) {
    RouteDecision d;
    d.probabilities.assign(probs.begin() + static_cast<std::ptrdiff_t>(r * E),
                           probs.begin() + static_cast<std::ptrdiff_t>((r + 1) * E));
    d.selected = top_k(d.probabilities, k);
    for (auto e : d.selected) gates[e][r] = 1.0 / static_cast<double>(k);
    out.decisions.push_back(std::move(d));
  }

  const bool training = Tape::active() != nullptr;
  std::optional<Tensor> hard;
  std::optional<Tensor> soft;
  for (std::size_t e = 0; e < E; ++e) {
    const bool used = std::any_of(gates[e].begin(), gates[e].end(), [](double g) { return g != 0.0; });
    if (!used && !training) continue;
    const Tensor y = experts[e].apply(x);
    if (used) {
      const Tensor h = mul(y, Tensor::from({n, 1}, gates[e]));
      hard = hard ? add(*hard, h) : h;
    }
    if (training) {
      const Tensor s = mul(y, slice_cols(out.probabilities, e, e + 1));
      soft = soft ? add(*soft, s) : s;
    }
  }
  Tensor routed = soft ? straight_through(*hard, *soft) : *hard;
  out.output = add(add(linear(x, weight, bias), general.apply(x)), routed);
  return out;
}

Tensor MmoeLayer::soft_forward(const Tensor& x, const RoutingContext& context) const {
  if (x.cols() != in_width()) throw ShapeError("mmoe: input width mismatch");
  const Tensor probs = router.probabilities(router_features(context, x));
  std::optional<Tensor> mix;
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const Tensor s = mul(experts[e].apply(x), slice_cols(probs, e, e + 1));
    mix = mix ? add(*mix, s) : s;
  }
  return add(add(linear(x, weight, bias), general.apply(x)), *mix);
}

std::vector<NamedTensor> MmoeLayer::adapter_parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out{{prefix + "general.down", general.down}, {prefix + "general.up", general.up}};
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const std::string p = prefix + "expert" + std::to_string(e) + ".";
    out.push_back({p + "down", experts[e].down});
    out.push_back({p + "up", experts[e].up});
  }
  out.push_back({prefix + "router.w1", router.w1});
  out.push_back({prefix + "router.b1", router.b1});
  out.push_back({prefix + "router.w2", router.w2});
  out.push_back({prefix + "router.b2", router.b2});
  return out;
}

namespace {

std::vector<double> selection_shares(std::span<const RouteDecision> decisions, std::size_t experts) {
  if (decisions.empty()) throw std::invalid_argument("balance_loss: no routing decisions");
  std::vector<double> counts(experts, 0.0);
  double total = 0.0;
  for (const auto& d : decisions) {
    for (auto e : d.selected) {
      if (e >= experts) throw std::out_of_range("balance_loss: expert index");
      counts[e] += 1.0;
      total += 1.0;
    }
  }
  for (auto& c : counts) c /= total;
  return counts;
}

}  // namespace

double balance_loss(std::span<const RouteDecision> decisions, std::size_t experts) {
  const auto f = selection_shares(decisions, experts);
  std::vector<double> p(experts, 0.0);
  for (const auto& d : decisions) {
    if (d.probabilities.size() != experts) throw ShapeError("balance_loss: probability width");
    for (std::size_t e = 0; e < experts; ++e) p[e] += d.probabilities[e];
  }
  double acc = 0.0;
  for (std::size_t e = 0; e < experts; ++e) acc += f[e] * (p[e] / static_cast<double>(decisions.size()));
  return static_cast<double>(experts) * acc;
}

Tensor balance_loss(std::span<const Tensor> probabilities, std::span<const RouteDecision> decisions,
                    std::size_t experts) {
  if (probabilities.empty()) throw std::invalid_argument("balance_loss: no routing probabilities");
  std::size_t rows = 0;
  for (const auto& p : probabilities) rows += p.rows();
  if (rows != decisions.size()) throw ShapeError("balance_loss: probabilities and decisions are not aligned");
  const auto f = selection_shares(decisions, experts);
  const Tensor stacked = concat(std::vector<Tensor>(probabilities.begin(), probabilities.end()), 0);
  const Tensor weighted = mul(mean(stacked, 0), Tensor::from({1, experts}, f));
  return scale(sum_all(weighted), static_cast<double>(experts));
}

void ExpertUsage::record(std::size_t layer, const RouteDecision& decision) {
  if (layer >= counts_.size()) {
    counts_.resize(layer + 1, std::vector<std::uint64_t>(experts_, 0));
    decisions_.resize(layer + 1, 0);
  }
  for (auto e : decision.selected) {
    if (e >= experts_) throw std::out_of_range("expert usage: expert index");
    ++counts_[layer][e];
  }
  ++decisions_[layer];
}

void ExpertUsage::record(std::size_t layer, std::span<const RouteDecision> decisions) {
  for (const auto& d : decisions) record(layer, d);
}

void ExpertUsage::merge(const ExpertUsage& other) {
  if (other.experts_ != experts_) throw std::invalid_argument("expert usage: expert count mismatch");
  if (other.counts_.size() > counts_.size()) {
    counts_.resize(other.counts_.size(), std::vector<std::uint64_t>(experts_, 0));
    decisions_.resize(other.counts_.size(), 0);
  }
  for (std::size_t l = 0; l < other.counts_.size(); ++l) {
    for (std::size_t e = 0; e < experts_; ++e) counts_[l][e] += other.counts_[l][e];
    decisions_[l] += other.decisions_[l];
  }
}

std::uint64_t ExpertUsage::decisions(std::size_t layer) const {
  return layer < decisions_.size() ? decisions_[layer] : 0;
}

std::uint64_t ExpertUsage::count(std::size_t layer, std::size_t expert) const {
  return layer < counts_.size() && expert < experts_ ? counts_[layer][expert] : 0;
}

std::vector<std::vector<double>> ExpertUsage::frequencies() const {
  if (counts_.empty()) throw std::invalid_argument("expert usage: no recorded history");
  std::vector<std::vector<double>> out(counts_.size(), std::vector<double>(experts_, 0.0));
  for (std::size_t l = 0; l < counts_.size(); ++l) {
    if (decisions_[l] == 0) throw std::invalid_argument("expert usage: layer " + std::to_string(l) + " has no decisions");
    for (std::size_t e = 0; e < experts_; ++e) {
      out[l][e] = static_cast<double>(counts_[l][e]) / static_cast<double>(decisions_[l]);
    }
  }
  return out;
}

}  // namespace cotr_moe::moe
