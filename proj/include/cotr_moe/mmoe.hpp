// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cotr_moe/gradcheck.hpp"
#include "cotr_moe/random.hpp"
#include "cotr_moe/tensor.hpp"

// Mixture of LoRA experts wrapped around a frozen linear map. A router fed
// with pooled visual tokens, pooled instruction tokens and the hidden state
// picks the top-k routed experts; a general expert is always added.
namespace cotr_moe::moe {

// Low-rank additive update: (x·down)·up·scale. `up` starts at zero.
struct LoraExpert {
  Tensor down;  // d_in × r
  Tensor up;    // r × d_out
  double scale = 1.0;

  static LoraExpert init(std::size_t in_width, std::size_t out_width, std::size_t rank, Rng& rng,
                         double scale = 1.0);
  std::size_t rank() const { return down.cols(); }
  Tensor apply(const Tensor& x) const;
};

// 2-layer GELU MLP producing one logit per routed expert.
struct Router {
  Tensor w1, b1, w2, b2;

  static Router init(std::size_t in_width, std::size_t hidden, std::size_t experts, Rng& rng);
  std::size_t in_width() const { return w1.rows(); }
  std::size_t experts() const { return w2.cols(); }
  Tensor logits(const Tensor& features) const;
  Tensor probabilities(const Tensor& features) const;
};

// Sequence-level routing inputs shared by every position: mean-pooled
// visual tokens and mean-pooled instruction tokens (zero when absent).
struct RoutingContext {
  Tensor visual;  // 1 × d_v
  Tensor text;    // 1 × d_t

  std::size_t width() const { return visual.cols() + text.cols(); }
};

RoutingContext pool_context(const Tensor& visual, const std::optional<Tensor>& text, std::size_t text_width);

// Per row of x: [pooled visual ; pooled text ; x_row].
Tensor router_features(const RoutingContext& context, const Tensor& x);

enum class Granularity { token, sequence };

struct RouteDecision {
  std::vector<double> probabilities;
  std::vector<std::size_t> selected;
  Granularity granularity = Granularity::token;
};

// Indices of the k largest probabilities in descending order; ties go to
// the lower index.
std::vector<std::size_t> top_k(std::span<const double> probabilities, std::size_t k);

struct MmoeConfig {
  std::size_t experts = 3;
  std::size_t top_k = 1;
  std::size_t rank = 16;
  std::size_t router_hidden = 32;
  double lora_scale = 1.0;

  void validate() const;
};

struct MmoeOutput {
  Tensor output;
  Tensor probabilities;  // rows × E
  std::vector<RouteDecision> decisions;
};

class MmoeLayer {
 public:
  // Original linear map; never trained while wrapped.
  Tensor weight;  // d_in × d_out
  Tensor bias;    // 1 × d_out
  LoraExpert general;
  std::vector<LoraExpert> experts;
  Router router;
  std::size_t k = 1;

  static MmoeLayer wrap(Tensor weight, Tensor bias, const MmoeConfig& config, std::size_t context_width, Rng& rng);

  std::size_t in_width() const { return weight.rows(); }
  std::size_t out_width() const { return weight.cols(); }

  // original(x) + general(x) + (1/k)·Σ_{selected} expert(x). Under an
  // active tape the routed term carries the gradient of the soft mixture
  // (straight-through), so the router receives a training signal.
  MmoeOutput forward(const Tensor& x, const RoutingContext& context) const;

  // original(x) + general(x) + Σ_i R_i·expert_i(x).
  Tensor soft_forward(const Tensor& x, const RoutingContext& context) const;

  std::vector<NamedTensor> adapter_parameters(const std::string& prefix) const;
};

// E · Σ_e f_e · P_e with f_e the share of selections and P_e the mean
// routing probability.
double balance_loss(std::span<const RouteDecision> decisions, std::size_t experts);

// Differentiable through the probabilities; the selection shares are
// constants taken from `decisions` (row-aligned with the stacked tensors).
Tensor balance_loss(std::span<const Tensor> probabilities, std::span<const RouteDecision> decisions,
                    std::size_t experts);

// Per-layer expert selection counts. One accumulator per evaluation
// context; combine with merge().
class ExpertUsage {
 public:
  explicit ExpertUsage(std::size_t experts = 3) : experts_(experts) {}

  void record(std::size_t layer, const RouteDecision& decision);
  void record(std::size_t layer, std::span<const RouteDecision> decisions);
  void merge(const ExpertUsage& other);

  std::size_t experts() const { return experts_; }
  std::size_t layers() const { return counts_.size(); }
  std::uint64_t decisions(std::size_t layer) const;
  std::uint64_t count(std::size_t layer, std::size_t expert) const;

  // Selections per decision; each row sums to k. Throws when a layer has no
  // recorded decision.
  std::vector<std::vector<double>> frequencies() const;

 private:
  std::size_t experts_;
  std::vector<std::vector<std::uint64_t>> counts_;
  std::vector<std::uint64_t> decisions_;
};

}  // namespace cotr_moe::moe
