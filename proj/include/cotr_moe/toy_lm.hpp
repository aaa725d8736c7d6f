// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cotr_moe/config.hpp"
#include "cotr_moe/gradcheck.hpp"
#include "cotr_moe/mmoe.hpp"
#include "cotr_moe/random.hpp"
#include "cotr_moe/tensor.hpp"

namespace cotr_moe::stack {

// Pre-norm decoder block: causal multi-head self-attention followed by a
// GELU MLP slot. Each MLP linear can be wrapped by an MmoeLayer that shares
// the original weight and bias tensors.
struct DecoderBlock {
  Tensor attn_gain, wq, wk, wv, wo;
  Tensor mlp_gain, fc1, b1, fc2, b2;
  std::optional<moe::MmoeLayer> moe_fc1;
  std::optional<moe::MmoeLayer> moe_fc2;
};

// Routing trace of one forward pass, one entry per MMoE layer in order
// (block-major, fc1 before fc2).
using RoutingTrace = std::vector<moe::MmoeOutput>;

// Decoder-only LM without positional embeddings. Inputs are embedding rows,
// so visual tokens and text embeddings can be mixed freely.
class ToyLM {
 public:
  ToyLM() = default;
  ToyLM(const LmGeometry& geometry, Rng& rng);

  const LmGeometry& geometry() const { return geometry_; }
  std::size_t width() const { return geometry_.width; }

  Tensor embed(std::span<const int> tokens) const;

  // Logits for rows [logits_from, n). `context` is required once MMoE is
  // installed; `trace` collects routing when non-null.
  Tensor forward(const Tensor& inputs, const moe::RoutingContext* context = nullptr, RoutingTrace* trace = nullptr,
                 std::size_t logits_from = 0) const;

  // Wraps fc1 and fc2 of every block; idempotent installs are rejected.
  void install_mmoe(const moe::MmoeConfig& config, std::size_t context_width, Rng& rng);
  bool has_mmoe() const;
  std::size_t mmoe_layers() const { return has_mmoe() ? 2 * blocks_.size() : 0; }
  const moe::MmoeLayer& mmoe_layer(std::size_t index) const;

  std::vector<NamedTensor> core_parameters(const std::string& prefix) const;
  std::vector<NamedTensor> mmoe_parameters(const std::string& prefix) const;

 private:
  Tensor attention(const DecoderBlock& b, const Tensor& x) const;
  Tensor mlp(const DecoderBlock& b, const Tensor& x, const moe::RoutingContext* context, RoutingTrace* trace) const;

  LmGeometry geometry_;
  Tensor embedding_;  // V × d
  std::vector<DecoderBlock> blocks_;
  Tensor final_gain_;
  Tensor head_;  // d × V
};

// Sum over positions of next-token cross-entropy for logits row t predicting
// targets[t].
double sequence_nll(const Tensor& logits, std::span<const int> targets);

}  // namespace cotr_moe::stack
