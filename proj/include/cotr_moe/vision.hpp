// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "cotr_moe/dataset.hpp"
#include "cotr_moe/gradcheck.hpp"
#include "cotr_moe/random.hpp"
#include "cotr_moe/token_reduction.hpp"

namespace cotr_moe::stack {

enum class Nonlinearity { tanh, gelu, sigmoid };

// Deterministic stand-in for a pretrained vision tower. Each expert views
// the descriptor through its own symbol layout (one attribute occupies a
// region of the token grid, seeded clutter fills the rest), then applies an
// embedding table, position table, a mixing matrix and an expert-specific
// nonlinearity.
class SyntheticVisionExpert {
 public:
  static constexpr int kSymbols = 16;

  SyntheticVisionExpert(std::size_t id, cotr::ExpertGeometry geometry, Rng& rng);

  std::size_t id() const { return id_; }
  const cotr::ExpertGeometry& geometry() const { return geometry_; }
  Nonlinearity nonlinearity() const;

  std::vector<int> symbols(const Descriptor& d) const;
  Tensor encode(const Descriptor& d) const;

  std::vector<NamedTensor> parameters(const std::string& prefix) const;

 private:
  std::size_t id_;
  cotr::ExpertGeometry geometry_;
  Tensor table_;     // symbols × d
  Tensor position_;  // N × d
  Tensor mix_;       // d × d
  Tensor bias_;      // 1 × d
};

// Pearson correlation of two equally long sample vectors.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace cotr_moe::stack
