// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/vision.hpp"

#include <cmath>
#include <stdexcept>

namespace cotr_moe::stack {

SyntheticVisionExpert::SyntheticVisionExpert(std::size_t id, cotr::ExpertGeometry geometry, Rng& rng)
    : id_(id), geometry_(geometry) {
  if (geometry.tokens == 0 || geometry.width == 0) throw std::invalid_argument("vision expert geometry must be positive");
  const std::size_t d = geometry.width;
  table_ = random_normal({kSymbols, d}, rng, 1.0);
  position_ = random_normal({geometry.tokens, d}, rng, 0.5);
  mix_ = xavier_uniform(d, d, rng);
  bias_ = Tensor::zeros({1, d});
}

Nonlinearity SyntheticVisionExpert::nonlinearity() const {
  switch (id_ % 3) {
    case 0:
      return Nonlinearity::tanh;
    case 1:
      return Nonlinearity::gelu;
    default:
      return Nonlinearity::sigmoid;
  }
}

std::vector<int> SyntheticVisionExpert::symbols(const Descriptor& d) const {
  const std::size_t n = geometry_.tokens;
  const std::size_t slot = id_ % 3;
  const std::size_t span = std::max<std::size_t>(1, n / 3);
  const std::size_t begin = std::min(slot * span, n - 1);
  const std::size_t end = std::min(begin + span, n);
  int content = 0;
  switch (slot) {
    case 0:
      content = d.color;
      break;
    case 1:
      content = d.glyph;
      break;
    default:
      content = (d.color + d.glyph) % vocab::kContentClasses;
      break;
  }
  Rng clutter(derive_seed(d.seed, "clutter" + std::to_string(id_)));
  std::vector<int> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    const int noise = vocab::kContentClasses + static_cast<int>(clutter.below(kSymbols - vocab::kContentClasses));
    out[j] = (j >= begin && j < end) ? content : noise;
  }
  return out;
}

Tensor SyntheticVisionExpert::encode(const Descriptor& d) const {
  const auto syms = symbols(d);
  const Tensor h = add(matmul(add(gather_rows(table_, syms), position_), mix_), bias_);
  switch (nonlinearity()) {
    case Nonlinearity::tanh:
      return cotr_moe::tanh(h);
    case Nonlinearity::gelu:
      return gelu(h);
    case Nonlinearity::sigmoid:
      return sigmoid(h);
  }
  return h;
}

std::vector<NamedTensor> SyntheticVisionExpert::parameters(const std::string& prefix) const {
  return {{prefix + "table", table_}, {prefix + "position", position_}, {prefix + "mix", mix_}, {prefix + "bias", bias_}};
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson: need two equal samples of size >= 2");
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace cotr_moe::stack
