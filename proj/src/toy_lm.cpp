// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/toy_lm.hpp"

#include <cmath>
#include <stdexcept>

namespace cotr_moe::stack {

namespace {

constexpr double kMasked = -1e9;

Tensor causal_mask(std::size_t n) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = r + 1; c < n; ++c) m[r * n + c] = kMasked;
  }
  return Tensor::from({n, n}, std::move(m));
}

}  // namespace

ToyLM::ToyLM(const LmGeometry& geometry, Rng& rng) : geometry_(geometry) {
  const std::size_t d = geometry.width, f = geometry.mlp_hidden, V = geometry.vocab;
  if (d == 0 || f == 0 || V == 0 || geometry.heads == 0 || d % geometry.heads != 0) {
    throw std::invalid_argument("invalid LM geometry");
  }
  embedding_ = random_normal({V, d}, rng, 1.0);
  for (std::size_t l = 0; l < geometry.layers; ++l) {
    DecoderBlock b;
    b.attn_gain = Tensor::full({1, d}, 1.0);
    b.wq = xavier_uniform(d, d, rng);
    b.wk = xavier_uniform(d, d, rng);
    b.wv = xavier_uniform(d, d, rng);
    b.wo = xavier_uniform(d, d, rng);
    b.mlp_gain = Tensor::full({1, d}, 1.0);
    b.fc1 = xavier_uniform(d, f, rng);
    b.b1 = Tensor::zeros({1, f});
    b.fc2 = xavier_uniform(f, d, rng);
    b.b2 = Tensor::zeros({1, d});
    blocks_.push_back(std::move(b));
  }
  final_gain_ = Tensor::full({1, d}, 1.0);
  head_ = xavier_uniform(d, V, rng);
}

Tensor ToyLM::embed(std::span<const int> tokens) const {
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= geometry_.vocab) {
      throw std::out_of_range("token id " + std::to_string(t) + " outside the vocabulary");
    }
  }
  return gather_rows(embedding_, tokens);
}

Tensor ToyLM::attention(const DecoderBlock& b, const Tensor& x) const {
  const std::size_t n = x.rows(), h = geometry_.heads, dh = geometry_.width / h;
  const Tensor q = matmul(x, b.wq), k = matmul(x, b.wk), v = matmul(x, b.wv);
  const Tensor mask = causal_mask(n);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  for (std::size_t i = 0; i < h; ++i) {
    const Tensor qi = slice_cols(q, i * dh, (i + 1) * dh);
    const Tensor ki = slice_cols(k, i * dh, (i + 1) * dh);
    const Tensor vi = slice_cols(v, i * dh, (i + 1) * dh);
    const Tensor w = softmax(add(scale(matmul(qi, transpose(ki)), inv), mask), 1);
    heads.push_back(matmul(w, vi));
  }
  return matmul(h == 1 ? heads.front() : concat(heads, 1), b.wo);
}

Tensor ToyLM::mlp(const DecoderBlock& b, const Tensor& x, const moe::RoutingContext* context,
                  RoutingTrace* trace) const {
  if (!b.moe_fc1) return linear(gelu(linear(x, b.fc1, b.b1)), b.fc2, b.b2);
  if (!context) throw std::invalid_argument("MMoE layers need a routing context");
  moe::MmoeOutput first = b.moe_fc1->forward(x, *context);
  const Tensor hidden = gelu(first.output);
  moe::MmoeOutput second = b.moe_fc2->forward(hidden, *context);
  Tensor out = second.output;
  if (trace) {
    trace->push_back(std::move(first));
    trace->push_back(std::move(second));
  }
  return out;
}

Tensor ToyLM::forward(const Tensor& inputs, const moe::RoutingContext* context, RoutingTrace* trace,
                      std::size_t logits_from) const {
  if (inputs.rank() != 2 || inputs.cols() != geometry_.width) {
    throw ShapeError("LM inputs must be n x " + std::to_string(geometry_.width) + ", got " +
                     shape_string(inputs.shape()));
  }
  if (logits_from >= inputs.rows()) throw std::out_of_range("logits_from beyond the sequence");
  Tensor x = inputs;
  for (const auto& b : blocks_) {
    x = add(x, attention(b, rms_norm(x, b.attn_gain)));
    x = add(x, mlp(b, rms_norm(x, b.mlp_gain), context, trace));
  }
  if (logits_from > 0) x = slice_rows(x, logits_from, x.rows());
  return matmul(rms_norm(x, final_gain_), head_);
}

void ToyLM::install_mmoe(const moe::MmoeConfig& config, std::size_t context_width, Rng& rng) {
  if (has_mmoe()) throw std::logic_error("MMoE already installed");
  for (auto& b : blocks_) {
    b.moe_fc1 = moe::MmoeLayer::wrap(b.fc1, b.b1, config, context_width, rng);
    b.moe_fc2 = moe::MmoeLayer::wrap(b.fc2, b.b2, config, context_width, rng);
  }
}

bool ToyLM::has_mmoe() const { return !blocks_.empty() && blocks_.front().moe_fc1.has_value(); }

const moe::MmoeLayer& ToyLM::mmoe_layer(std::size_t index) const {
  if (index >= mmoe_layers()) throw std::out_of_range("MMoE layer index");
  const auto& b = blocks_[index / 2];
  return index % 2 == 0 ? *b.moe_fc1 : *b.moe_fc2;
}

std::vector<NamedTensor> ToyLM::core_parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out{{prefix + "embedding", embedding_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = prefix + "block" + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "attn_gain", b.attn_gain},
                           {p + "wq", b.wq},
                           {p + "wk", b.wk},
                           {p + "wv", b.wv},
                           {p + "wo", b.wo},
                           {p + "mlp_gain", b.mlp_gain},
                           {p + "fc1", b.fc1},
                           {p + "b1", b.b1},
                           {p + "fc2", b.fc2},
                           {p + "b2", b.b2}});
  }
  out.push_back({prefix + "final_gain", final_gain_});
  out.push_back({prefix + "head", head_});
  return out;
}

std::vector<NamedTensor> ToyLM::mmoe_parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    if (!b.moe_fc1) continue;
    const std::string p = prefix + "block" + std::to_string(l) + ".";
    auto a = b.moe_fc1->adapter_parameters(p + "fc1.");
    auto c = b.moe_fc2->adapter_parameters(p + "fc2.");
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

double sequence_nll(const Tensor& logits, std::span<const int> targets) {
  return cross_entropy(logits, targets, Reduction::sum).item();
}

}  // namespace cotr_moe::stack
