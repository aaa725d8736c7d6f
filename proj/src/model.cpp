// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/model.hpp"

#include <stdexcept>

namespace cotr_moe::stack {

std::string to_string(Wiring wiring) { return wiring == Wiring::concat ? "concat" : "reduced"; }

Wiring parse_wiring(const std::string& text) {
  if (text == "concat") return Wiring::concat;
  if (text == "reduced") return Wiring::reduced;
  throw std::invalid_argument("unknown wiring '" + text + "'");
}

Wiring wiring_for_stage(int stage) {
  if (stage < 1 || stage > 3) throw std::invalid_argument("stage must be 1, 2 or 3");
  return stage == 3 ? Wiring::reduced : Wiring::concat;
}

MultimodalModel::MultimodalModel(const RunConfig& config, Wiring wiring) : config_(config), wiring_(wiring) {
  config_.validate();
  if (wiring == Wiring::concat && !config_.vision.equal_lengths()) {
    throw ConfigError("channel-wise concatenation needs equal token counts across vision experts");
  }
  const std::uint64_t seed = config_.seed;
  const std::size_t d = config_.lm.width;

  Rng lm_rng(derive_seed(seed, "llm"));
  lm_ = ToyLM(config_.lm, lm_rng);
  store_.add(ParamGroup::llm, lm_.core_parameters("llm."));

  for (std::size_t e = 0; e < config_.vision.experts.size(); ++e) {
    Rng rng(derive_seed(seed, "vision" + std::to_string(e)));
    experts_.emplace_back(e, config_.vision.experts[e], rng);
    store_.add(ParamGroup::vision, experts_.back().parameters("vision.expert" + std::to_string(e) + "."));
  }

  Rng proj_rng(derive_seed(seed, "projector"));
  projector_ = cotr::VisualProjector::init(config_.vision.total_width(), d, proj_rng);
  store_.add(ParamGroup::projector, projector_.parameters("projector."));

  if (wiring == Wiring::reduced) {
    Rng cotr_rng(derive_seed(seed, "cotr"));
    cotr::CotrConfig cc;
    cc.experts = config_.vision.experts;
    cc.queries = config_.reduction.queries;
    cc.score_width = config_.reduction.score_width;
    cc.text_width = d;
    cotr_ = cotr::CotrParams::init(cc, cotr_rng);
    store_.add(ParamGroup::cotr, cotr_->parameters("cotr."));

    Rng moe_rng(derive_seed(seed, "mmoe"));
    lm_.install_mmoe(config_.mmoe, 2 * d, moe_rng);
    store_.add(ParamGroup::mmoe, lm_.mmoe_parameters("mmoe."));
  }
}

cotr::CotrOptions MultimodalModel::reduction_options() const {
  cotr::CotrOptions o;
  o.order = config_.reduction.order;
  o.scale_width = config_.reduction.scale_width;
  return o;
}

void MultimodalModel::set_reduction(ReductionKind kind) {
  if (kind == ReductionKind::pass_through && !config_.vision.equal_lengths()) {
    throw ConfigError("pass-through reduction needs equal token counts across vision experts");
  }
  reduction_ = kind;
}

cotr::VisualTokenSet MultimodalModel::vision_tokens(const Descriptor& d) const {
  cotr::VisualTokenSet set;
  for (const auto& e : experts_) set.experts.push_back(e.encode(d));
  return set;
}

std::optional<Tensor> MultimodalModel::text_tokens(const std::vector<int>& instruction) const {
  if (instruction.empty()) return std::nullopt;
  return lm_.embed(instruction);
}

Tensor MultimodalModel::encode_visual(const Descriptor& d, const std::optional<Tensor>& text) const {
  const cotr::VisualTokenSet tokens = vision_tokens(d);
  if (wiring_ == Wiring::concat || reduction_ == ReductionKind::pass_through) {
    return cotr::concat_and_project(tokens.experts, projector_);
  }
  return cotr::cotr_forward(tokens, text, *cotr_, projector_, reduction_options()).projected;
}

ModelForward MultimodalModel::forward(const Descriptor& d, const std::vector<int>& instruction,
                                      const std::vector<int>& continuation) const {
  const std::optional<Tensor> text = text_tokens(instruction);
  const Tensor visual = encode_visual(d, text);
  std::vector<Tensor> parts{visual};
  if (text) parts.push_back(*text);
  if (!continuation.empty()) parts.push_back(lm_.embed(continuation));
  const Tensor inputs = parts.size() == 1 ? visual : concat(parts, 0);

  ModelForward out;
  out.visual_positions = visual.rows();
  out.text_positions = instruction.size();
  const std::size_t from = out.visual_positions + out.text_positions - 1;
  if (lm_.has_mmoe()) {
    const moe::RoutingContext ctx = moe::pool_context(visual, text, lm_.width());
    out.logits = lm_.forward(inputs, &ctx, &out.routing, from);
  } else {
    out.logits = lm_.forward(inputs, nullptr, nullptr, from);
  }
  return out;
}

Tensor MultimodalModel::response_loss(const SyntheticSample& sample, RoutingTrace* trace) const {
  if (sample.response.empty()) throw std::invalid_argument("sample has an empty response");
  const std::vector<int> prefix(sample.response.begin(), sample.response.end() - 1);
  ModelForward f = forward(sample.descriptor, sample.instruction, prefix);
  if (trace) *trace = std::move(f.routing);
  return cross_entropy(f.logits, sample.response, Reduction::mean);
}

std::vector<int> MultimodalModel::generate(const Descriptor& d, const std::vector<int>& instruction,
                                           std::size_t max_len) const {
  std::vector<int> out;
  while (out.size() < max_len) {
    const ModelForward f = forward(d, instruction, out);
    const std::size_t last = f.logits.rows() - 1;
    const std::size_t V = f.logits.cols();
    std::size_t best = 0;
    for (std::size_t v = 1; v < V; ++v) {
      if (f.logits.at(last, v) > f.logits.at(last, best)) best = v;
    }
    out.push_back(static_cast<int>(best));
    if (static_cast<int>(best) == vocab::kEnd) break;
  }
  return out;
}

}  // namespace cotr_moe::stack
