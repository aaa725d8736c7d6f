// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cotr_moe/config.hpp"
#include "cotr_moe/dataset.hpp"
#include "cotr_moe/parameters.hpp"
#include "cotr_moe/token_reduction.hpp"
#include "cotr_moe/toy_lm.hpp"
#include "cotr_moe/vision.hpp"

namespace cotr_moe::stack {

// concat: expert tokens are joined channel-wise and projected (stages 1-2).
// reduced: token reduction runs first, MMoE adapters are installed (stage 3).
enum class Wiring { concat, reduced };

std::string to_string(Wiring wiring);
Wiring parse_wiring(const std::string& text);
Wiring wiring_for_stage(int stage);

// pass_through replaces token reduction with Ī_i = I_i. Test double only.
enum class ReductionKind { cotr, pass_through };

struct ModelForward {
  Tensor logits;  // one row per continuation token plus one
  RoutingTrace routing;
  std::size_t visual_positions = 0;
  std::size_t text_positions = 0;
};

class MultimodalModel {
 public:
  // Every parameter group is initialised from its own seed derived from
  // config.seed, so a group's initial values do not depend on the wiring.
  MultimodalModel(const RunConfig& config, Wiring wiring);
  MultimodalModel(const MultimodalModel&) = delete;
  MultimodalModel& operator=(const MultimodalModel&) = delete;
  MultimodalModel(MultimodalModel&&) = default;
  MultimodalModel& operator=(MultimodalModel&&) = default;

  const RunConfig& config() const { return config_; }
  Wiring wiring() const { return wiring_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  std::size_t parameter_count() const { return store_.count(); }

  const ToyLM& lm() const { return lm_; }
  const cotr::VisualProjector& projector() const { return projector_; }
  const std::vector<SyntheticVisionExpert>& vision_experts() const { return experts_; }
  const cotr::CotrParams* reduction_params() const { return cotr_ ? &*cotr_ : nullptr; }
  cotr::CotrOptions reduction_options() const;

  void set_reduction(ReductionKind kind);

  cotr::VisualTokenSet vision_tokens(const Descriptor& d) const;
  std::optional<Tensor> text_tokens(const std::vector<int>& instruction) const;
  // Visual positions handed to the LM: N_i × d_LLM (concat) or N^V × d_LLM.
  Tensor encode_visual(const Descriptor& d, const std::optional<Tensor>& text) const;

  // Runs [visual ; instruction ; continuation] and returns the logits that
  // predict continuation[0..] and the token after it.
  ModelForward forward(const Descriptor& d, const std::vector<int>& instruction,
                       const std::vector<int>& continuation) const;

  // Mean cross-entropy over the response tokens.
  Tensor response_loss(const SyntheticSample& sample, RoutingTrace* trace = nullptr) const;

  // Greedy decoding; stops after emitting the end token or max_len tokens.
  std::vector<int> generate(const Descriptor& d, const std::vector<int>& instruction, std::size_t max_len) const;

 private:
  RunConfig config_;
  Wiring wiring_;
  ReductionKind reduction_ = ReductionKind::cotr;
  std::vector<SyntheticVisionExpert> experts_;
  cotr::VisualProjector projector_;
  std::optional<cotr::CotrParams> cotr_;
  ToyLM lm_;
  ParameterStore store_;
};

}  // namespace cotr_moe::stack
