// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cotr_moe/gradcheck.hpp"
#include "cotr_moe/random.hpp"
#include "cotr_moe/tensor.hpp"

// Conditional token reduction: each vision expert's token matrix is
// consolidated into a fixed number of tokens by attention whose scores mix a
// learnable query, the expert's own token similarity, similarity to the
// other experts' tokens and similarity to the instruction text.
namespace cotr_moe::cotr {

// Where the 1/sqrt(d) temperature is applied relative to the softmax.
// `pre_softmax` is the usual scaled dot-product form (rows sum to one);
// `post_softmax` divides the normalised weights, so rows sum to 1/sqrt(d).
enum class ScaleOrder { pre_softmax, post_softmax };

// Which width supplies d in 1/sqrt(d).
enum class ScaleWidth { score_width, expert_width };

std::string to_string(ScaleOrder order);
// Accepts the CLI spellings "standard" and "literal-eq6".
ScaleOrder parse_scale_order(const std::string& text);
std::string to_string(ScaleWidth width);
ScaleWidth parse_scale_width(const std::string& text);

struct ExpertGeometry {
  std::size_t tokens = 36;
  std::size_t width = 16;
};

// One token matrix per vision expert, N_i × d_i.
struct VisualTokenSet {
  std::vector<Tensor> experts;

  std::size_t size() const { return experts.size(); }
  void validate() const;
};

// Learnable queries, one N × d_i matrix per expert with a shared N.
struct QueryBank {
  std::vector<Tensor> queries;

  std::size_t length() const;
  void validate() const;
};

struct ScoreProjections {
  std::vector<Tensor> query;  // d_i × d_s
  std::vector<Tensor> key;    // d_i × d_s, reused for cross-expert terms
  Tensor text;                // d_T × d_s

  std::size_t score_width() const;
};

struct ProjectedOperands {
  std::vector<Tensor> queries;  // N × d_s
  std::vector<Tensor> keys;     // N_i × d_s
  std::optional<Tensor> text;   // N_T × d_s, absent when there is no text
};

// Score terms that enter the total score. Disabling self, cross and text
// leaves plain query cross-attention.
struct ScoreTerms {
  bool self = true;
  bool cross = true;
  bool text = true;
};

struct CotrOptions {
  ScaleOrder order = ScaleOrder::pre_softmax;
  ScaleWidth scale_width = ScaleWidth::score_width;
  ScoreTerms terms;
};

// 2-layer GELU MLP from concatenated expert widths to the LM width.
struct VisualProjector {
  Tensor w1, b1, w2, b2;

  static VisualProjector init(std::size_t in_width, std::size_t out_width, Rng& rng);
  std::size_t in_width() const { return w1.rows(); }
  std::size_t out_width() const { return w2.cols(); }
  Tensor forward(const Tensor& x) const;
  std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

struct CotrConfig {
  std::vector<ExpertGeometry> experts;
  std::size_t queries = 8;
  std::size_t score_width = 32;
  std::size_t text_width = 32;
};

struct CotrParams {
  QueryBank queries;
  ScoreProjections projections;

  // Queries ~ N(0, 0.02²), projections Glorot-uniform.
  static CotrParams init(const CotrConfig& config, Rng& rng);
  std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

struct ConsolidatedTokens {
  std::vector<Tensor> attention;   // α_i, N × N_i
  std::vector<Tensor> per_expert;  // Ī_i, N × d_i
  Tensor concatenated;             // N × Σd_i
  Tensor projected;                // N × d_LLM
};

ProjectedOperands project_inputs(const VisualTokenSet& tokens, const QueryBank& queries,
                                 const std::optional<Tensor>& text, const ScoreProjections& projections);

// N × N_i: ⟨q̂_a, k̂_b⟩.
Tensor score_query(const Tensor& query_hat, const Tensor& key_hat);
// 1 × N_i: column sums of the expert's Gram matrix.
Tensor score_self(const Tensor& key_hat);
// 1 × N_i: Σ_{j≠i} Σ_a ⟨k̂_j[a], k̂_i[b]⟩; zero row when there is one expert.
Tensor score_cross(std::span<const Tensor> keys, std::size_t expert);
// 1 × N_i: Σ_t ⟨t̂_t, k̂_i[b]⟩; zero row without text.
Tensor score_text(const std::optional<Tensor>& text_hat, const Tensor& key_hat);

Tensor attention_weights(const Tensor& s_query, const Tensor& s_self, const Tensor& s_cross, const Tensor& s_text,
                         double scale_width, ScaleOrder order);

// α_i · I_i, reduced over tokens in canonical order.
Tensor consolidate(const Tensor& alpha, const Tensor& tokens);

Tensor concat_and_project(std::span<const Tensor> consolidated, const VisualProjector& projector);

ConsolidatedTokens cotr_forward(const VisualTokenSet& tokens, const std::optional<Tensor>& text,
                                const CotrParams& params, const VisualProjector& projector,
                                const CotrOptions& options = {});

}  // namespace cotr_moe::cotr
