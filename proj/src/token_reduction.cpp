// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/token_reduction.hpp"

#include <cmath>
#include <stdexcept>

namespace cotr_moe::cotr {

namespace {

void require_width(const Tensor& t, std::size_t width, const std::string& what) {
  if (t.rank() != 2 || t.cols() != width) {
    throw ShapeError(what + ": expected width " + std::to_string(width) + ", got " + shape_string(t.shape()));
  }
}

}  // namespace

std::string to_string(ScaleOrder order) {
  return order == ScaleOrder::pre_softmax ? "standard" : "literal-eq6";
}

ScaleOrder parse_scale_order(const std::string& text) {
  if (text == "standard") return ScaleOrder::pre_softmax;
  if (text == "literal-eq6") return ScaleOrder::post_softmax;
  throw std::invalid_argument("unknown scoring mode '" + text + "' (expected standard or literal-eq6)");
}

std::string to_string(ScaleWidth width) { return width == ScaleWidth::score_width ? "score" : "expert"; }

ScaleWidth parse_scale_width(const std::string& text) {
  if (text == "score") return ScaleWidth::score_width;
  if (text == "expert") return ScaleWidth::expert_width;
  throw std::invalid_argument("unknown scale width '" + text + "' (expected score or expert)");
}

void VisualTokenSet::validate() const {
  if (experts.empty()) throw ShapeError("visual token set needs at least one expert");
  for (const auto& t : experts) {
    if (!t.defined() || t.rank() != 2) throw ShapeError("visual tokens must be rank-2 matrices");
  }
}

std::size_t QueryBank::length() const {
  if (queries.empty()) throw ShapeError("query bank is empty");
  return queries.front().rows();
}

void QueryBank::validate() const {
  const std::size_t n = length();
  for (const auto& q : queries) {
    if (q.rank() != 2 || q.rows() != n) throw ShapeError("all queries must share the same row count");
  }
}

std::size_t ScoreProjections::score_width() const { return text.cols(); }

VisualProjector VisualProjector::init(std::size_t in_width, std::size_t out_width, Rng& rng) {
  VisualProjector p;
  p.w1 = xavier_uniform(in_width, out_width, rng);
  p.b1 = Tensor::zeros({1, out_width});
  p.w2 = xavier_uniform(out_width, out_width, rng);
  p.b2 = Tensor::zeros({1, out_width});
  return p;
}

Tensor VisualProjector::forward(const Tensor& x) const { return linear(gelu(linear(x, w1, b1)), w2, b2); }

std::vector<NamedTensor> VisualProjector::parameters(const std::string& prefix) const {
  return {{prefix + "w1", w1}, {prefix + "b1", b1}, {prefix + "w2", w2}, {prefix + "b2", b2}};
}

CotrParams CotrParams::init(const CotrConfig& config, Rng& rng) {
  if (config.experts.empty()) throw std::invalid_argument("token reduction needs at least one expert");
  if (config.queries == 0 || config.score_width == 0) throw std::invalid_argument("query count and score width must be positive");
  CotrParams p;
  for (const auto& e : config.experts) p.queries.queries.push_back(random_normal({config.queries, e.width}, rng, 0.02));
  for (const auto& e : config.experts) p.projections.query.push_back(xavier_uniform(e.width, config.score_width, rng));
  for (const auto& e : config.experts) p.projections.key.push_back(xavier_uniform(e.width, config.score_width, rng));
  p.projections.text = xavier_uniform(config.text_width, config.score_width, rng);
  return p;
}

std::vector<NamedTensor> CotrParams::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < queries.queries.size(); ++i) {
    const std::string e = std::to_string(i);
    out.push_back({prefix + "query" + e, queries.queries[i]});
    out.push_back({prefix + "wq" + e, projections.query[i]});
    out.push_back({prefix + "wk" + e, projections.key[i]});
  }
  out.push_back({prefix + "wt", projections.text});
  return out;
}

ProjectedOperands project_inputs(const VisualTokenSet& tokens, const QueryBank& queries,
                                 const std::optional<Tensor>& text, const ScoreProjections& projections) {
  tokens.validate();
  queries.validate();
  const std::size_t m = tokens.size();
  if (queries.queries.size() != m || projections.query.size() != m || projections.key.size() != m) {
    throw ShapeError("expert count differs between tokens, queries and projections");
  }
  const std::size_t ds = projections.score_width();
  ProjectedOperands out;
  for (std::size_t i = 0; i < m; ++i) {
    const std::string e = "expert " + std::to_string(i);
    require_width(queries.queries[i], projections.query[i].rows(), e + " query");
    require_width(tokens.experts[i], projections.key[i].rows(), e + " tokens");
    require_width(projections.query[i], ds, e + " query projection");
    require_width(projections.key[i], ds, e + " key projection");
    out.queries.push_back(matmul(queries.queries[i], projections.query[i]));
    out.keys.push_back(matmul(tokens.experts[i], projections.key[i]));
  }
  if (text) {
    require_width(*text, projections.text.rows(), "text tokens");
    out.text = matmul(*text, projections.text);
  }
  return out;
}

Tensor score_query(const Tensor& query_hat, const Tensor& key_hat) {
  if (query_hat.cols() != key_hat.cols()) throw ShapeError("score_query: width mismatch");
  return matmul(query_hat, transpose(key_hat));
}

Tensor score_self(const Tensor& key_hat) { return matmul(sum(key_hat, 0), transpose(key_hat)); }

Tensor score_cross(std::span<const Tensor> keys, std::size_t expert) {
  if (expert >= keys.size()) throw std::out_of_range("score_cross: expert index");
  const Tensor& own = keys[expert];
  std::optional<Tensor> pooled;
  for (std::size_t j = 0; j < keys.size(); ++j) {
    if (j == expert) continue;
    if (keys[j].cols() != own.cols()) throw ShapeError("score_cross: width mismatch");
    Tensor s = sum(keys[j], 0);
    pooled = pooled ? add(*pooled, s) : s;
  }
  if (!pooled) return Tensor::zeros({1, own.rows()});
  return matmul(*pooled, transpose(own));
}

Tensor score_text(const std::optional<Tensor>& text_hat, const Tensor& key_hat) {
  if (!text_hat) return Tensor::zeros({1, key_hat.rows()});
  if (text_hat->cols() != key_hat.cols()) throw ShapeError("score_text: width mismatch");
  return matmul(sum(*text_hat, 0), transpose(key_hat));
}

Tensor attention_weights(const Tensor& s_query, const Tensor& s_self, const Tensor& s_cross, const Tensor& s_text,
                         double scale_width, ScaleOrder order) {
  const Shape row{1, s_query.cols()};
  if (s_self.shape() != row || s_cross.shape() != row || s_text.shape() != row) {
    throw ShapeError("attention_weights: per-token score rows must be " + shape_string(row));
  }
  if (!(scale_width > 0.0)) throw std::invalid_argument("attention_weights: scale width must be positive");
  const Tensor total = add(s_query, add(add(s_self, s_cross), s_text));
  const double inv = 1.0 / std::sqrt(scale_width);
  switch (order) {
    case ScaleOrder::pre_softmax:
      return softmax(scale(total, inv), 1);
    case ScaleOrder::post_softmax:
      return scale(softmax(total, 1), inv);
  }
  throw std::invalid_argument("attention_weights: invalid scale order");
}

Tensor consolidate(const Tensor& alpha, const Tensor& tokens) {
  if (alpha.cols() != tokens.rows()) {
    throw ShapeError("consolidate: " + shape_string(alpha.shape()) + " weights for " + shape_string(tokens.shape()) +
                     " tokens");
  }
  return matmul(alpha, tokens, SumOrder::canonical);
}

Tensor concat_and_project(std::span<const Tensor> consolidated, const VisualProjector& projector) {
  if (consolidated.empty()) throw ShapeError("concat_and_project: no inputs");
  const std::size_t rows = consolidated.front().rows();
  for (const auto& t : consolidated) {
    if (t.rows() != rows) throw ShapeError("concat_and_project: row counts differ across experts");
  }
  return projector.forward(concat(std::vector<Tensor>(consolidated.begin(), consolidated.end()), 1));
}

ConsolidatedTokens cotr_forward(const VisualTokenSet& tokens, const std::optional<Tensor>& text,
                                const CotrParams& params, const VisualProjector& projector,
                                const CotrOptions& options) {
  const ProjectedOperands ops = project_inputs(tokens, params.queries, text, params.projections);
  ConsolidatedTokens out;
  const std::size_t m = tokens.size();
  for (std::size_t i = 0; i < m; ++i) {
    const Tensor& key = ops.keys[i];
    const Shape row{1, key.rows()};
    const Tensor sq = score_query(ops.queries[i], key);
    const Tensor ss = options.terms.self ? score_self(key) : Tensor::zeros(row);
    const Tensor sc = options.terms.cross ? score_cross(ops.keys, i) : Tensor::zeros(row);
    const Tensor st = options.terms.text ? score_text(ops.text, key) : Tensor::zeros(row);
    const double width = options.scale_width == ScaleWidth::score_width
                             ? static_cast<double>(params.projections.score_width())
                             : static_cast<double>(tokens.experts[i].cols());
    Tensor alpha = attention_weights(sq, ss, sc, st, width, options.order);
    out.per_expert.push_back(consolidate(alpha, tokens.experts[i]));
    out.attention.push_back(std::move(alpha));
  }
  out.concatenated = concat(out.per_expert, 1);
  if (out.concatenated.cols() != projector.in_width()) {
    throw ShapeError("projector expects width " + std::to_string(projector.in_width()) + ", got " +
                     std::to_string(out.concatenated.cols()));
  }
  out.projected = projector.forward(out.concatenated);
  return out;
}

}  // namespace cotr_moe::cotr
