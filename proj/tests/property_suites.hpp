// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

// Randomised property suites shared by the unit tests and the acceptance
// binary. Each function returns the list of violated properties (empty on
// success) so callers can report or assert as they prefer.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cotr_moe/mmoe.hpp"
#include "cotr_moe/random.hpp"
#include "cotr_moe/token_reduction.hpp"

namespace cotr_moe::testing {

struct StructuralCase {
  std::vector<cotr::ExpertGeometry> experts;
  std::size_t queries = 8;
  std::size_t text_rows = 0;
  std::size_t lm_width = 32;
  std::size_t score_width = 32;
};

inline StructuralCase random_structural_case(Rng& rng) {
  static constexpr std::size_t kWidths[] = {8, 16, 24};
  static constexpr std::size_t kQueries[] = {1, 8, 64};
  StructuralCase c;
  const std::size_t m = 1 + rng.below(3);
  for (std::size_t i = 0; i < m; ++i) c.experts.push_back({1 + rng.below(49), kWidths[rng.below(3)]});
  c.queries = kQueries[rng.below(3)];
  c.text_rows = rng.below(13);
  return c;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data(), y = b.data();
  return std::equal(x.begin(), x.end(), y.begin());
}

inline bool all_zero(const Tensor& t) {
  const auto d = t.data();
  return std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; });
}

inline std::string describe(const StructuralCase& c) {
  std::string s = "m=" + std::to_string(c.experts.size()) + " N^V=" + std::to_string(c.queries) +
                  " N_T=" + std::to_string(c.text_rows) + " experts=";
  for (const auto& e : c.experts) s += "(" + std::to_string(e.tokens) + "x" + std::to_string(e.width) + ")";
  return s;
}

// Shape, normalisation, convex-hull, degenerate-term and permutation
// properties of one token-reduction configuration.
inline std::vector<std::string> check_structural_case(const StructuralCase& c, std::uint64_t seed) {
  std::vector<std::string> failures;
  auto fail = [&](const std::string& what) { failures.push_back(describe(c) + ": " + what); };
  PrecisionScope wide(Precision::wide);
  Rng rng(seed);

  cotr::CotrConfig cc;
  cc.experts = c.experts;
  cc.queries = c.queries;
  cc.score_width = c.score_width;
  cc.text_width = c.lm_width;
  const cotr::CotrParams params = cotr::CotrParams::init(cc, rng);
  std::size_t total_width = 0;
  for (const auto& e : c.experts) total_width += e.width;
  const cotr::VisualProjector projector = cotr::VisualProjector::init(total_width, c.lm_width, rng);

  cotr::VisualTokenSet tokens;
  for (const auto& e : c.experts) tokens.experts.push_back(random_normal({e.tokens, e.width}, rng, 1.0));
  std::optional<Tensor> text;
  if (c.text_rows > 0) text = random_normal({c.text_rows, c.lm_width}, rng, 1.0);

  cotr::CotrOptions options;
  const cotr::ConsolidatedTokens out = cotr::cotr_forward(tokens, text, params, projector, options);

  if (out.projected.shape() != Shape{c.queries, c.lm_width}) fail("output shape " + shape_string(out.projected.shape()));

  for (std::size_t i = 0; i < c.experts.size(); ++i) {
    const Tensor& alpha = out.attention[i];
    for (std::size_t r = 0; r < alpha.rows(); ++r) {
      double s = 0.0;
      for (std::size_t b = 0; b < alpha.cols(); ++b) s += alpha.at(r, b);
      if (std::fabs(s - 1.0) > 1e-6) fail("attention row sum " + std::to_string(s));
    }
    // Convex combination: each consolidated coordinate lies within its
    // column's input range, up to a few ulps of accumulated rounding.
    const Tensor& in = tokens.experts[i];
    const Tensor& got = out.per_expert[i];
    for (std::size_t col = 0; col < in.cols(); ++col) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo, mag = 0.0;
      for (std::size_t r = 0; r < in.rows(); ++r) {
        lo = std::min(lo, in.at(r, col));
        hi = std::max(hi, in.at(r, col));
        mag = std::max(mag, std::fabs(in.at(r, col)));
      }
      const double slack = 8.0 * static_cast<double>(in.rows()) * std::numeric_limits<double>::epsilon() * mag;
      for (std::size_t r = 0; r < got.rows(); ++r) {
        if (got.at(r, col) < lo - slack || got.at(r, col) > hi + slack) fail("consolidated value outside input bounds");
      }
    }
  }

  // Standard precision keeps the row sums within the same tolerance.
  {
    PrecisionScope standard(Precision::standard);
    const auto s = cotr::cotr_forward(tokens, text, params, projector, options);
    for (const auto& alpha : s.attention) {
      for (std::size_t r = 0; r < alpha.rows(); ++r) {
        double sum = 0.0;
        for (std::size_t b = 0; b < alpha.cols(); ++b) sum += alpha.at(r, b);
        if (std::fabs(sum - 1.0) > 1e-6) fail("single-precision attention row sum " + std::to_string(sum));
      }
    }
  }

  const cotr::ProjectedOperands ops = cotr::project_inputs(tokens, params.queries, text, params.projections);
  for (std::size_t i = 0; i < c.experts.size(); ++i) {
    if (c.experts.size() == 1 && !all_zero(cotr::score_cross(ops.keys, i))) fail("cross score non-zero with one expert");
    if (c.text_rows == 0 && !all_zero(cotr::score_text(ops.text, ops.keys[i]))) fail("text score non-zero without text");
  }

  // Permuting every expert's tokens (and the instruction rows) permutes the
  // attention columns and leaves the consolidated tokens bit-identical.
  cotr::VisualTokenSet shuffled;
  std::vector<std::vector<int>> perms;
  for (const auto& t : tokens.experts) {
    std::vector<int> p(t.rows());
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t k = p.size(); k > 1; --k) std::swap(p[k - 1], p[rng.below(k)]);
    shuffled.experts.push_back(gather_rows(t, p));
    perms.push_back(std::move(p));
  }
  std::optional<Tensor> shuffled_text;
  if (text) {
    std::vector<int> p(text->rows());
    std::iota(p.begin(), p.end(), 0);
    std::reverse(p.begin(), p.end());
    shuffled_text = gather_rows(*text, p);
  }
  const cotr::ConsolidatedTokens perm = cotr::cotr_forward(shuffled, shuffled_text, params, projector, options);
  if (!bit_equal(perm.projected, out.projected)) fail("projected output changed under token permutation");
  for (std::size_t i = 0; i < c.experts.size(); ++i) {
    if (!bit_equal(perm.per_expert[i], out.per_expert[i])) fail("consolidated tokens changed under permutation");
    const Tensor& a = out.attention[i];
    const Tensor& b = perm.attention[i];
    for (std::size_t r = 0; r < a.rows(); ++r) {
      for (std::size_t k = 0; k < perms[i].size(); ++k) {
        if (b.at(r, k) != a.at(r, static_cast<std::size_t>(perms[i][k]))) {
          fail("attention is not permutation equivariant");
          r = a.rows();
          break;
        }
      }
    }
  }
  return failures;
}

inline moe::RoutingContext random_context(Rng& rng, std::size_t width) {
  moe::RoutingContext ctx;
  ctx.visual = random_normal({1, width}, rng, 1.0);
  ctx.text = random_normal({1, width}, rng, 1.0);
  return ctx;
}

inline void randomise_up_maps(moe::MmoeLayer& layer, Rng& rng, double stddev) {
  layer.general.up = random_normal(layer.general.up.shape(), rng, stddev);
  for (auto& e : layer.experts) e.up = random_normal(e.up.shape(), rng, stddev);
}

inline double row_norm(const Tensor& t, std::size_t r) {
  double s = 0.0;
  for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
  return std::sqrt(s);
}

// Contract checks of one randomly drawn MMoE layer.
inline std::vector<std::string> check_mmoe_contract(std::uint64_t seed) {
  std::vector<std::string> failures;
  PrecisionScope wide(Precision::wide);
  Rng rng(seed);
  moe::MmoeConfig cfg;
  cfg.experts = 1 + rng.below(4);
  cfg.top_k = 1 + rng.below(cfg.experts);
  cfg.rank = 1 + rng.below(8);
  cfg.router_hidden = 4 + rng.below(12);
  const std::size_t din = 2 + rng.below(15), dout = 2 + rng.below(15), cw = 1 + rng.below(8);
  const std::size_t n = 1 + rng.below(10);
  const std::string tag = "E=" + std::to_string(cfg.experts) + " k=" + std::to_string(cfg.top_k) + ": ";
  auto fail = [&](const std::string& what) { failures.push_back(tag + what); };

  moe::MmoeLayer layer =
      moe::MmoeLayer::wrap(random_normal({din, dout}, rng, 0.5), random_normal({1, dout}, rng, 0.5), cfg, 2 * cw, rng);
  const Tensor x = random_normal({n, din}, rng, 1.0);
  const moe::RoutingContext ctx = random_context(rng, cw);
  const Tensor original = linear(x, layer.weight, layer.bias);

  // Zero-initialised up-maps: exactly the original map, in both precisions
  // and with or without a tape.
  for (auto p : {Precision::wide, Precision::standard}) {
    PrecisionScope scope(p);
    const Tensor base = linear(x, layer.weight, layer.bias);
    if (!bit_equal(layer.forward(x, ctx).output, base)) fail("zero-init layer differs from the original map");
    Tape tape;
    if (!bit_equal(layer.forward(x, ctx).output, base)) fail("zero-init layer differs under a tape");
  }

  randomise_up_maps(layer, rng, 0.5);
  const moe::MmoeOutput out = layer.forward(x, ctx);
  const Tensor general = layer.general.apply(x);
  std::vector<Tensor> expert_out;
  for (const auto& e : layer.experts) expert_out.push_back(e.apply(x));
  if (out.decisions.size() != n) fail("one decision per token expected");
  for (std::size_t r = 0; r < out.decisions.size(); ++r) {
    const auto& d = out.decisions[r];
    double s = 0.0;
    for (double p : d.probabilities) s += p;
    if (std::fabs(s - 1.0) > 1e-6) fail("routing probabilities do not sum to 1");
    if (d.selected.size() != cfg.top_k) fail("wrong number of routed experts");
    std::vector<std::size_t> sorted = d.selected;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) fail("duplicate routed expert");
    // Selected experts hold the k largest probabilities, lower index first
    // among equals.
    for (std::size_t a = 0; a < cfg.experts; ++a) {
      const bool in_a = std::find(d.selected.begin(), d.selected.end(), a) != d.selected.end();
      for (std::size_t b = 0; b < cfg.experts; ++b) {
        const bool in_b = std::find(d.selected.begin(), d.selected.end(), b) != d.selected.end();
        if (in_a && !in_b) {
          if (d.probabilities[a] < d.probabilities[b] || (d.probabilities[a] == d.probabilities[b] && a > b)) {
            fail("selection violates the top-k tie rule");
          }
        }
      }
    }
    // Term-by-term: output - original - routed mean == general expert, so
    // the general expert took part in this decision.
    for (std::size_t c = 0; c < dout; ++c) {
      double routed = 0.0;
      for (auto e : d.selected) routed += expert_out[e].at(r, c) / static_cast<double>(cfg.top_k);
      const double want = original.at(r, c) + general.at(r, c) + routed;
      if (std::fabs(out.output.at(r, c) - want) > 1e-12 * (1.0 + std::fabs(want))) fail("output differs from term-by-term oracle");
      const double residual = out.output.at(r, c) - original.at(r, c) - routed;
      if (std::fabs(residual - general.at(r, c)) > 1e-12 * (1.0 + std::fabs(general.at(r, c)))) {
        fail("general expert missing from a decision");
      }
    }
  }

  // Hard/soft consistency for k = 1.
  if (cfg.top_k == 1) {
    const Tensor soft = layer.soft_forward(x, ctx);
    for (std::size_t r = 0; r < n; ++r) {
      const auto& p = out.decisions[r].probabilities;
      const double rmax = *std::max_element(p.begin(), p.end());
      double fmax = 0.0;
      for (const auto& f : expert_out) fmax = std::max(fmax, row_norm(f, r));
      double diff = 0.0;
      for (std::size_t c = 0; c < dout; ++c) diff += std::pow(out.output.at(r, c) - soft.at(r, c), 2);
      diff = std::sqrt(diff);
      const double bound = 2.0 * (1.0 - rmax) * fmax;
      if (diff > bound + 1e-12 * (1.0 + fmax)) fail("hard/soft difference exceeds the bound");
    }
  }
  return failures;
}

}  // namespace cotr_moe::testing
