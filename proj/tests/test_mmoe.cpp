// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <map>

#include "doctest.h"

#include "cotr_moe/config.hpp"
#include "cotr_moe/mmoe.hpp"
#include "cotr_moe/verification.hpp"
#include "property_suites.hpp"

using namespace cotr_moe;

namespace {

moe::RouteDecision decision(std::vector<double> p, std::vector<std::size_t> sel) {
  moe::RouteDecision d;
  d.probabilities = std::move(p);
  d.selected = std::move(sel);
  return d;
}

// Σ_e f_e P_e · E by explicit enumeration of the batch.
double enumerate_balance(const std::vector<moe::RouteDecision>& ds, std::size_t E) {
  double total = 0.0;
  for (std::size_t e = 0; e < E; ++e) {
    std::size_t hits = 0, picks = 0;
    double p = 0.0;
    for (const auto& d : ds) {
      for (auto s : d.selected) {
        ++picks;
        if (s == e) ++hits;
      }
      p += d.probabilities[e];
    }
    total += (static_cast<double>(hits) / static_cast<double>(picks)) * (p / static_cast<double>(ds.size()));
  }
  return static_cast<double>(E) * total;
}

}  // namespace

TEST_SUITE("mmoe") {
  TEST_CASE("top-k picks the largest probabilities, lower index on ties") {
    const std::vector<double> p{0.2, 0.5, 0.3};
    CHECK(moe::top_k(p, 1) == std::vector<std::size_t>{1});
    CHECK(moe::top_k(p, 2) == std::vector<std::size_t>{1, 2});
    const std::vector<double> tie{0.25, 0.25, 0.25, 0.25};
    CHECK(moe::top_k(tie, 1) == std::vector<std::size_t>{0});
    CHECK(moe::top_k(tie, 3) == std::vector<std::size_t>{0, 1, 2});
    const std::vector<double> partial{0.1, 0.3, 0.3, 0.3};
    CHECK(moe::top_k(partial, 2) == std::vector<std::size_t>{1, 2});
    CHECK_THROWS(moe::top_k(p, 0));
    CHECK_THROWS(moe::top_k(p, 4));
  }

  TEST_CASE("router features pool rows and use zeros for absent text") {
    PrecisionScope wide(Precision::wide);
    const Tensor v = Tensor::from({3, 2}, {1.5, -2, 1.5, -2, 1.5, -2});
    const auto ctx = moe::pool_context(v, std::nullopt, 4);
    CHECK(ctx.visual.at(0, 0) == 1.5);
    CHECK(ctx.visual.at(0, 1) == -2.0);
    CHECK(testing::all_zero(ctx.text));
    CHECK(ctx.text.shape() == Shape{1, 4});

    Rng rng(4);
    const Tensor vis = random_normal({5, 3}, rng, 1.0), txt = random_normal({7, 4}, rng, 1.0);
    const auto c2 = moe::pool_context(vis, txt, 4);
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < 5; ++r) s += vis.at(r, c);
      CHECK(c2.visual.at(0, c) == doctest::Approx(s / 5.0).epsilon(1e-14));
    }
    for (std::size_t c = 0; c < 4; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < 7; ++r) s += txt.at(r, c);
      CHECK(c2.text.at(0, c) == doctest::Approx(s / 7.0).epsilon(1e-14));
    }
    const Tensor x = random_normal({2, 6}, rng, 1.0);
    const Tensor feat = moe::router_features(c2, x);
    CHECK(feat.shape() == Shape{2, 13});
    CHECK(feat.at(1, 2) == c2.visual.at(0, 2));
    CHECK(feat.at(1, 3) == c2.text.at(0, 0));
    CHECK(feat.at(1, 12) == x.at(1, 5));
    CHECK_THROWS_AS(moe::pool_context(vis, txt, 5), ShapeError);
  }

  TEST_CASE("zero router output layer gives uniform routing and the lowest indices") {
    PrecisionScope wide(Precision::wide);
    Rng rng(5);
    moe::MmoeConfig cfg;
    cfg.top_k = 2;
    auto layer = moe::MmoeLayer::wrap(random_normal({4, 6}, rng, 1.0), Tensor::zeros({1, 6}), cfg, 4, rng);
    layer.router.w2 = Tensor::zeros(layer.router.w2.shape());
    const auto out = layer.forward(random_normal({3, 4}, rng, 1.0), testing::random_context(rng, 2));
    for (const auto& d : out.decisions) {
      for (double p : d.probabilities) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
      CHECK(d.selected == std::vector<std::size_t>{0, 1});
    }
  }

  TEST_CASE("selection is invariant to a constant shift of the router logits") {
    PrecisionScope wide(Precision::wide);
    Rng rng(6);
    moe::MmoeConfig cfg;
    auto layer = moe::MmoeLayer::wrap(random_normal({4, 6}, rng, 1.0), Tensor::zeros({1, 6}), cfg, 4, rng);
    const Tensor x = random_normal({20, 4}, rng, 1.0);
    const auto ctx = testing::random_context(rng, 2);
    const auto before = layer.forward(x, ctx);
    layer.router.b2 = add(layer.router.b2, Tensor::full({1, 3}, 7.25));
    const auto after = layer.forward(x, ctx);
    for (std::size_t r = 0; r < 20; ++r) CHECK(before.decisions[r].selected == after.decisions[r].selected);
  }

  TEST_CASE("degenerate and exhaustive mixtures") {
    PrecisionScope wide(Precision::wide);
    Rng rng(7);
    const Tensor x = random_normal({4, 5}, rng, 1.0);
    const auto ctx = testing::random_context(rng, 3);
    {
      moe::MmoeConfig cfg;
      cfg.experts = 1;
      auto layer = moe::MmoeLayer::wrap(random_normal({5, 3}, rng, 1.0), random_normal({1, 3}, rng, 1.0), cfg, 6, rng);
      testing::randomise_up_maps(layer, rng, 0.3);
      const Tensor want = add(add(linear(x, layer.weight, layer.bias), layer.general.apply(x)), layer.experts[0].apply(x));
      const Tensor got = layer.forward(x, ctx).output;
      for (std::size_t k = 0; k < want.numel(); ++k) CHECK(got.data()[k] == doctest::Approx(want.data()[k]).epsilon(1e-14));
    }
    {
      moe::MmoeConfig cfg;
      cfg.top_k = 3;
      auto layer = moe::MmoeLayer::wrap(random_normal({5, 3}, rng, 1.0), random_normal({1, 3}, rng, 1.0), cfg, 6, rng);
      testing::randomise_up_maps(layer, rng, 0.3);
      Tensor mix = layer.experts[0].apply(x);
      for (std::size_t e = 1; e < 3; ++e) mix = add(mix, layer.experts[e].apply(x));
      const Tensor want = add(add(linear(x, layer.weight, layer.bias), layer.general.apply(x)), scale(mix, 1.0 / 3.0));
      const Tensor got = layer.forward(x, ctx).output;
      for (std::size_t k = 0; k < want.numel(); ++k) CHECK(got.data()[k] == doctest::Approx(want.data()[k]).epsilon(1e-13));
    }
  }

  TEST_CASE("soft mixture with uniform routing averages the experts") {
    PrecisionScope wide(Precision::wide);
    Rng rng(8);
    moe::MmoeConfig cfg;
    auto layer = moe::MmoeLayer::wrap(random_normal({5, 3}, rng, 1.0), random_normal({1, 3}, rng, 1.0), cfg, 6, rng);
    testing::randomise_up_maps(layer, rng, 0.3);
    layer.router.w2 = Tensor::zeros(layer.router.w2.shape());
    const Tensor x = random_normal({4, 5}, rng, 1.0);
    Tensor mix = layer.experts[0].apply(x);
    for (std::size_t e = 1; e < 3; ++e) mix = add(mix, layer.experts[e].apply(x));
    const Tensor want = add(add(linear(x, layer.weight, layer.bias), layer.general.apply(x)), scale(mix, 1.0 / 3.0));
    const Tensor got = layer.soft_forward(x, testing::random_context(rng, 3));
    for (std::size_t k = 0; k < want.numel(); ++k) CHECK(got.data()[k] == doctest::Approx(want.data()[k]).epsilon(1e-13));
  }

  TEST_CASE("saturated routing makes soft and hard forwards agree") {
    PrecisionScope wide(Precision::wide);
    Rng rng(9);
    moe::MmoeConfig cfg;
    auto layer = moe::MmoeLayer::wrap(random_normal({5, 3}, rng, 1.0), random_normal({1, 3}, rng, 1.0), cfg, 6, rng);
    testing::randomise_up_maps(layer, rng, 0.3);
    layer.router.w2 = Tensor::zeros(layer.router.w2.shape());
    layer.router.b2 = Tensor::from({1, 3}, {0.0, 60.0, 0.0});
    const Tensor x = random_normal({4, 5}, rng, 1.0);
    const auto ctx = testing::random_context(rng, 3);
    const Tensor hard = layer.forward(x, ctx).output;
    const Tensor soft = layer.soft_forward(x, ctx);
    for (std::size_t k = 0; k < hard.numel(); ++k) CHECK(std::fabs(hard.data()[k] - soft.data()[k]) < 1e-6);
  }

  TEST_CASE("layer contract over random draws") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      for (const auto& f : testing::check_mmoe_contract(seed)) FAIL_CHECK(f);
    }
  }

  TEST_CASE("straight-through training signal reaches the router") {
    PrecisionScope wide(Precision::wide);
    Rng rng(10);
    moe::MmoeConfig cfg;
    auto layer = moe::MmoeLayer::wrap(random_normal({5, 3}, rng, 1.0), random_normal({1, 3}, rng, 1.0), cfg, 6, rng);
    testing::randomise_up_maps(layer, rng, 0.3);
    auto params = layer.adapter_parameters("");
    for (auto& p : params) p.tensor.set_requires_grad(true);
    const Tensor x = random_normal({4, 5}, rng, 1.0);
    const auto ctx = testing::random_context(rng, 3);
    const Tensor hard = layer.forward(x, ctx).output;
    {
      Tape tape;
      const auto out = layer.forward(x, ctx);
      for (std::size_t k = 0; k < hard.numel(); ++k) CHECK(out.output.data()[k] == hard.data()[k]);
      tape.backward(sum_all(mul(out.output, out.output)));
    }
    CHECK(layer.router.w2.has_grad());
    double norm = 0.0;
    for (double g : layer.router.w2.grad()) norm += g * g;
    CHECK(norm > 0.0);
  }

  TEST_CASE("balance loss identities and enumeration oracle") {
    for (std::size_t E : {2u, 4u, 8u}) {
      std::vector<moe::RouteDecision> uniform;
      for (std::size_t e = 0; e < E; ++e) uniform.push_back(decision(std::vector<double>(E, 1.0 / static_cast<double>(E)), {e}));
      CHECK(moe::balance_loss(uniform, E) == 1.0);
      std::vector<moe::RouteDecision> collapsed;
      for (int i = 0; i < 5; ++i) {
        std::vector<double> p(E, 0.0);
        p[0] = 1.0;
        collapsed.push_back(decision(p, {0}));
      }
      CHECK(moe::balance_loss(collapsed, E) == static_cast<double>(E));
    }
    std::vector<moe::RouteDecision> three;
    for (std::size_t e = 0; e < 3; ++e) three.push_back(decision({1.0 / 3, 1.0 / 3, 1.0 / 3}, {e}));
    CHECK(moe::balance_loss(three, 3) == doctest::Approx(1.0).epsilon(1e-15));

    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t E = 1 + rng.below(5), k = 1 + rng.below(E), n = 1 + rng.below(30);
      std::vector<moe::RouteDecision> ds;
      std::vector<Tensor> probs;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> logits(E);
        for (auto& l : logits) l = rng.normal();
        const Tensor p = softmax(Tensor::from({1, E}, logits), 1);
        std::vector<double> pv(p.data().begin(), p.data().end());
        ds.push_back(decision(pv, moe::top_k(pv, k)));
        probs.push_back(p);
      }
      const double want = enumerate_balance(ds, E);
      CHECK(moe::balance_loss(ds, E) == doctest::Approx(want).epsilon(1e-12));
      CHECK(moe::balance_loss(probs, ds, E).item() == doctest::Approx(want).epsilon(1e-6));
      CHECK(moe::balance_loss(ds, E) <= static_cast<double>(E) + 1e-12);
    }
    CHECK_THROWS(moe::balance_loss(std::vector<moe::RouteDecision>{}, 3));
  }

  TEST_CASE("balance loss can fall below one for top-1 routing") {
    // Two decisions choose expert 0 at even odds and one chooses expert 1
    // with certainty: f = (2/3, 1/3), P = (1/3, 2/3), so L = 2·(4/9) = 8/9.
    const std::vector<moe::RouteDecision> ds{decision({0.5, 0.5}, {0}), decision({0.5, 0.5}, {0}), decision({0.0, 1.0}, {1})};
    CHECK(moe::balance_loss(ds, 2) == doctest::Approx(8.0 / 9.0).epsilon(1e-15));
  }

  TEST_CASE("expert usage counts, normalises and merges") {
    moe::ExpertUsage usage(3);
    CHECK_THROWS(usage.frequencies());
    for (int i = 0; i < 4; ++i) usage.record(0, decision({0, 0, 1}, {2}));
    const auto f = usage.frequencies();
    CHECK(f.size() == 1);
    CHECK(f[0] == std::vector<double>{0.0, 0.0, 1.0});

    Rng rng(12);
    moe::ExpertUsage a(3), b(3);
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> tally;
    std::vector<std::size_t> per_layer(2, 0);
    for (int i = 0; i < 10000; ++i) {
      const std::size_t layer = rng.below(2), e = rng.below(3);
      (i % 2 ? a : b).record(layer, decision({1.0 / 3, 1.0 / 3, 1.0 / 3}, {e}));
      ++tally[{layer, e}];
      ++per_layer[layer];
    }
    a.merge(b);
    const auto freq = a.frequencies();
    for (std::size_t l = 0; l < 2; ++l) {
      double row = 0.0;
      for (std::size_t e = 0; e < 3; ++e) {
        CHECK(a.count(l, e) == tally[{l, e}]);
        CHECK(freq[l][e] == static_cast<double>(tally[{l, e}]) / static_cast<double>(per_layer[l]));
        CHECK(std::fabs(freq[l][e] - 1.0 / 3.0) < 0.02);
        row += freq[l][e];
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    }

    moe::ExpertUsage two(3);
    two.record(0, decision({0.4, 0.4, 0.2}, {0, 1}));
    double s = 0.0;
    const auto two_freq = two.frequencies();
    for (double v : two_freq[0]) s += v;
    CHECK(s == 2.0);
    moe::ExpertUsage gap(3);
    gap.record(1, decision({1, 0, 0}, {0}));
    CHECK_THROWS(gap.frequencies());
  }

  TEST_CASE("soft mixture gradients over router, routed and general experts") {
    RunConfig config;
    config.lm.width = 6;
    config.lm.mlp_hidden = 10;
    config.mmoe.rank = 3;
    config.mmoe.router_hidden = 5;
    const auto report = verification::mmoe_suite(config, 21);
    INFO("worst " << report.worst_rel_error);
    CHECK(report.passed);
  }
}
