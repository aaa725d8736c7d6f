// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "cotr_moe/metrics.hpp"
#include "cotr_moe/random.hpp"

using namespace cotr_moe;
using namespace cotr_moe::metrics;
namespace fs = std::filesystem;

namespace {

ModelGeometry small_geometry() {
  ModelGeometry g;
  g.layers = 2;
  g.width = 32;
  g.mlp_hidden = 128;
  g.heads = 2;
  g.vocab = 64;
  g.visual_tokens = 8;
  g.text_tokens = 12;
  return g;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cotr_moe_metrics_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("token reduction ratio") {
    CHECK(token_reduction_ratio(64, 2880) == doctest::Approx(1.0 - 64.0 / 2880.0).epsilon(1e-15));
    CHECK(token_reduction_ratio(64, 2880) == doctest::Approx(0.977777).epsilon(1e-6));
    CHECK(token_reduction_ratio(576, 576) == 0.0);
    CHECK(token_reduction_ratio(1, 576) == doctest::Approx(0.998264).epsilon(1e-6));
    CHECK_THROWS(token_reduction_ratio(1, 0));
    CHECK_THROWS(token_reduction_ratio(0, 10));
    double last = 1.0;
    for (std::size_t r = 1; r <= 2880; r += 7) {
      const double v = token_reduction_ratio(r, 2880);
      CHECK(v < last);
      CHECK(v >= 0.0);
      last = v;
    }
  }

  TEST_CASE("prefill FLOPs: hand-computed small case") {
    ModelGeometry g = small_geometry();
    const double n = 20, d = 32, f = 128, h = 2, V = 64, L = 2;
    const FlopsBreakdown b = prefill_breakdown(g);
    CHECK(b.projections == 2 * L * 4 * n * d * d);
    CHECK(b.scores == 2 * L * n * n * d);
    CHECK(b.context == 2 * L * n * n * d);
    CHECK(b.softmax == 5 * L * h * n * n);
    CHECK(b.mlp == 2 * L * 2 * n * d * f);
    CHECK(b.head == 2 * n * d * V);
    CHECK(prefill_flops(g) == b.total());
    g.gated_mlp = true;
    CHECK(prefill_breakdown(g).mlp == 2 * L * 3 * n * d * f);
  }

  TEST_CASE("prefill FLOPs grow with every dimension") {
    const ModelGeometry base = small_geometry();
    const double f0 = prefill_flops(base);
    auto bumped = [&](auto field) {
      ModelGeometry g = base;
      g.*field += 1;
      return prefill_flops(g);
    };
    CHECK(bumped(&ModelGeometry::layers) > f0);
    CHECK(bumped(&ModelGeometry::width) > f0);
    CHECK(bumped(&ModelGeometry::mlp_hidden) > f0);
    CHECK(bumped(&ModelGeometry::heads) > f0);
    CHECK(bumped(&ModelGeometry::vocab) > f0);
    CHECK(bumped(&ModelGeometry::visual_tokens) > f0);
    CHECK(bumped(&ModelGeometry::text_tokens) > f0);

    ModelGeometry none = base;
    none.layers = 0;
    const FlopsBreakdown b = prefill_breakdown(none);
    CHECK(b.total() == b.head);
    CHECK(b.head > 0.0);

    ModelGeometry invalid = base;
    invalid.width = 0;
    CHECK_THROWS(prefill_flops(invalid));
  }

  TEST_CASE("doubling the sequence at least doubles prefill cost") {
    ModelGeometry g = llama3_8b(64, 32);
    ModelGeometry g2 = g;
    g2.visual_tokens *= 2;
    g2.text_tokens *= 2;
    const double ratio = prefill_flops(g2) / prefill_flops(g);
    CHECK(ratio >= 2.0);
    CHECK(ratio < 2.1);
  }

  TEST_CASE("reduced visual tokens cut Llama-3-8B prefill cost") {
    const double full = prefill_flops(llama3_8b(2880, 32));
    const double reduced = prefill_flops(llama3_8b(64, 32));
    CHECK(1.0 - reduced / full >= 0.6383);
    CHECK(prefill_flops(llama3_8b(1, 32)) < reduced);
  }

  TEST_CASE("usage CSV round trip") {
    const UsageMatrix usage{{0.25, 0.5, 0.25}, {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}};
    const std::string text = format_usage_csv(usage);
    CHECK(text.rfind("layer,expert,frequency\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 7);
    CHECK(text.find("0,1,0.5\n") != std::string::npos);
    CHECK(parse_usage_csv(text) == usage);

    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      UsageMatrix m(1 + rng.below(5), std::vector<double>(1 + rng.below(4)));
      for (auto& row : m)
        for (auto& v : row) v = rng.uniform();
      CHECK(parse_usage_csv(format_usage_csv(m)) == m);
    }

    const fs::path dir = scratch("csv");
    export_usage_csv(usage, dir / "u.csv");
    CHECK(read_usage_csv(dir / "u.csv") == usage);
    CHECK_THROWS(export_usage_csv({}, dir / "empty.csv"));
    CHECK_FALSE(fs::exists(dir / "empty.csv"));
    CHECK_THROWS(parse_usage_csv("layer,expert,frequency\n1,0,0.5\n"));
    CHECK_THROWS(parse_usage_csv("layer,expert,frequency\n0,0,abc\n"));
    CHECK_THROWS(parse_usage_csv("wrong header\n"));
  }

  TEST_CASE("total variation") {
    CHECK(total_variation({1, 0, 0}, {0, 1, 0}) == 1.0);
    CHECK(total_variation({0.5, 0.5}, {0.5, 0.5}) == 0.0);
    CHECK(total_variation({0.2, 0.8}, {0.6, 0.4}) == doctest::Approx(0.4));
    CHECK_THROWS(total_variation({1.0}, {0.5, 0.5}));
    const std::vector<UsageMatrix> per_task{{{1, 0}, {0.5, 0.5}}, {{0, 1}, {0.5, 0.5}}, {{0.5, 0.5}, {0.4, 0.6}}};
    CHECK(max_total_variation(per_task, 0) == 1.0);
    CHECK(max_total_variation(per_task, 1) == doctest::Approx(0.1));
  }

  TEST_CASE("metrics documents are deterministic apart from the timestamp") {
    MetricsRecord r;
    r.digest = "0123456789abcdef";
    r.command = "train";
    r.stage = 1;
    r.history.push_back({0, 2.5, 2.5, std::nullopt, 0.7});
    r.history.push_back({1, 2.25, 2.2, 0.05, 0.6});
    r.balance_probe_initial = 1.2;
    r.evaluation = {{"exact_match", 0.5}};
    const auto a = metrics_json(r, "2026-01-01T00:00:00Z");
    const auto b = metrics_json(r, "2027-06-30T12:00:00Z");
    CHECK(a != b);
    CHECK(strip_volatile(a) == strip_volatile(b));
    CHECK(a.at("digest") == "0123456789abcdef");
    CHECK(a.at("history").size() == 2);

    const fs::path dir = scratch("json");
    export_metrics_json(r, dir / "m.json");
    std::ifstream in(dir / "m.json");
    CHECK(strip_volatile(nlohmann::json::parse(in)) == strip_volatile(a));

    MetricsRecord empty;
    empty.digest = r.digest;
    empty.command = "train";
    CHECK_THROWS(export_metrics_json(empty, dir / "none.json"));
    CHECK_FALSE(fs::exists(dir / "none.json"));
  }
}
