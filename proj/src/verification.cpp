// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/verification.hpp"

#include <functional>
#include <map>

#include "cotr_moe/mmoe.hpp"
#include "cotr_moe/random.hpp"
#include "cotr_moe/token_reduction.hpp"

namespace cotr_moe::verification {

namespace {

std::size_t extent(Rng& rng, std::size_t max_extent) { return 1 + rng.below(max_extent); }

}  // namespace

std::vector<NamedReport> tensor_op_suite(std::uint64_t seed, std::size_t max_extent, const GradCheckOptions& options) {
  Rng rng(seed);
  std::vector<NamedReport> out;
  auto check = [&](const std::string& name, std::vector<NamedTensor> params, std::function<Tensor()> op) {
    Rng weights(derive_seed(seed, name));
    const Tensor probe = op();
    const Tensor r = random_normal(probe.shape(), weights, 1.0);
    out.push_back({name, finite_diff_check([&] { return sum_all(mul(op(), r)); }, params, options)});
  };

  const std::size_t m = extent(rng, max_extent), k = extent(rng, max_extent), n = extent(rng, max_extent);
  Tensor a = random_normal({m, k}, rng, 1.0), b = random_normal({k, n}, rng, 1.0);
  check("matmul", {{"a", a}, {"b", b}}, [&] { return matmul(a, b); });
  check("matmul_canonical", {{"a", a}, {"b", b}}, [&] { return matmul(a, b, SumOrder::canonical); });
  check("transpose", {{"a", a}}, [&] { return transpose(a); });

  const std::size_t r = extent(rng, max_extent), c = extent(rng, max_extent);
  Tensor x = random_normal({r, c}, rng, 1.0), y = random_normal({r, c}, rng, 1.0);
  Tensor row = random_normal({1, c}, rng, 1.0), col = random_normal({r, 1}, rng, 1.0);
  check("add", {{"x", x}, {"row", row}}, [&] { return add(x, row); });
  check("sub", {{"x", x}, {"col", col}}, [&] { return sub(x, col); });
  check("mul", {{"x", x}, {"y", y}}, [&] { return mul(x, y); });
  check("mul_broadcast", {{"x", x}, {"row", row}}, [&] { return mul(x, row); });
  check("scale", {{"x", x}}, [&] { return scale(x, -1.7); });
  check("concat_rows", {{"x", x}, {"y", y}}, [&] { return concat({x, y}, 0); });
  check("concat_cols", {{"x", x}, {"y", y}}, [&] { return concat({x, y}, 1); });
  const std::size_t r0 = rng.below(r), c0 = rng.below(c);
  check("slice_rows", {{"x", x}}, [&] { return slice_rows(x, r0, r); });
  check("slice_cols", {{"x", x}}, [&] { return slice_cols(x, c0, c); });
  std::vector<int> idx;
  for (std::size_t i = 0; i < 1 + rng.below(max_extent); ++i) idx.push_back(static_cast<int>(rng.below(r)));
  check("gather_rows", {{"x", x}}, [&] { return gather_rows(x, idx); });
  check("sum_rows", {{"x", x}}, [&] { return sum(x, 0); });
  check("sum_cols", {{"x", x}}, [&] { return sum(x, 1); });
  check("mean", {{"x", x}}, [&] { return mean(x, 0); });
  check("sum_all", {{"x", x}}, [&] { return sum_all(x); });
  check("softmax_rows", {{"x", x}}, [&] { return softmax(x, 1); });
  check("softmax_cols", {{"x", x}}, [&] { return softmax(x, 0); });
  check("gelu", {{"x", x}}, [&] { return gelu(x); });
  check("tanh", {{"x", x}}, [&] { return cotr_moe::tanh(x); });
  check("sigmoid", {{"x", x}}, [&] { return sigmoid(x); });
  Tensor gain = random_uniform({1, c}, rng, 0.5, 1.5);
  check("rms_norm", {{"x", x}, {"gain", gain}}, [&] { return rms_norm(x, gain); });
  Tensor w = random_normal({c, k}, rng, 0.5), bias = random_normal({1, k}, rng, 0.5);
  check("linear", {{"x", x}, {"w", w}, {"b", bias}}, [&] { return linear(x, w, bias); });
  std::vector<int> targets;
  for (std::size_t i = 0; i < r; ++i) targets.push_back(static_cast<int>(rng.below(c)));
  check("cross_entropy_mean", {{"x", x}}, [&] { return cross_entropy(x, targets, Reduction::mean); });
  check("cross_entropy_sum", {{"x", x}}, [&] { return cross_entropy(x, targets, Reduction::sum); });
  // The hard branch is recomputed from the same perturbed input, so the
  // value tracks the surrogate and differences see its slope.
  check("straight_through", {{"y", y}}, [&] { return straight_through(detach(mul(y, y)), mul(y, y)); });
  return out;
}

GradCheckReport cotr_suite(const RunConfig& config, std::uint64_t seed, const GradCheckOptions& options) {
  Rng rng(seed);
  cotr::CotrConfig cc;
  cc.experts = config.vision.experts;
  cc.queries = config.reduction.queries;
  cc.score_width = config.reduction.score_width;
  cc.text_width = config.lm.width;
  const cotr::CotrParams params = cotr::CotrParams::init(cc, rng);
  const cotr::VisualProjector projector = cotr::VisualProjector::init(config.vision.total_width(), config.lm.width, rng);
  cotr::VisualTokenSet tokens;
  for (const auto& e : config.vision.experts) tokens.experts.push_back(random_normal({e.tokens, e.width}, rng, 1.0));
  const std::optional<Tensor> text = random_normal({6, config.lm.width}, rng, 1.0);
  cotr::CotrOptions options_cotr;
  options_cotr.order = config.reduction.order;
  options_cotr.scale_width = config.reduction.scale_width;

  const Tensor probe = cotr::cotr_forward(tokens, text, params, projector, options_cotr).projected;
  const Tensor weights = random_normal(probe.shape(), rng, 1.0 / static_cast<double>(probe.numel()));
  auto loss = [&] {
    return sum_all(mul(cotr::cotr_forward(tokens, text, params, projector, options_cotr).projected, weights));
  };
  std::vector<NamedTensor> all = params.parameters("cotr.");
  for (auto& p : projector.parameters("projector.")) all.push_back(p);
  return finite_diff_check(loss, all, options);
}

GradCheckReport mmoe_suite(const RunConfig& config, std::uint64_t seed, const GradCheckOptions& options) {
  Rng rng(seed);
  const std::size_t din = config.lm.width, dout = config.lm.mlp_hidden, ctx_width = 2 * config.lm.width;
  moe::MmoeLayer layer =
      moe::MmoeLayer::wrap(xavier_uniform(din, dout, rng), Tensor::zeros({1, dout}), config.mmoe, ctx_width, rng);
  layer.general.up = random_normal({config.mmoe.rank, dout}, rng, 0.1);
  for (auto& e : layer.experts) e.up = random_normal({config.mmoe.rank, dout}, rng, 0.1);
  const Tensor x = random_normal({5, din}, rng, 1.0);
  moe::RoutingContext ctx;
  ctx.visual = random_normal({1, config.lm.width}, rng, 1.0);
  ctx.text = random_normal({1, config.lm.width}, rng, 1.0);
  const Tensor weights = random_normal({5, dout}, rng, 1.0 / static_cast<double>(5 * dout));
  auto loss = [&] { return sum_all(mul(layer.soft_forward(x, ctx), weights)); };
  return finite_diff_check(loss, layer.adapter_parameters("mmoe."), options);
}

std::vector<std::pair<std::string, double>> worst_by_group(const GradCheckReport& report) {
  std::map<std::string, double> worst;
  for (const auto& e : report.entries) {
    const auto dot = e.name.rfind('.');
    const std::string group = dot == std::string::npos ? e.name : e.name.substr(0, dot);
    worst[group] = std::max(worst[group], e.max_rel_error);
  }
  return {worst.begin(), worst.end()};
}

}  // namespace cotr_moe::verification
