// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"

#include "cotr_moe/gradcheck.hpp"
#include "cotr_moe/random.hpp"
#include "cotr_moe/tensor.hpp"
#include "cotr_moe/verification.hpp"

using namespace cotr_moe;

namespace {

// Owning copy; spans from data() die with a temporary tensor.
std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Triple-loop product in extended precision.
std::vector<long double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<long double> out(m * n, 0.0L);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += static_cast<long double>(a.at(i, p)) * b.at(p, j);
  return out;
}

double gelu_erf(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

bool float_representable(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return static_cast<double>(static_cast<float>(x)) == x; });
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul agrees with an extended-precision triple loop") {
    PrecisionScope wide(Precision::wide);
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t m = 1 + rng.below(16), k = 1 + rng.below(16), n = 1 + rng.below(16);
      const Tensor a = random_normal({m, k}, rng, 1.0), b = random_normal({k, n}, rng, 1.0);
      const auto want = naive_matmul(a, b);
      for (auto order : {SumOrder::sequential, SumOrder::canonical}) {
        const Tensor c = matmul(a, b, order);
        REQUIRE(c.shape() == Shape{m, n});
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(c.data()[i] == doctest::Approx(static_cast<double>(want[i])).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("matmul rejects mismatched inner dimensions") {
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), ShapeError);
  }

  TEST_CASE("canonical sums do not depend on input order") {
    Rng rng(3);
    std::vector<double> v;
    for (int i = 0; i < 200; ++i) v.push_back(rng.normal() * std::pow(10.0, rng.uniform(-8.0, 8.0)));
    std::vector<double> w = v;
    const double s0 = canonical_sum(w);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> p = v;
      for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
      CHECK(canonical_sum(p) == s0);
    }
  }

  TEST_CASE("canonical matmul is invariant to a shared permutation of the inner axis") {
    // Wide precision, so the permuting gathers copy values unrounded.
    PrecisionScope wide(Precision::wide);
    Rng rng(5);
    const Tensor a = random_normal({4, 13}, rng, 1.0), b = random_normal({13, 3}, rng, 1.0);
    std::vector<int> perm(13);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[2], perm[7]);
    const Tensor bp = gather_rows(b, perm);
    const Tensor ap = transpose(gather_rows(transpose(a), perm));
    CHECK(values(matmul(a, b, SumOrder::canonical)) == values(matmul(ap, bp, SumOrder::canonical)));
  }

  TEST_CASE("standard precision rounds every result to single precision") {
    PrecisionScope standard(Precision::standard);
    Rng rng(2);
    const Tensor a = random_normal({5, 7}, rng, 1.0), b = random_normal({7, 3}, rng, 1.0);
    CHECK(float_representable(matmul(a, b).data()));
    CHECK(float_representable(softmax(a, 1).data()));
    CHECK(float_representable(gelu(a).data()));
    PrecisionScope wide(Precision::wide);
    CHECK_FALSE(float_representable(matmul(a, b).data()));
  }

  TEST_CASE("precision scopes nest and restore") {
    const Precision outer = current_precision();
    {
      PrecisionScope w(Precision::wide);
      CHECK(current_precision() == Precision::wide);
      {
        PrecisionScope s(Precision::standard);
        CHECK(current_precision() == Precision::standard);
      }
      CHECK(current_precision() == Precision::wide);
    }
    CHECK(current_precision() == outer);
  }

  TEST_CASE("broadcasting expands unit extents only") {
    const Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor row = Tensor::from({1, 3}, {10, 20, 30});
    const Tensor col = Tensor::from({2, 1}, {100, 200});
    CHECK(values(add(x, row)) == std::vector<double>{11, 22, 33, 14, 25, 36});
    CHECK(values(sub(x, col)) == std::vector<double>{-99, -98, -97, -196, -195, -194});
    CHECK(values(mul(x, row)) == std::vector<double>{10, 40, 90, 40, 100, 180});
    CHECK_THROWS_AS(add(x, Tensor::zeros({2, 2})), ShapeError);
    CHECK_THROWS_AS(add(x, Tensor::zeros({3})), ShapeError);
  }

  TEST_CASE("shapes need positive extents") {
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  }

  TEST_CASE("softmax matches an extended-precision oracle and normalises") {
    PrecisionScope wide(Precision::wide);
    Rng rng(7);
    const Tensor x = random_normal({6, 9}, rng, 4.0);
    const Tensor y = softmax(x, 1);
    for (std::size_t r = 0; r < 6; ++r) {
      long double z = 0.0L;
      for (std::size_t c = 0; c < 9; ++c) z += std::exp(static_cast<long double>(x.at(r, c)));
      double total = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        CHECK(y.at(r, c) == doctest::Approx(static_cast<double>(std::exp(static_cast<long double>(x.at(r, c))) / z)).epsilon(1e-13));
        total += y.at(r, c);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    }
    const Tensor yc = softmax(x, 0);
    for (std::size_t c = 0; c < 9; ++c) {
      double total = 0.0;
      for (std::size_t r = 0; r < 6; ++r) total += yc.at(r, c);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    }
  }

  TEST_CASE("softmax is shift invariant and survives large logits") {
    PrecisionScope wide(Precision::wide);
    const Tensor x = Tensor::from({1, 3}, {1000.0, 999.0, -1000.0});
    const Tensor y = softmax(x, 1);
    const Tensor z = softmax(Tensor::from({1, 3}, {1.0, 0.0, -1999.0}), 1);
    for (std::size_t c = 0; c < 3; ++c) CHECK(y.at(0, c) == doctest::Approx(z.at(0, c)).epsilon(1e-15));
  }

  TEST_CASE("gelu uses the tanh form, close to the exact erf form") {
    PrecisionScope wide(Precision::wide);
    for (double x = -6.0; x <= 6.0; x += 0.125) {
      const double tanh_form = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
      CHECK(gelu_tanh(x) == doctest::Approx(tanh_form).epsilon(1e-15));
      CHECK(std::fabs(gelu_tanh(x) - gelu_erf(x)) < 1e-3);
    }
  }

  TEST_CASE("rms_norm, linear and cross-entropy against direct formulas") {
    PrecisionScope wide(Precision::wide);
    Rng rng(9);
    const Tensor x = random_normal({3, 5}, rng, 1.0), gain = random_uniform({1, 5}, rng, 0.5, 2.0);
    const Tensor y = rms_norm(x, gain);
    for (std::size_t r = 0; r < 3; ++r) {
      double ms = 0.0;
      for (std::size_t c = 0; c < 5; ++c) ms += x.at(r, c) * x.at(r, c);
      ms /= 5.0;
      for (std::size_t c = 0; c < 5; ++c) {
        CHECK(y.at(r, c) == doctest::Approx(x.at(r, c) / std::sqrt(ms + 1e-6) * gain.at(0, c)).epsilon(1e-13));
      }
    }
    const Tensor w = random_normal({5, 2}, rng, 1.0), b = Tensor::from({1, 2}, {0.5, -0.25});
    const Tensor l = linear(x, w, b);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 2; ++c) {
        double acc = b.at(0, c);
        for (std::size_t k = 0; k < 5; ++k) acc += x.at(r, k) * w.at(k, c);
        CHECK(l.at(r, c) == doctest::Approx(acc).epsilon(1e-13));
      }
    const std::vector<int> targets{4, 0, 2};
    double nll = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      long double z = 0.0L;
      for (std::size_t c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(x.at(r, c)));
      nll += static_cast<double>(std::log(z)) - x.at(r, static_cast<std::size_t>(targets[r]));
    }
    CHECK(cross_entropy(x, targets, Reduction::sum).item() == doctest::Approx(nll).epsilon(1e-13));
    CHECK(cross_entropy(x, targets, Reduction::mean).item() == doctest::Approx(nll / 3.0).epsilon(1e-13));
    CHECK_THROWS(cross_entropy(x, std::vector<int>{5, 0, 0}));
    CHECK_THROWS(cross_entropy(x, std::vector<int>{0, 0}));
  }

  TEST_CASE("reductions, slicing, concatenation and gathers") {
    const Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(sum(x, 0).shape() == Shape{1, 3});
    CHECK(sum(x, 0).at(0, 2) == 9.0);
    CHECK(sum(x, 1).at(1, 0) == 15.0);
    CHECK(mean(x, 1).at(0, 0) == 2.0);
    CHECK(sum_all(x).item() == 21.0);
    CHECK(slice_rows(x, 1, 2).at(0, 1) == 5.0);
    CHECK(slice_cols(x, 1, 3).shape() == Shape{2, 2});
    CHECK(concat({x, x}, 0).shape() == Shape{4, 3});
    CHECK(concat({x, x}, 1).at(1, 4) == 5.0);
    const Tensor g = gather_rows(x, std::vector<int>{1, 1, 0});
    CHECK(g.at(0, 0) == 4.0);
    CHECK(g.at(2, 2) == 3.0);
    CHECK_THROWS(gather_rows(x, std::vector<int>{2}));
    CHECK_THROWS(slice_rows(x, 1, 1));
    CHECK_THROWS_AS(concat({x, Tensor::zeros({1, 2})}, 0), ShapeError);
    CHECK(transpose(x).at(2, 1) == 6.0);
  }

  TEST_CASE("non-finite results raise") {
    const Tensor big = Tensor::from({1, 2}, {1e200, 1e200});
    CHECK_THROWS_AS(mul(big, big), NumericError);
    CHECK_THROWS_AS(Tensor::from({1, 1}, {std::nan("")}), NumericError);
  }

  TEST_CASE("tape accumulates into leaves and rejects non-scalar losses") {
    PrecisionScope wide(Precision::wide);
    Tensor w = Tensor::parameter({1, 2}, {2.0, -3.0});
    {
      Tape tape;
      const Tensor loss = sum_all(mul(w, w));
      tape.backward(loss);
      tape.backward(loss);
    }
    CHECK(w.grad()[0] == 8.0);
    CHECK(w.grad()[1] == -12.0);
    w.zero_grad();
    {
      Tape tape;
      CHECK_THROWS_AS(tape.backward(mul(w, w)), TapeError);
    }
    {
      Tape tape;
      CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), TapeError);
    }
    CHECK_THROWS_AS(backward(sum_all(w)), TapeError);
  }

  TEST_CASE("frozen leaves receive no gradient") {
    Tensor w = Tensor::parameter({1, 2}, {1.0, 1.0});
    Tensor frozen = Tensor::from({1, 2}, {3.0, 4.0});
    {
      Tape tape;
      tape.backward(sum_all(mul(w, frozen)));
    }
    CHECK(w.has_grad());
    CHECK_FALSE(frozen.has_grad());
  }

  TEST_CASE("detach and straight-through route gradients as documented") {
    PrecisionScope wide(Precision::wide);
    Tensor a = Tensor::parameter({1, 2}, {1.0, 2.0});
    Tensor b = Tensor::parameter({1, 2}, {5.0, 7.0});
    Tensor st;
    {
      Tape tape;
      st = straight_through(a, mul(b, b));
      CHECK(st.at(0, 0) == 1.0);
      tape.backward(sum_all(add(st, detach(scale(a, 10.0)))));
    }
    CHECK_FALSE(a.has_grad());
    CHECK(b.grad()[0] == 10.0);
    CHECK(b.grad()[1] == 14.0);
  }

  TEST_CASE("finite differences agree with the tape for every op") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      for (const auto& r : verification::tensor_op_suite(seed)) {
        INFO(r.name << " seed " << seed << " worst " << r.report.worst_rel_error);
        CHECK(r.report.passed);
      }
    }
  }

  TEST_CASE("relative error uses the documented floor") {
    CHECK(relative_error(1.0, 1.0, 1e-6) == 0.0);
    CHECK(relative_error(2.0, 1.0, 1e-6) == doctest::Approx(0.5));
    CHECK(relative_error(1e-9, 0.0, 1e-6) == doctest::Approx(1e-3));
  }
}
