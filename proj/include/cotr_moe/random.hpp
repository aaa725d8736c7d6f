// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "cotr_moe/tensor.hpp"

namespace cotr_moe {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

// Independent stream for a named component, so adding a component never
// perturbs the initialisation of the others.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

// mt19937_64 with distribution code written out, so draws are identical
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t below(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Tensor random_normal(Shape shape, Rng& rng, double stddev);
Tensor random_uniform(Shape shape, Rng& rng, double lo, double hi);
// Glorot-uniform weight of shape fan_in × fan_out.
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

}  // namespace cotr_moe
