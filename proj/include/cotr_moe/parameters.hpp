// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cotr_moe/gradcheck.hpp"
#include "cotr_moe/tensor.hpp"

namespace cotr_moe {

enum class ParamGroup { llm, vision, projector, cotr, mmoe };

inline constexpr ParamGroup kAllGroups[] = {ParamGroup::llm, ParamGroup::vision, ParamGroup::projector,
                                            ParamGroup::cotr, ParamGroup::mmoe};

std::string to_string(ParamGroup group);
ParamGroup parse_param_group(const std::string& text);

// Named, grouped handles onto model parameters, in registration order.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    ParamGroup group;
    Tensor tensor;
  };

  void add(const std::string& name, ParamGroup group, Tensor tensor);
  void add(ParamGroup group, const std::vector<NamedTensor>& tensors);

  const std::vector<Entry>& entries() const { return entries_; }
  std::optional<Entry> find(const std::string& name) const;
  std::vector<Entry> group(ParamGroup group) const;
  bool has_group(ParamGroup group) const;
  std::size_t count(std::optional<ParamGroup> group = std::nullopt) const;

  void set_trainable(ParamGroup group, bool on);
  void zero_grad();

  // Deep copy of every parameter's values, keyed by name.
  std::map<std::string, std::vector<double>> snapshot() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace cotr_moe
