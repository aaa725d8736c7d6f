// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/parameters.hpp"

#include <stdexcept>

namespace cotr_moe {

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::llm:
      return "llm";
    case ParamGroup::vision:
      return "vision";
    case ParamGroup::projector:
      return "projector";
    case ParamGroup::cotr:
      return "cotr";
    case ParamGroup::mmoe:
      return "mmoe";
  }
  return "?";
}

ParamGroup parse_param_group(const std::string& text) {
  for (auto g : kAllGroups) {
    if (to_string(g) == text) return g;
  }
  throw std::invalid_argument("unknown parameter group '" + text + "'");
}

void ParameterStore::add(const std::string& name, ParamGroup group, Tensor tensor) {
  if (!tensor.is_leaf()) throw std::invalid_argument("parameter " + name + " is not a leaf tensor");
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
  index_[name] = entries_.size();
  entries_.push_back({name, group, std::move(tensor)});
}

void ParameterStore::add(ParamGroup group, const std::vector<NamedTensor>& tensors) {
  for (const auto& t : tensors) add(t.name, group, t.tensor);
}

std::optional<ParameterStore::Entry> ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return entries_[it->second];
}

std::vector<ParameterStore::Entry> ParameterStore::group(ParamGroup group) const {
  std::vector<Entry> out;
  for (const auto& e : entries_) {
    if (e.group == group) out.push_back(e);
  }
  return out;
}

bool ParameterStore::has_group(ParamGroup group) const {
  for (const auto& e : entries_) {
    if (e.group == group) return true;
  }
  return false;
}

std::size_t ParameterStore::count(std::optional<ParamGroup> group) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (!group || e.group == *group) n += e.tensor.numel();
  }
  return n;
}

void ParameterStore::set_trainable(ParamGroup group, bool on) {
  for (auto& e : entries_) {
    if (e.group == group) e.tensor.set_requires_grad(on);
  }
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::map<std::string, std::vector<double>> ParameterStore::snapshot() const {
  std::map<std::string, std::vector<double>> out;
  for (const auto& e : entries_) out[e.name] = std::vector<double>(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

}  // namespace cotr_moe
