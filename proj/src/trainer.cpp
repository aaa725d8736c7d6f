// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/trainer.hpp"

#include <cmath>
#include <thread>

namespace cotr_moe::stack {

StagePlan StagePlan::for_stage(int stage) {
  StagePlan p;
  p.stage = stage;
  auto on = [&](ParamGroup g) { p.trainable[static_cast<std::size_t>(g)] = true; };
  switch (stage) {
    case 1:
      on(ParamGroup::projector);
      break;
    case 2:
      on(ParamGroup::llm);
      on(ParamGroup::vision);
      on(ParamGroup::projector);
      break;
    case 3:
      on(ParamGroup::projector);
      on(ParamGroup::cotr);
      on(ParamGroup::mmoe);
      break;
    default:
      throw std::invalid_argument("stage must be 1, 2 or 3");
  }
  return p;
}

TrainOptions options_for_stage(const RunConfig& config, int stage) {
  if (stage < 1 || stage > 3) throw std::invalid_argument("stage must be 1, 2 or 3");
  const auto i = static_cast<std::size_t>(stage - 1);
  TrainOptions o;
  o.steps = config.train.steps[i];
  o.learning_rate = config.train.learning_rate[i];
  o.batch = config.train.batch;
  o.clip = config.train.clip;
  o.balance_weight = config.train.balance_weight;
  o.seed = config.seed;
  return o;
}

std::vector<SyntheticSample> balanced_batch(const std::vector<SyntheticSample>& data, std::size_t per_task) {
  std::vector<SyntheticSample> out;
  for (auto task : kAllTasks) {
    std::size_t taken = 0;
    for (const auto& s : data) {
      if (taken == per_task) break;
      if (s.task == task) {
        out.push_back(s);
        ++taken;
      }
    }
    if (taken < per_task) throw std::invalid_argument("not enough samples of task " + to_string(task));
  }
  return out;
}

double batch_balance(const MultimodalModel& model, const std::vector<SyntheticSample>& batch) {
  const std::size_t layers = model.lm().mmoe_layers();
  if (layers == 0) throw std::logic_error("balance loss needs MMoE layers");
  std::vector<std::vector<moe::RouteDecision>> decisions(layers);
  for (const auto& s : batch) {
    RoutingTrace trace;
    model.response_loss(s, &trace);
    for (std::size_t l = 0; l < layers; ++l) {
      decisions[l].insert(decisions[l].end(), trace[l].decisions.begin(), trace[l].decisions.end());
    }
  }
  double acc = 0.0;
  for (const auto& d : decisions) acc += moe::balance_loss(d, model.config().mmoe.experts);
  return acc / static_cast<double>(layers);
}

StageReport train_stage(MultimodalModel& model, const StagePlan& plan, const std::vector<SyntheticSample>& data,
                        const TrainOptions& options) {
  if (model.wiring() != plan.wiring()) {
    throw TrainingError("stage " + std::to_string(plan.stage) + " needs " + to_string(plan.wiring()) +
                        " wiring, model has " + to_string(model.wiring()));
  }
  if (data.empty()) throw TrainingError("training data is empty");
  if (options.batch == 0) throw TrainingError("batch size must be positive");
  PrecisionScope precision(model.config().precision);

  ParameterStore& store = model.parameters();
  for (auto g : kAllGroups) store.set_trainable(g, plan.trains(g));
  const auto before = store.snapshot();

  StageReport report;
  report.stage = plan.stage;
  const bool balanced = plan.stage == 3 && model.lm().has_mmoe();
  std::vector<SyntheticSample> probe;
  if (balanced) {
    probe = balanced_batch(data, 4);
    report.balance_probe_initial = batch_balance(model, probe);
  }

  std::vector<ParameterStore::Entry> trainable;
  for (const auto& e : store.entries()) {
    if (plan.trains(e.group)) trainable.push_back(e);
  }

  Rng rng(derive_seed(options.seed, "batches" + std::to_string(plan.stage)));
  const std::size_t layers = model.lm().mmoe_layers();
  const std::size_t experts = model.config().mmoe.experts;
  for (std::size_t step = 0; step < options.steps; ++step) {
    store.zero_grad();
    StepRecord rec;
    rec.step = step;
    Tape tape;
    std::optional<Tensor> ce_sum;
    std::vector<std::vector<Tensor>> probs(layers);
    std::vector<std::vector<moe::RouteDecision>> decisions(layers);
    for (std::size_t b = 0; b < options.batch; ++b) {
      const SyntheticSample& s = data[rng.below(data.size())];
      RoutingTrace trace;
      const Tensor ce = model.response_loss(s, balanced ? &trace : nullptr);
      ce_sum = ce_sum ? add(*ce_sum, ce) : ce;
      for (std::size_t l = 0; l < trace.size(); ++l) {
        probs[l].push_back(trace[l].probabilities);
        decisions[l].insert(decisions[l].end(), trace[l].decisions.begin(), trace[l].decisions.end());
      }
    }
    const Tensor ce = scale(*ce_sum, 1.0 / static_cast<double>(options.batch));
    Tensor loss = ce;
    rec.cross_entropy = ce.item();
    if (balanced) {
      std::optional<Tensor> bal;
      for (std::size_t l = 0; l < layers; ++l) {
        const Tensor b = moe::balance_loss(probs[l], decisions[l], experts);
        bal = bal ? add(*bal, b) : b;
      }
      const Tensor mean_bal = scale(*bal, 1.0 / static_cast<double>(layers));
      rec.balance = mean_bal.item();
      loss = add(loss, scale(mean_bal, options.balance_weight));
    }
    rec.loss = loss.item();
    if (!std::isfinite(rec.loss)) {
      throw TrainingError("non-finite loss at stage " + std::to_string(plan.stage) + " step " + std::to_string(step));
    }
    tape.backward(loss);

    double sq = 0.0;
    for (const auto& e : trainable) {
      if (!e.tensor.has_grad()) continue;
      for (double g : e.tensor.grad()) sq += g * g;
    }
    rec.grad_norm = std::sqrt(sq);
    if (!std::isfinite(rec.grad_norm)) {
      throw TrainingError("non-finite gradient at stage " + std::to_string(plan.stage) + " step " +
                          std::to_string(step));
    }
    const double factor = rec.grad_norm > options.clip ? options.clip / rec.grad_norm : 1.0;
    const double step_size = options.learning_rate * factor;
    for (auto& e : trainable) {
      if (!e.tensor.has_grad()) continue;
      auto values = e.tensor.mutable_data();
      const auto grad = e.tensor.grad();
      for (std::size_t i = 0; i < values.size(); ++i) values[i] -= step_size * grad[i];
    }
    report.history.push_back(rec);
  }
  store.zero_grad();
  for (auto g : kAllGroups) store.set_trainable(g, false);

  if (balanced) report.balance_probe_final = batch_balance(model, probe);

  const auto after = store.snapshot();
  for (auto g : kAllGroups) {
    if (!store.has_group(g)) continue;
    bool changed = false;
    for (const auto& e : store.group(g)) changed = changed || before.at(e.name) != after.at(e.name);
    report.group_changed[to_string(g)] = changed;
  }
  return report;
}

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Precision precision, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  auto worker = [&](std::size_t w) {
    PrecisionScope scope(precision);
    for (std::size_t i = w; i < n; i += threads) fn(w, i);
  };
  if (threads == 1) {
    worker(0);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker, w);
  for (auto& t : pool) t.join();
}

}  // namespace

EvalReport evaluate(const MultimodalModel& model, const std::vector<SyntheticSample>& samples, std::size_t threads) {
  if (samples.empty()) throw std::invalid_argument("evaluation set is empty");
  std::vector<char> hit(samples.size(), 0);
  parallel_for(samples.size(), threads, model.config().precision, [&](std::size_t, std::size_t i) {
    const auto& s = samples[i];
    hit[i] = model.generate(s.descriptor, s.instruction, s.response.size() + 1) == s.response ? 1 : 0;
  });
  EvalReport r;
  for (auto task : kAllTasks) r.per_task[to_string(task)] = {0, 0};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& [c, t] = r.per_task[to_string(samples[i].task)];
    ++t;
    ++r.total;
    if (hit[i]) {
      ++c;
      ++r.correct;
    }
  }
  return r;
}

moe::ExpertUsage routing_usage(const MultimodalModel& model, const std::vector<SyntheticSample>& samples,
                               std::size_t threads) {
  if (!model.lm().has_mmoe()) throw std::logic_error("routing statistics need MMoE layers");
  if (samples.empty()) throw std::invalid_argument("routing statistics need at least one sample");
  const std::size_t E = model.config().mmoe.experts;
  threads = std::max<std::size_t>(1, std::min(threads, samples.size()));
  std::vector<moe::ExpertUsage> partial(threads, moe::ExpertUsage(E));
  parallel_for(samples.size(), threads, model.config().precision, [&](std::size_t w, std::size_t i) {
    RoutingTrace trace;
    model.response_loss(samples[i], &trace);
    for (std::size_t l = 0; l < trace.size(); ++l) partial[w].record(l, trace[l].decisions);
  });
  moe::ExpertUsage total(E);
  for (const auto& p : partial) total.merge(p);
  return total;
}

}  // namespace cotr_moe::stack
