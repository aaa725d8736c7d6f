// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/commands.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "cotr_moe/checkpoint.hpp"
#include "cotr_moe/metrics.hpp"
#include "cotr_moe/model.hpp"
#include "cotr_moe/trainer.hpp"
#include "cotr_moe/verification.hpp"

namespace cotr_moe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string out;
};

RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : RunConfig::load(g.config_path);
  if (g.seed) c.seed = *g.seed;
  if (!g.mode.empty()) {
    try {
      c.reduction.order = cotr::parse_scale_order(g.mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (!g.out.empty()) c.out_dir = g.out;
  c.validate();
  return c;
}

fs::path prepare_output(const RunConfig& c) {
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  return out;
}

json evaluation_json(const stack::EvalReport& r) {
  json tasks = json::object();
  for (const auto& [name, ct] : r.per_task) {
    tasks[name] = {{"correct", ct.first},
                   {"total", ct.second},
                   {"exact_match", ct.second ? static_cast<double>(ct.first) / static_cast<double>(ct.second) : 0.0}};
  }
  return {{"samples", r.total}, {"correct", r.correct}, {"exact_match", r.exact_match()}, {"per_task", tasks}};
}

std::vector<stack::SyntheticSample> load_or_synthesize(const std::string& path, std::size_t count,
                                                       std::uint64_t seed) {
  if (!path.empty()) return stack::read_jsonl(path);
  return stack::synthesize(count, seed);
}

int cmd_gradcheck(const RunConfig& config) {
  const fs::path out = prepare_output(config);
  const GradCheckReport cotr_report = verification::cotr_suite(config, derive_seed(config.seed, "gradcheck.cotr"));
  const GradCheckReport moe_report = verification::mmoe_suite(config, derive_seed(config.seed, "gradcheck.mmoe"));
  json groups = json::object();
  for (const auto* r : {&cotr_report, &moe_report}) {
    for (const auto& [name, worst] : verification::worst_by_group(*r)) {
      groups[name] = worst;
      std::printf("%-24s worst relative error %.3e\n", name.c_str(), worst);
    }
  }
  const bool passed = cotr_report.passed && moe_report.passed;
  const double worst = std::max(cotr_report.worst_rel_error, moe_report.worst_rel_error);
  const json doc = {{"digest", config.digest()},
                    {"created_at", metrics::utc_timestamp()},
                    {"mode", cotr::to_string(config.reduction.order)},
                    {"tolerance", GradCheckOptions{}.tolerance},
                    {"worst_relative_error", worst},
                    {"groups", groups},
                    {"passed", passed}};
  metrics::write_text_file(out / "gradcheck.json", doc.dump(2) + "\n");
  std::printf("gradcheck %s (worst %.3e)\n", passed ? "passed" : "FAILED", worst);
  return passed ? kOk : kVerificationFailed;
}

int cmd_train(const RunConfig& config, int stage, const std::string& from) {
  if (stage < 1 || stage > 3) throw UsageError("--stage must be 1, 2 or 3");
  if (stage > 1 && from.empty()) throw UsageError("stage " + std::to_string(stage) + " needs --from <checkpoint>");
  const stack::Wiring wiring = stack::wiring_for_stage(stage);
  std::optional<stack::Checkpoint> prior;
  if (!from.empty()) {
    if (!fs::exists(from)) throw std::ios_base::failure("missing prior checkpoint " + from);
    prior = stack::read_checkpoint(from);
    if (prior->stage != stage - 1) {
      throw UsageError("stage " + std::to_string(stage) + " continues from a stage " + std::to_string(stage - 1) +
                       " checkpoint, got stage " + std::to_string(prior->stage));
    }
  }
  const auto train = training_set(config);
  const auto eval = evaluation_set(config);
  const fs::path out = prepare_output(config);

  stack::MultimodalModel model =
      prior ? stack::restore_model(*prior, config, wiring) : stack::MultimodalModel(config, wiring);
  const stack::StagePlan plan = stack::StagePlan::for_stage(stage);
  const stack::TrainOptions options = stack::options_for_stage(config, stage);
  const stack::StageReport report = stack::train_stage(model, plan, train, options);
  const fs::path ckpt = out / ("stage" + std::to_string(stage) + ".ckpt");
  stack::save_checkpoint(model, stage, ckpt);

  bool freeze_ok = true;
  json freeze = json::object();
  for (const auto& [group, changed] : report.group_changed) {
    const bool trainable = plan.trains(parse_param_group(group));
    const bool ok = trainable ? (changed || options.steps == 0) : !changed;
    freeze_ok = freeze_ok && ok;
    freeze[group] = {{"trainable", trainable}, {"changed", changed}, {"ok", ok}};
  }
  const stack::EvalReport ev = stack::evaluate(model, eval, thread_count());

  metrics::MetricsRecord rec;
  rec.digest = config.digest();
  rec.command = "train";
  rec.stage = stage;
  rec.history = report.history;
  rec.balance_probe_initial = report.balance_probe_initial;
  rec.balance_probe_final = report.balance_probe_final;
  rec.evaluation = evaluation_json(ev);
  rec.extra = {{"freeze", freeze},
               {"freeze_ok", freeze_ok},
               {"parameter_count", model.parameter_count()},
               {"checkpoint", ckpt.filename().string()},
               {"from_digest", prior ? json(prior->digest) : json(nullptr)}};
  metrics::export_metrics_json(rec, out / ("stage" + std::to_string(stage) + "_metrics.json"));

  const double final_loss = report.history.empty() ? std::nan("") : report.history.back().loss;
  std::printf("stage %d: %zu steps, final loss %.4f, exact match %.3f, freeze fidelity %s\n", stage,
              report.history.size(), final_loss, ev.exact_match(), freeze_ok ? "ok" : "VIOLATED");
  return freeze_ok ? kOk : kVerificationFailed;
}

stack::MultimodalModel model_from(const std::string& from) {
  if (from.empty()) throw UsageError("--from <checkpoint> is required");
  if (!fs::exists(from)) throw std::ios_base::failure("missing checkpoint " + from);
  return stack::restore_model(stack::read_checkpoint(from));
}

std::vector<stack::SyntheticSample> eval_data(const RunConfig& checkpoint_config, const std::string& data_path) {
  if (!data_path.empty()) {
    if (!fs::exists(data_path)) throw std::ios_base::failure("missing dataset " + data_path);
    return stack::read_jsonl(data_path);
  }
  return evaluation_set(checkpoint_config);
}

int cmd_eval(const RunConfig& cli_config, const std::string& from, const std::string& data_path) {
  const stack::MultimodalModel model = model_from(from);
  const auto samples = eval_data(model.config(), data_path);
  if (samples.empty()) throw UsageError("evaluation dataset is empty");
  const stack::EvalReport ev = stack::evaluate(model, samples, thread_count());
  const fs::path out = prepare_output(cli_config);
  metrics::MetricsRecord rec;
  rec.digest = model.config().digest();
  rec.command = "eval";
  rec.evaluation = evaluation_json(ev);
  metrics::export_metrics_json(rec, out / "eval_metrics.json");
  std::printf("exact match %.3f over %zu samples\n", ev.exact_match(), ev.total);
  return kOk;
}

int cmd_routes(const RunConfig& cli_config, const std::string& from, const std::string& data_path) {
  const stack::MultimodalModel model = model_from(from);
  if (!model.lm().has_mmoe()) throw UsageError("routes needs a stage-3 checkpoint");
  const auto samples = eval_data(model.config(), data_path);
  if (samples.empty()) throw UsageError("routing dataset is empty");
  std::vector<metrics::UsageMatrix> per_task;
  json files = json::object();
  std::vector<std::pair<std::string, metrics::UsageMatrix>> outputs;
  for (auto task : stack::kAllTasks) {
    std::vector<stack::SyntheticSample> subset;
    for (const auto& s : samples) {
      if (s.task == task) subset.push_back(s);
    }
    if (subset.empty()) throw UsageError("no samples of task " + stack::to_string(task));
    outputs.emplace_back(stack::to_string(task), stack::routing_usage(model, subset, thread_count()).frequencies());
    per_task.push_back(outputs.back().second);
  }
  const fs::path out = prepare_output(cli_config);
  for (const auto& [name, usage] : outputs) {
    const std::string file = "routes_" + name + ".csv";
    metrics::export_usage_csv(usage, out / file);
    files[name] = file;
  }
  json tv = json::array();
  for (std::size_t l = 0; l < per_task.front().size(); ++l) tv.push_back(metrics::max_total_variation(per_task, l));
  const json doc = {{"digest", model.config().digest()},
                    {"created_at", metrics::utc_timestamp()},
                    {"files", files},
                    {"max_total_variation_per_layer", tv}};
  metrics::write_text_file(out / "routes.json", doc.dump(2) + "\n");
  for (std::size_t l = 0; l < tv.size(); ++l) {
    std::printf("layer %zu: max task TV distance %.3f\n", l, tv[l].get<double>());
  }
  return kOk;
}

double percent_2dp(double fraction, bool truncate) {
  const double p = fraction * 100.0 * 100.0;
  return (truncate ? std::floor(p + 1e-9) : std::round(p)) / 100.0;
}

int cmd_efficiency(const RunConfig& config) {
  const fs::path out = prepare_output(config);
  const auto& eff = config.efficiency;
  json tokens = json::array();
  json flops = json::array();
  const double base_flops = metrics::prefill_flops(metrics::llama3_8b(eff.baseline_tokens, eff.text_tokens));
  for (auto n : eff.reduced_tokens) {
    const double ratio = metrics::token_reduction_ratio(n, eff.baseline_tokens);
    tokens.push_back({{"baseline", eff.baseline_tokens},
                      {"reduced", n},
                      {"reduction", ratio},
                      {"percent_rounded", percent_2dp(ratio, false)},
                      {"percent_truncated", percent_2dp(ratio, true)}});
    const auto b = metrics::prefill_breakdown(metrics::llama3_8b(n, eff.text_tokens));
    flops.push_back({{"geometry", "llama3-8b"},
                     {"visual_tokens", n},
                     {"text_tokens", eff.text_tokens},
                     {"baseline_flops", base_flops},
                     {"reduced_flops", b.total()},
                     {"reduction", 1.0 - b.total() / base_flops},
                     {"breakdown",
                      {{"projections", b.projections},
                       {"scores", b.scores},
                       {"context", b.context},
                       {"softmax", b.softmax},
                       {"mlp", b.mlp},
                       {"head", b.head}}}});
    std::printf("%zu vs %zu visual tokens: token reduction %.2f%% (truncated %.2f%%), LM prefill FLOPs reduction %.2f%%\n",
                n, eff.baseline_tokens, percent_2dp(ratio, false), percent_2dp(ratio, true),
                100.0 * (1.0 - b.total() / base_flops));
  }
  metrics::ModelGeometry toy;
  toy.layers = config.lm.layers;
  toy.width = config.lm.width;
  toy.mlp_hidden = config.lm.mlp_hidden;
  toy.heads = config.lm.heads;
  toy.vocab = config.lm.vocab;
  toy.text_tokens = stack::vocab::kMaxInstruction;
  toy.visual_tokens = config.vision.experts.front().tokens;
  const double toy_base = metrics::prefill_flops(toy);
  toy.visual_tokens = config.reduction.queries;
  const double toy_reduced = metrics::prefill_flops(toy);
  flops.push_back({{"geometry", "toy"},
                   {"visual_tokens", config.reduction.queries},
                   {"text_tokens", toy.text_tokens},
                   {"baseline_flops", toy_base},
                   {"reduced_flops", toy_reduced},
                   {"reduction", 1.0 - toy_reduced / toy_base}});
  const json doc = {{"digest", config.digest()},
                    {"created_at", metrics::utc_timestamp()},
                    {"convention", {{"per_mac", 2.0}, {"per_softmax_element", 5.0}}},
                    {"tokens", tokens},
                    {"flops", flops}};
  metrics::write_text_file(out / "efficiency.json", doc.dump(2) + "\n");
  return kOk;
}

int cmd_synth(const RunConfig& config) {
  const auto train = training_set(config);
  const auto eval = evaluation_set(config);
  const fs::path out = prepare_output(config);
  stack::write_jsonl(out / "train.jsonl", train);
  stack::write_jsonl(out / "eval.jsonl", eval);
  std::printf("wrote %zu training and %zu evaluation samples to %s\n", train.size(), eval.size(),
              out.string().c_str());
  return kOk;
}

}  // namespace

std::vector<stack::SyntheticSample> training_set(const RunConfig& config) {
  return load_or_synthesize(config.data.train_path, config.data.train_samples, config.data.seed);
}

std::vector<stack::SyntheticSample> evaluation_set(const RunConfig& config) {
  return load_or_synthesize(config.data.eval_path, config.data.eval_samples, derive_seed(config.data.seed, "eval"));
}

std::size_t thread_count() {
  const char* v = std::getenv("COTR_MOE_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 256) throw ConfigError("COTR_MOE_THREADS must be an integer in [1, 256]");
  return static_cast<std::size_t>(n);
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Conditional token reduction and mixture-of-experts toolkit", "cotr-moe"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON run configuration");
  app.add_option("--seed", g.seed, "Override the model seed");
  app.add_option("--mode", g.mode, "Scoring mode: standard or literal-eq6");
  app.add_option("--out", g.out, "Output directory");

  int stage = 0;
  std::string from, data;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of token reduction and MMoE");
  auto* train = app.add_subcommand("train", "Train one stage");
  train->add_option("--stage", stage, "Stage 1, 2 or 3")->required();
  train->add_option("--from", from, "Checkpoint of the previous stage");
  auto* eval = app.add_subcommand("eval", "Exact-match evaluation of a checkpoint");
  eval->add_option("--from", from, "Checkpoint")->required();
  eval->add_option("--data", data, "JSON-lines dataset (default: synthetic evaluation set)");
  auto* routes = app.add_subcommand("routes", "Per-task expert usage CSVs of a stage-3 checkpoint");
  routes->add_option("--from", from, "Checkpoint")->required();
  routes->add_option("--data", data, "JSON-lines dataset (default: synthetic evaluation set)");
  auto* efficiency = app.add_subcommand("efficiency", "Token and FLOPs reduction report");
  auto* synth = app.add_subcommand("synth", "Write the synthetic corpora as JSON lines");

  std::vector<const char*> argv{"cotr-moe"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    const RunConfig config = resolve_config(g);
    PrecisionScope precision(config.precision);
    if (gradcheck->parsed()) return cmd_gradcheck(config);
    if (train->parsed()) return cmd_train(config, stage, from);
    if (eval->parsed()) return cmd_eval(config, from, data);
    if (routes->parsed()) return cmd_routes(config, from, data);
    if (efficiency->parsed()) return cmd_efficiency(config);
    if (synth->parsed()) return cmd_synth(config);
    return kUsageError;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIoError;
  } catch (const stack::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kVerificationFailed;
  }
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace cotr_moe::cli
