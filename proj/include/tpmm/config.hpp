#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpmm/common.hpp"
#include "tpmm/experiment.hpp"

// JSON config parsing (strict: unknown keys rejected with their path) plus
// resolved-config serialization and the run manifest.

namespace tpmm {

using Json = nlohmann::ordered_json;

namespace detail {

inline void expect_object(const Json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
}

inline void check_keys(const Json& j, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) { ok = true; break; }
    if (!ok) throw ConfigError(path + ": unknown key \"" + it.key() + "\"");
  }
}

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline double get_number(const Json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  return j.get<double>();
}

inline int get_int(const Json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
  return j.get<int>();
}

inline std::uint64_t get_u64(const Json& j, const std::string& path) {
  if (!j.is_number_unsigned() && !j.is_number_integer())
    throw ConfigError(path + ": expected a non-negative integer");
  if (j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0)
    throw ConfigError(path + ": expected a non-negative integer");
  return j.get<std::uint64_t>();
}

inline std::string get_string(const Json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path + ": expected a string");
  return j.get<std::string>();
}

inline bool get_bool(const Json& j, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError(path + ": expected a boolean");
  return j.get<bool>();
}

inline ModelSpec parse_model_spec(const Json& j, const std::string& path) {
  expect_object(j, path);
  check_keys(j, path,
             {"family", "vocab_size", "context_window", "embed_dim", "hidden_dim",
              "max_response_len"});
  if (!j.contains("family")) throw ConfigError(path + ": missing key \"family\"");
  ModelSpec spec;
  const std::string fam = get_string(j.at("family"), join(path, "family"));
  if (fam == "tabular_bigram") spec.family = Family::TabularBigram;
  else if (fam == "tiny_neural_lm") spec.family = Family::TinyNeuralLM;
  else
    throw ConfigError(join(path, "family") +
                      ": must be \"tabular_bigram\" or \"tiny_neural_lm\"");
  if (!j.contains("vocab_size"))
    throw ConfigError(path + ": missing key \"vocab_size\"");
  spec.vocab_size = get_int(j.at("vocab_size"), join(path, "vocab_size"));
  if (!j.contains("max_response_len"))
    throw ConfigError(path + ": missing key \"max_response_len\"");
  spec.max_response_len =
      get_int(j.at("max_response_len"), join(path, "max_response_len"));
  if (spec.family == Family::TinyNeuralLM) {
    for (const char* k : {"context_window", "embed_dim", "hidden_dim"})
      if (!j.contains(k))
        throw ConfigError(path + ": missing key \"" + std::string(k) + "\"");
    spec.context_window = get_int(j.at("context_window"), join(path, "context_window"));
    spec.embed_dim = get_int(j.at("embed_dim"), join(path, "embed_dim"));
    spec.hidden_dim = get_int(j.at("hidden_dim"), join(path, "hidden_dim"));
  } else {
    for (const char* k : {"context_window", "embed_dim", "hidden_dim"})
      if (j.contains(k) && get_int(j.at(k), join(path, k)) != 0)
        throw ConfigError(join(path, k) + ": must be 0 for tabular_bigram");
  }
  return spec;
}

inline Json model_spec_json(const ModelSpec& spec) {
  Json j;
  j["family"] = family_name(spec.family);
  j["vocab_size"] = spec.vocab_size;
  if (spec.family == Family::TinyNeuralLM) {
    j["context_window"] = spec.context_window;
    j["embed_dim"] = spec.embed_dim;
    j["hidden_dim"] = spec.hidden_dim;
  }
  j["max_response_len"] = spec.max_response_len;
  return j;
}

inline LrSchedule parse_schedule(const Json& j, const std::string& path) {
  LrSchedule sched;
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "constant") { sched.kind = ScheduleKind::Constant; return sched; }
    if (s == "cosine_anneal") {
      sched.kind = ScheduleKind::CosineAnneal;
      sched.min_fraction = 0.0;
      return sched;
    }
    throw ConfigError(path + ": must be \"constant\" or {\"cosine_anneal\": ...}");
  }
  expect_object(j, path);
  check_keys(j, path, {"cosine_anneal"});
  if (!j.contains("cosine_anneal"))
    throw ConfigError(path + ": must be \"constant\" or {\"cosine_anneal\": ...}");
  const Json& inner = j.at("cosine_anneal");
  const std::string inner_path = join(path, "cosine_anneal");
  expect_object(inner, inner_path);
  check_keys(inner, inner_path, {"min_fraction"});
  sched.kind = ScheduleKind::CosineAnneal;
  if (inner.contains("min_fraction"))
    sched.min_fraction =
        get_number(inner.at("min_fraction"), join(inner_path, "min_fraction"));
  return sched;
}

inline Json schedule_json(const LrSchedule& sched) {
  if (sched.kind == ScheduleKind::Constant) return Json("constant");
  Json j;
  j["cosine_anneal"] = Json{{"min_fraction", sched.min_fraction}};
  return j;
}

// Overrides fields of `base` (a family-appropriate default) that are present.
inline DpoConfig parse_train_config(const Json& j, const std::string& path,
                                    DpoConfig base) {
  expect_object(j, path);
  check_keys(j, path,
             {"beta", "learning_rate", "epochs", "batch_size", "schedule", "adam_beta1",
              "adam_beta2", "adam_eps", "weight_decay", "warmup_fraction"});
  if (j.contains("beta")) base.beta = get_number(j.at("beta"), join(path, "beta"));
  if (j.contains("learning_rate"))
    base.learning_rate = get_number(j.at("learning_rate"), join(path, "learning_rate"));
  if (j.contains("epochs")) base.epochs = get_int(j.at("epochs"), join(path, "epochs"));
  if (j.contains("batch_size"))
    base.batch_size = get_int(j.at("batch_size"), join(path, "batch_size"));
  if (j.contains("schedule"))
    base.schedule = parse_schedule(j.at("schedule"), join(path, "schedule"));
  if (j.contains("adam_beta1"))
    base.adam_beta1 = get_number(j.at("adam_beta1"), join(path, "adam_beta1"));
  if (j.contains("adam_beta2"))
    base.adam_beta2 = get_number(j.at("adam_beta2"), join(path, "adam_beta2"));
  if (j.contains("adam_eps"))
    base.adam_eps = get_number(j.at("adam_eps"), join(path, "adam_eps"));
  if (j.contains("weight_decay"))
    base.weight_decay = get_number(j.at("weight_decay"), join(path, "weight_decay"));
  if (j.contains("warmup_fraction"))
    base.warmup_fraction =
        get_number(j.at("warmup_fraction"), join(path, "warmup_fraction"));
  return base;
}

inline Json train_config_json(const DpoConfig& cfg) {
  Json j;
  j["beta"] = cfg.beta;
  j["learning_rate"] = cfg.learning_rate;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["schedule"] = schedule_json(cfg.schedule);
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["weight_decay"] = cfg.weight_decay;
  j["warmup_fraction"] = cfg.warmup_fraction;
  return j;
}

inline WeightLearnConfig parse_weight_learn(const Json& j, const std::string& path,
                                            WeightLearnConfig base) {
  expect_object(j, path);
  check_keys(j, path,
             {"beta", "lambda", "steps", "learning_rate", "w_init", "dataset_source",
              "held_out_fraction"});
  if (j.contains("beta")) base.beta = get_number(j.at("beta"), join(path, "beta"));
  if (j.contains("lambda"))
    base.lambda = get_number(j.at("lambda"), join(path, "lambda"));
  if (j.contains("steps")) base.steps = get_int(j.at("steps"), join(path, "steps"));
  if (j.contains("learning_rate"))
    base.learning_rate = get_number(j.at("learning_rate"), join(path, "learning_rate"));
  if (j.contains("w_init")) {
    const std::string s = get_string(j.at("w_init"), join(path, "w_init"));
    if (s == "zeros") base.w_init = WInit::Zeros;
    else if (s == "seeded_normal") base.w_init = WInit::SeededNormal;
    else
      throw ConfigError(join(path, "w_init") +
                        ": must be \"zeros\" or \"seeded_normal\"");
  }
  if (j.contains("dataset_source")) {
    const std::string s =
        get_string(j.at("dataset_source"), join(path, "dataset_source"));
    if (s == "current_round_train") base.dataset_source = WeightDataSource::CurrentRoundTrain;
    else if (s == "held_out_split") base.dataset_source = WeightDataSource::HeldOutSplit;
    else
      throw ConfigError(join(path, "dataset_source") +
                        ": must be \"current_round_train\" or \"held_out_split\"");
  }
  if (j.contains("held_out_fraction"))
    base.held_out_fraction =
        get_number(j.at("held_out_fraction"), join(path, "held_out_fraction"));
  return base;
}

inline Json weight_learn_json(const WeightLearnConfig& cfg) {
  Json j;
  j["beta"] = cfg.beta;
  j["lambda"] = cfg.lambda;
  j["steps"] = cfg.steps;
  j["learning_rate"] = cfg.learning_rate;
  j["w_init"] = cfg.w_init == WInit::Zeros ? "zeros" : "seeded_normal";
  j["dataset_source"] = cfg.dataset_source == WeightDataSource::CurrentRoundTrain
                            ? "current_round_train"
                            : "held_out_split";
  j["held_out_fraction"] = cfg.held_out_fraction;
  return j;
}

inline ReferenceStrategy parse_strategy(const Json& j, const std::string& path) {
  ReferenceStrategy strat;
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "previous_policy") strat.kind = StrategyKind::PreviousPolicy;
    else if (s == "fixed_sft") strat.kind = StrategyKind::FixedSft;
    else if (s == "simple_average") strat.kind = StrategyKind::SimpleAverage;
    else if (s == "learned_weights") strat.kind = StrategyKind::LearnedWeights;
    else
      throw ConfigError(path +
                        ": must be one of \"previous_policy\", \"fixed_sft\", "
                        "\"simple_average\", \"learned_weights\"");
    return strat;
  }
  expect_object(j, path);
  check_keys(j, path, {"learned_weights"});
  if (!j.contains("learned_weights"))
    throw ConfigError(path + ": object form must be {\"learned_weights\": {...}}");
  strat.kind = StrategyKind::LearnedWeights;
  strat.weights = parse_weight_learn(j.at("learned_weights"),
                                     join(path, "learned_weights"), WeightLearnConfig{});
  return strat;
}

inline Json strategy_json(const ReferenceStrategy& strat) {
  if (strat.kind != StrategyKind::LearnedWeights) return Json(strategy_name(strat.kind));
  Json j;
  j["learned_weights"] = weight_learn_json(strat.weights);
  return j;
}

inline PromptDist parse_prompt_dist(const Json& j, const std::string& path) {
  PromptDist dist;
  if (j.is_string()) {
    if (j.get<std::string>() == "uniform_non_eos") return dist;
    throw ConfigError(path +
                      ": must be \"uniform_non_eos\" or {\"skewed_zipf\": {...}}");
  }
  expect_object(j, path);
  check_keys(j, path, {"skewed_zipf"});
  if (!j.contains("skewed_zipf"))
    throw ConfigError(path + ": object form must be {\"skewed_zipf\": {...}}");
  const Json& inner = j.at("skewed_zipf");
  const std::string inner_path = join(path, "skewed_zipf");
  expect_object(inner, inner_path);
  check_keys(inner, inner_path, {"s"});
  dist.kind = PromptDistKind::SkewedZipf;
  if (inner.contains("s")) dist.zipf_s = get_number(inner.at("s"), join(inner_path, "s"));
  return dist;
}

inline Json prompt_dist_json(const PromptDist& dist) {
  if (dist.kind == PromptDistKind::UniformNonEos) return Json("uniform_non_eos");
  Json j;
  j["skewed_zipf"] = Json{{"s", dist.zipf_s}};
  return j;
}

inline DataSchedule parse_data_schedule(const Json& j, const std::string& path) {
  DataSchedule sched;
  if (j.is_string()) {
    if (j.get<std::string>() == "regenerate_each_round") return sched;
    throw ConfigError(
        path + ": must be \"regenerate_each_round\" or {\"partitioned_static\": {...}}");
  }
  expect_object(j, path);
  check_keys(j, path, {"partitioned_static"});
  if (!j.contains("partitioned_static"))
    throw ConfigError(path + ": object form must be {\"partitioned_static\": {...}}");
  const Json& inner = j.at("partitioned_static");
  const std::string inner_path = join(path, "partitioned_static");
  expect_object(inner, inner_path);
  check_keys(inner, inner_path, {"parts"});
  if (!inner.contains("parts"))
    throw ConfigError(inner_path + ": missing key \"parts\"");
  sched.kind = DataScheduleKind::PartitionedStatic;
  sched.parts = get_int(inner.at("parts"), join(inner_path, "parts"));
  return sched;
}

inline Json data_schedule_json(const DataSchedule& sched) {
  if (sched.kind == DataScheduleKind::RegenerateEachRound)
    return Json("regenerate_each_round");
  Json j;
  j["partitioned_static"] = Json{{"parts", sched.parts}};
  return j;
}

inline EvalConfig parse_eval(const Json& j, const std::string& path, EvalConfig base) {
  expect_object(j, path);
  check_keys(j, path,
             {"n_prompts_id", "n_prompts_ood", "ood_distribution", "lc_gamma",
              "margin_pairs", "seed"});
  if (j.contains("n_prompts_id"))
    base.n_prompts_id = get_int(j.at("n_prompts_id"), join(path, "n_prompts_id"));
  if (j.contains("n_prompts_ood"))
    base.n_prompts_ood = get_int(j.at("n_prompts_ood"), join(path, "n_prompts_ood"));
  if (j.contains("ood_distribution"))
    base.ood_distribution =
        parse_prompt_dist(j.at("ood_distribution"), join(path, "ood_distribution"));
  if (j.contains("lc_gamma"))
    base.lc_gamma = get_number(j.at("lc_gamma"), join(path, "lc_gamma"));
  if (j.contains("margin_pairs"))
    base.margin_pairs = get_int(j.at("margin_pairs"), join(path, "margin_pairs"));
  if (j.contains("seed")) base.seed = get_u64(j.at("seed"), join(path, "seed"));
  return base;
}

inline Json eval_json(const EvalConfig& cfg) {
  Json j;
  j["n_prompts_id"] = cfg.n_prompts_id;
  j["n_prompts_ood"] = cfg.n_prompts_ood;
  j["ood_distribution"] = prompt_dist_json(cfg.ood_distribution);
  j["lc_gamma"] = cfg.lc_gamma;
  j["margin_pairs"] = cfg.margin_pairs;
  j["seed"] = cfg.seed;
  return j;
}

}  // namespace detail

// A run id that is stable across reruns of the same setup: no clocks, just
// the knobs that distinguish one run from another.
inline std::string default_run_id(const ExperimentConfig& cfg) {
  std::string id = "run-";
  id += strategy_name(cfg.strategy.kind);
  id += "-p" + format_double(cfg.per_round.noise_p);
  id += "-s" + std::to_string(cfg.master_seed);
  return id;
}

inline ExperimentConfig parse_experiment_config(const Json& root) {
  detail::expect_object(root, "config");
  detail::check_keys(root, "config",
                     {"run_id", "model_spec", "prompt_len", "id_distribution",
                      "gen_temperature", "init_stddev", "gold_length_penalty",
                      "exclude_initial_checkpoint", "sft", "rounds", "per_round",
                      "strategy", "data_schedule", "policy_init", "eval",
                      "master_seed"});
  if (!root.contains("model_spec"))
    throw ConfigError("config: missing key \"model_spec\"");
  if (!root.contains("rounds")) throw ConfigError("config: missing key \"rounds\"");

  ExperimentConfig cfg;
  cfg.model_spec = detail::parse_model_spec(root.at("model_spec"), "model_spec");
  cfg.rounds = detail::get_int(root.at("rounds"), "rounds");
  if (root.contains("run_id"))
    cfg.run_id = detail::get_string(root.at("run_id"), "run_id");
  if (root.contains("prompt_len"))
    cfg.prompt_len = detail::get_int(root.at("prompt_len"), "prompt_len");
  if (root.contains("id_distribution"))
    cfg.id_distribution =
        detail::parse_prompt_dist(root.at("id_distribution"), "id_distribution");
  if (root.contains("gen_temperature"))
    cfg.gen_temperature = detail::get_number(root.at("gen_temperature"), "gen_temperature");
  if (root.contains("init_stddev"))
    cfg.init_stddev = detail::get_number(root.at("init_stddev"), "init_stddev");
  if (root.contains("gold_length_penalty"))
    cfg.gold_length_penalty =
        detail::get_number(root.at("gold_length_penalty"), "gold_length_penalty");
  if (root.contains("exclude_initial_checkpoint"))
    cfg.exclude_initial_checkpoint =
        detail::get_bool(root.at("exclude_initial_checkpoint"),
                         "exclude_initial_checkpoint");

  cfg.sft.cfg = default_sft_config(cfg.model_spec.family);
  if (root.contains("sft")) {
    const Json& j = root.at("sft");
    detail::expect_object(j, "sft");
    detail::check_keys(j, "sft", {"examples", "cfg"});
    if (j.contains("examples"))
      cfg.sft.examples = detail::get_int(j.at("examples"), "sft.examples");
    if (j.contains("cfg"))
      cfg.sft.cfg = detail::parse_train_config(j.at("cfg"), "sft.cfg", cfg.sft.cfg);
  }

  cfg.per_round.dpo_cfg = default_dpo_config(cfg.model_spec.family);
  if (root.contains("per_round")) {
    const Json& j = root.at("per_round");
    detail::expect_object(j, "per_round");
    detail::check_keys(j, "per_round", {"pairs", "k", "noise_p", "dpo_cfg"});
    if (j.contains("pairs"))
      cfg.per_round.pairs = detail::get_int(j.at("pairs"), "per_round.pairs");
    if (j.contains("k")) cfg.per_round.k = detail::get_int(j.at("k"), "per_round.k");
    if (j.contains("noise_p"))
      cfg.per_round.noise_p = detail::get_number(j.at("noise_p"), "per_round.noise_p");
    if (j.contains("dpo_cfg"))
      cfg.per_round.dpo_cfg = detail::parse_train_config(
          j.at("dpo_cfg"), "per_round.dpo_cfg", cfg.per_round.dpo_cfg);
  }

  if (root.contains("strategy"))
    cfg.strategy = detail::parse_strategy(root.at("strategy"), "strategy");
  if (root.contains("data_schedule"))
    cfg.data_schedule =
        detail::parse_data_schedule(root.at("data_schedule"), "data_schedule");
  if (root.contains("policy_init")) {
    const std::string s = detail::get_string(root.at("policy_init"), "policy_init");
    if (s == "from_previous_policy") cfg.policy_init = PolicyInit::FromPreviousPolicy;
    else if (s == "from_merged_reference")
      cfg.policy_init = PolicyInit::FromMergedReference;
    else
      throw ConfigError(
          "policy_init: must be \"from_previous_policy\" or \"from_merged_reference\"");
  }
  if (root.contains("eval")) cfg.eval = detail::parse_eval(root.at("eval"), "eval", cfg.eval);
  cfg.eval.prompt_len = cfg.prompt_len;  // eval prompts share the experiment's shape
  if (root.contains("master_seed"))
    cfg.master_seed = detail::get_u64(root.at("master_seed"), "master_seed");

  if (cfg.run_id.empty()) cfg.run_id = default_run_id(cfg);
  validate_experiment_config(cfg);
  return cfg;
}

// Every default materialized; parse(emit(cfg)) == cfg.
inline Json experiment_config_json(const ExperimentConfig& cfg) {
  Json j;
  j["run_id"] = cfg.run_id;
  j["model_spec"] = detail::model_spec_json(cfg.model_spec);
  j["prompt_len"] = cfg.prompt_len;
  j["id_distribution"] = detail::prompt_dist_json(cfg.id_distribution);
  j["gen_temperature"] = cfg.gen_temperature;
  j["init_stddev"] = cfg.init_stddev;
  j["gold_length_penalty"] = cfg.gold_length_penalty;
  j["exclude_initial_checkpoint"] = cfg.exclude_initial_checkpoint;
  j["sft"] = Json{{"examples", cfg.sft.examples},
                  {"cfg", detail::train_config_json(cfg.sft.cfg)}};
  j["rounds"] = cfg.rounds;
  j["per_round"] = Json{{"pairs", cfg.per_round.pairs},
                        {"k", cfg.per_round.k},
                        {"noise_p", cfg.per_round.noise_p},
                        {"dpo_cfg", detail::train_config_json(cfg.per_round.dpo_cfg)}};
  j["strategy"] = detail::strategy_json(cfg.strategy);
  j["data_schedule"] = detail::data_schedule_json(cfg.data_schedule);
  j["policy_init"] = cfg.policy_init == PolicyInit::FromPreviousPolicy
                         ? "from_previous_policy"
                         : "from_merged_reference";
  j["eval"] = detail::eval_json(cfg.eval);
  j["master_seed"] = cfg.master_seed;
  return j;
}

// Accepts either a bare config document or a manifest (takes its "config").
inline ExperimentConfig parse_config_text(const std::string& text) {
  Json root;
  try {
    root = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (root.is_object() && root.contains("manifest_version")) {
    if (!root.contains("config"))
      throw ConfigError("manifest: missing key \"config\"");
    return parse_experiment_config(root.at("config"));
  }
  return parse_experiment_config(root);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

inline Json derived_seeds_json(const DerivedSeeds& seeds) {
  Json j;
  j["gold_rm"] = seeds.gold_rm;
  j["init"] = seeds.init;
  j["sft_prompts"] = seeds.sft_prompts;
  j["sft_pairs"] = seeds.sft_pairs;
  j["sft_train"] = seeds.sft_train;
  j["eval_id_prompts"] = seeds.eval_id_prompts;
  j["eval_ood_prompts"] = seeds.eval_ood_prompts;
  Json rounds = Json::object();
  for (std::size_t t = 0; t < seeds.rounds.size(); ++t) {
    const auto& r = seeds.rounds[t];
    rounds[std::to_string(t)] = Json{{"pairs", r.pairs},
                                     {"noise", r.noise},
                                     {"dpo", r.dpo},
                                     {"weights", r.weights},
                                     {"margin_prompts", r.margin_prompts},
                                     {"margin_pairs", r.margin_pairs}};
  }
  j["rounds"] = rounds;
  return j;
}

inline Json build_manifest(const ExperimentConfig& cfg, const DerivedSeeds& seeds,
                           const Json& artifacts) {
  Json j;
  j["manifest_version"] = 1;
  j["tool_version"] = kToolVersion;
  j["run_id"] = cfg.run_id;
  j["config"] = experiment_config_json(cfg);
  j["derived_seeds"] = derived_seeds_json(seeds);
  j["artifacts"] = artifacts;
  return j;
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace tpmm
