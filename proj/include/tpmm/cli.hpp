#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "tpmm/checkpoint_io.hpp"
#include "tpmm/common.hpp"
#include "tpmm/config.hpp"
#include "tpmm/loop.hpp"

// Subcommand front end. Exit codes: 0 success, 2 config/validation errors
// (including bad flags), 1 runtime errors. Every subcommand takes --config
// plus the shared overrides; each writes only under its --out path.

namespace tpmm {
namespace cli_detail {

namespace fs = std::filesystem;

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  double noise_p = 0.0;
  double lambda = 0.0;
  std::string strategy;
  int rounds = 0;
  std::string out;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* noise_opt = nullptr;
  CLI::Option* lambda_opt = nullptr;
  CLI::Option* strategy_opt = nullptr;
  CLI::Option* rounds_opt = nullptr;
};

inline void add_common(CLI::App* sub, CommonOpts& o, const char* default_out) {
  sub->add_option("--config", o.config_path, "Experiment config JSON (or run manifest)")
      ->required();
  o.seed_opt = sub->add_option("--seed", o.seed, "Override master_seed");
  o.noise_opt = sub->add_option("--noise-p", o.noise_p, "Override per_round.noise_p");
  o.lambda_opt =
      sub->add_option("--lambda", o.lambda, "Override entropy coefficient lambda");
  o.strategy_opt = sub->add_option(
      "--strategy", o.strategy,
      "Override reference strategy: previous_policy|fixed_sft|simple_average|learned_weights");
  o.rounds_opt = sub->add_option("--rounds", o.rounds, "Override round count");
  o.out = default_out;
  sub->add_option("--out", o.out, "Output path");
}

inline StrategyKind parse_strategy_name(const std::string& name) {
  if (name == "previous_policy") return StrategyKind::PreviousPolicy;
  if (name == "fixed_sft") return StrategyKind::FixedSft;
  if (name == "simple_average") return StrategyKind::SimpleAverage;
  if (name == "learned_weights") return StrategyKind::LearnedWeights;
  throw ConfigError(
      "strategy: must be one of previous_policy, fixed_sft, simple_average, "
      "learned_weights");
}

inline ExperimentConfig load_with_overrides(const CommonOpts& o) {
  std::ifstream is(o.config_path, std::ios::binary);
  if (!is) throw IoError("cannot open config file: " + o.config_path);
  std::ostringstream ss;
  ss << is.rdbuf();

  Json root;
  try {
    root = Json::parse(ss.str());
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  const Json* conf = &root;
  if (root.is_object() && root.contains("manifest_version")) {
    if (!root.contains("config")) throw ConfigError("manifest: missing key \"config\"");
    conf = &root.at("config");
  }
  const bool explicit_run_id = conf->is_object() && conf->contains("run_id");
  ExperimentConfig cfg = parse_experiment_config(*conf);

  if (o.seed_opt->count() > 0) cfg.master_seed = o.seed;
  if (o.noise_opt->count() > 0) cfg.per_round.noise_p = o.noise_p;
  if (o.strategy_opt->count() > 0) cfg.strategy.kind = parse_strategy_name(o.strategy);
  if (o.lambda_opt->count() > 0) cfg.strategy.weights.lambda = o.lambda;
  if (o.rounds_opt->count() > 0) cfg.rounds = o.rounds;
  if (!explicit_run_id) cfg.run_id = default_run_id(cfg);
  validate_experiment_config(cfg);
  return cfg;
}

inline void ensure_parent_dir(const fs::path& file) {
  const fs::path parent = file.parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

// The run's initial policy; --ckpt lets pipelines substitute a trained one.
inline PolicyCheckpoint policy_or_init(const std::string& ckpt_path,
                                       const ExperimentConfig& cfg) {
  if (!ckpt_path.empty()) return load_checkpoint(ckpt_path);
  const DerivedSeeds seeds = derive_run_seeds(cfg.master_seed, cfg.rounds, cfg.eval.seed);
  return build_model(cfg.model_spec, {InitKind::SeededNormal, cfg.init_stddev},
                     seeds.init);
}

struct SubArgs {
  CommonOpts common;
  std::string ckpt;        // gen-data
  std::string in;          // inject-noise
  std::string policy;      // dpo-round
  std::string reference;   // dpo-round
  std::string data;        // dpo-round, learn-weights
  std::string candidate;   // evaluate
  std::string baseline;    // evaluate
  std::vector<std::string> ckpts;  // merge, learn-weights
  std::vector<double> alpha;       // merge
  int round = 1;           // seed derivation for single-round subcommands
};

inline Trajectory load_trajectory(const std::vector<std::string>& paths) {
  Trajectory traj;
  for (const std::string& p : paths) traj.checkpoints.push_back(load_checkpoint(p));
  validate_trajectory(traj);
  return traj;
}

inline void cmd_gen_data(const SubArgs& a) {
  const ExperimentConfig cfg = load_with_overrides(a.common);
  const PolicyCheckpoint policy = policy_or_init(a.ckpt, cfg);
  const GoldRewardModel rm =
      make_gold_rm(cfg.model_spec.vocab_size, derive_seed(cfg.master_seed, "gold_rm"),
                   cfg.gold_length_penalty);
  const auto round_seed =
      derive_seed(cfg.master_seed, "pairs", static_cast<std::uint64_t>(a.round));
  const auto prompts =
      generate_prompts(cfg.per_round.pairs, cfg.prompt_len, cfg.model_spec.vocab_size,
                       derive_seed(round_seed, "prompts"), cfg.id_distribution);
  const Dataset pairs = build_preference_pairs(
      policy, prompts, cfg.per_round.k, rm,
      DecodeConfig{cfg.gen_temperature, cfg.model_spec.max_response_len},
      derive_seed(round_seed, "responses"));
  ensure_parent_dir(a.common.out);
  write_dataset_jsonl(a.common.out, pairs);
  std::cout << "wrote " << pairs.size() << " pairs to " << a.common.out << "\n";
}

inline void cmd_inject_noise(const SubArgs& a) {
  const ExperimentConfig cfg = load_with_overrides(a.common);
  const Dataset clean = read_dataset_jsonl(a.in);
  const Dataset noisy = inject_label_noise(
      clean, {cfg.per_round.noise_p,
              derive_seed(cfg.master_seed, "noise", static_cast<std::uint64_t>(a.round))});
  ensure_parent_dir(a.common.out);
  write_dataset_jsonl(a.common.out, noisy);
  long flips = 0;
  for (const auto& ex : noisy) flips += ex.flipped ? 1 : 0;
  std::cout << "wrote " << noisy.size() << " pairs (" << flips << " flipped) to "
            << a.common.out << "\n";
}

inline void cmd_sft(const SubArgs& a) {
  const ExperimentConfig cfg = load_with_overrides(a.common);
  const DerivedSeeds seeds = derive_run_seeds(cfg.master_seed, cfg.rounds, cfg.eval.seed);
  const GoldRewardModel rm =
      make_gold_rm(cfg.model_spec.vocab_size, seeds.gold_rm, cfg.gold_length_penalty);
  const PolicyCheckpoint init = build_model(
      cfg.model_spec, {InitKind::SeededNormal, cfg.init_stddev}, seeds.init);
  const auto prompts =
      generate_prompts(cfg.sft.examples, cfg.prompt_len, cfg.model_spec.vocab_size,
                       seeds.sft_prompts, cfg.id_distribution);
  const Dataset pairs = build_preference_pairs(
      init, prompts, cfg.per_round.k, rm,
      DecodeConfig{cfg.gen_temperature, cfg.model_spec.max_response_len},
      seeds.sft_pairs);
  DpoConfig sft_cfg = cfg.sft.cfg;
  sft_cfg.seed = seeds.sft_train;
  const TrainResult res = train_stage(init, nullptr, pairs, Objective::Sft, sft_cfg);
  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  save_checkpoint((dir / "policy.ckpt").string(), res.checkpoint);
  write_dataset_jsonl(dir / "train.jsonl", pairs);
  std::cout << "sft checkpoint written to " << (dir / "policy.ckpt").string() << "\n";
}

inline void cmd_dpo_round(const SubArgs& a) {
  const ExperimentConfig cfg = load_with_overrides(a.common);
  const PolicyCheckpoint policy = load_checkpoint(a.policy);
  const PolicyCheckpoint reference = load_checkpoint(a.reference);
  const Dataset data = read_dataset_jsonl(a.data);
  DpoConfig dpo_cfg = cfg.per_round.dpo_cfg;
  dpo_cfg.seed = derive_seed(cfg.master_seed, "dpo", static_cast<std::uint64_t>(a.round));
  const TrainResult res =
      train_stage(policy, &reference, data, Objective::Dpo, dpo_cfg);
  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  save_checkpoint((dir / "policy.ckpt").string(), res.checkpoint);
  detail::write_text_file(dir / "losses.csv", detail::losses_csv(res.loss_trace));
  std::cout << "dpo checkpoint written to " << (dir / "policy.ckpt").string() << "\n";
}

inline void cmd_merge(const SubArgs& a) {
  if (!a.common.config_path.empty()) load_with_overrides(a.common);  // validate only
  const Trajectory traj = load_trajectory(a.ckpts);
  const std::vector<double> alpha =
      a.alpha.empty() ? uniform_alpha(traj.size()) : a.alpha;
  const PolicyCheckpoint merged = merge_checkpoints(traj, alpha);
  ensure_parent_dir(a.common.out);
  save_checkpoint(a.common.out, merged);
  std::cout << "merged " << traj.size() << " checkpoints into " << a.common.out << "\n";
}

inline void cmd_learn_weights(const SubArgs& a) {
  const ExperimentConfig cfg = load_with_overrides(a.common);
  const Trajectory traj = load_trajectory(a.ckpts);
  const Dataset data = read_dataset_jsonl(a.data);
  WeightLearnConfig wcfg = cfg.strategy.weights;
  wcfg.seed =
      derive_seed(cfg.master_seed, "weights", static_cast<std::uint64_t>(a.round));
  const WeightLearnResult res = learn_weights(traj, data, wcfg);
  const PolicyCheckpoint merged = merge_checkpoints(traj, res.weights.alpha());
  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  write_merge_weights_json(dir / "weights.json", res.weights, wcfg);
  save_checkpoint((dir / "merged.ckpt").string(), merged);
  std::cout << "alpha =";
  for (double v : res.weights.alpha()) std::cout << ' ' << format_double(v);
  std::cout << "\nweights written to " << (dir / "weights.json").string() << "\n";
}

inline void cmd_evaluate(const SubArgs& a) {
  const ExperimentConfig cfg = load_with_overrides(a.common);
  const PolicyCheckpoint candidate = load_checkpoint(a.candidate);
  const PolicyCheckpoint baseline = load_checkpoint(a.baseline);
  const DerivedSeeds seeds = derive_run_seeds(cfg.master_seed, cfg.rounds, cfg.eval.seed);
  const GoldRewardModel rm = make_gold_rm(cfg.model_spec.vocab_size, seeds.gold_rm,
                                          cfg.gold_length_penalty);
  const auto id_prompts =
      generate_prompts(cfg.eval.n_prompts_id, cfg.eval.prompt_len,
                       cfg.model_spec.vocab_size, seeds.eval_id_prompts,
                       cfg.id_distribution);
  const auto ood_prompts =
      generate_prompts(cfg.eval.n_prompts_ood, cfg.eval.prompt_len,
                       cfg.model_spec.vocab_size, seeds.eval_ood_prompts,
                       cfg.eval.ood_distribution);

  IterationRecord rec;
  rec.round = candidate.iteration_index;
  rec.win_rate = win_rate(candidate, baseline, id_prompts, rm);
  rec.ood_win_rate = win_rate(candidate, baseline, ood_prompts, rm);
  rec.mean_gold_reward = mean_gold_reward(candidate, id_prompts, rm);
  rec.ood_mean_gold_reward = mean_gold_reward(candidate, ood_prompts, rm);
  rec.lc_win_rate = lc_win_rate(candidate, baseline, id_prompts, rm, cfg.eval.lc_gamma);

  MetricsRowContext ctx;
  ctx.run_id = cfg.run_id;
  ctx.strategy = strategy_name(cfg.strategy.kind);
  ctx.noise_p = cfg.per_round.noise_p;
  if (cfg.strategy.kind == StrategyKind::LearnedWeights)
    ctx.lambda = cfg.strategy.weights.lambda;
  ctx.seed = cfg.master_seed;
  ensure_parent_dir(a.common.out);
  detail::write_text_file(a.common.out, std::string(kMetricsCsvHeader) + '\n' +
                                            metrics_summary_row(ctx, rec) + '\n');
  std::cout << "win_rate=" << format_double(rec.win_rate)
            << " ood_win_rate=" << format_double(rec.ood_win_rate)
            << " gold_reward=" << format_double(rec.mean_gold_reward)
            << " ood_gold_reward=" << format_double(rec.ood_mean_gold_reward)
            << " lc_win_rate=" << format_double(rec.lc_win_rate) << "\n";
}

inline void cmd_run_experiment(const SubArgs& a) {
  const ExperimentConfig cfg = load_with_overrides(a.common);
  const RunResult res = run_iterative(cfg, a.common.out);
  std::cout << "run " << cfg.run_id << " complete: " << res.trajectory.size()
            << " checkpoints under " << res.run_dir.string() << "\n";
  for (const IterationRecord& rec : res.records)
    std::cout << "round " << rec.round << ": win_rate=" << format_double(rec.win_rate)
              << " ood_win_rate=" << format_double(rec.ood_win_rate)
              << " gold_reward=" << format_double(rec.mean_gold_reward)
              << " lc_win_rate=" << format_double(rec.lc_win_rate) << "\n";
}

}  // namespace cli_detail

// argv-style arguments, program name excluded.
inline int dispatch(std::vector<std::string> args) {
  using namespace cli_detail;

  CLI::App app{"Iterative preference-training laboratory with merged reference models"};
  app.name("tpmm");
  app.require_subcommand(1);

  SubArgs gen, noise, sft, dpo, merge, learn, eval_a, runx;
  std::string stage;

  CLI::App* s = app.add_subcommand("gen-data",
                                   "Generate scored preference pairs from a policy");
  add_common(s, gen.common, "pairs.jsonl");
  s->add_option("--ckpt", gen.ckpt, "Policy checkpoint (default: seeded init model)");
  s->add_option("--round", gen.round, "Round index for seed derivation");
  s->callback([&] { stage = "gen-data"; cmd_gen_data(gen); });

  s = app.add_subcommand("inject-noise", "Apply label flips to a JSONL dataset");
  add_common(s, noise.common, "noisy.jsonl");
  s->add_option("--in", noise.in, "Input JSONL dataset")->required();
  s->add_option("--round", noise.round, "Round index for seed derivation");
  s->callback([&] { stage = "inject-noise"; cmd_inject_noise(noise); });

  s = app.add_subcommand("sft", "Train the round-0 checkpoint");
  add_common(s, sft.common, "sft_out");
  s->callback([&] { stage = "sft"; cmd_sft(sft); });

  s = app.add_subcommand("dpo-round", "One DPO round against a fixed reference");
  add_common(s, dpo.common, "dpo_out");
  s->add_option("--policy", dpo.policy, "Initial policy checkpoint")->required();
  s->add_option("--reference", dpo.reference, "Reference checkpoint")->required();
  s->add_option("--data", dpo.data, "Training pairs JSONL")->required();
  s->add_option("--round", dpo.round, "Round index for seed derivation");
  s->callback([&] { stage = "dpo-round"; cmd_dpo_round(dpo); });

  s = app.add_subcommand("merge", "Merge checkpoints with fixed weights");
  s->add_option("--config", merge.common.config_path, "Optional config (validated)");
  s->add_option("--ckpt", merge.ckpts, "Checkpoints, trajectory order")
      ->required()
      ->expected(-1);
  s->add_option("--alpha", merge.alpha, "Merge weights (default uniform)");
  merge.common.out = "merged.ckpt";
  s->add_option("--out", merge.common.out, "Output checkpoint path");
  s->callback([&] { stage = "merge"; cmd_merge(merge); });

  s = app.add_subcommand("learn-weights", "Learn merge weights on a dataset");
  add_common(s, learn.common, "weights_out");
  s->add_option("--ckpt", learn.ckpts, "Checkpoints, trajectory order")
      ->required()
      ->expected(-1);
  s->add_option("--data", learn.data, "Preference pairs JSONL")->required();
  s->add_option("--round", learn.round, "Round index for seed derivation");
  s->callback([&] { stage = "learn-weights"; cmd_learn_weights(learn); });

  s = app.add_subcommand("evaluate", "Head-to-head evaluation of two checkpoints");
  add_common(s, eval_a.common, "eval.csv");
  s->add_option("--candidate", eval_a.candidate, "Candidate checkpoint")->required();
  s->add_option("--baseline", eval_a.baseline, "Baseline checkpoint")->required();
  s->callback([&] { stage = "evaluate"; cmd_evaluate(eval_a); });

  s = app.add_subcommand("run-experiment", "Run the full multi-round pipeline");
  add_common(s, runx.common, "out");
  s->callback([&] { stage = "run-experiment"; cmd_run_experiment(runx); });

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
    return 0;
  } catch (const CLI::Success& e) {
    return app.exit(e);  // --help and friends
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\nsee 'tpmm --help' for usage\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << (stage.empty() ? "" : stage + ": ") << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << (stage.empty() ? "" : stage + ": ") << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << (stage.empty() ? "" : stage + ": ") << e.what() << "\n";
    return 1;
  }
}

}  // namespace tpmm
