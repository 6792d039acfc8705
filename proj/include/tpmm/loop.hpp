#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tpmm/checkpoint_io.hpp"
#include "tpmm/common.hpp"
#include "tpmm/config.hpp"
#include "tpmm/data.hpp"
#include "tpmm/dpo.hpp"
#include "tpmm/eval.hpp"
#include "tpmm/experiment.hpp"
#include "tpmm/merge.hpp"
#include "tpmm/policy.hpp"

// Multi-round orchestration: SFT, then per round choose a reference, train
// DPO against it, regenerate/rescore/noise data, evaluate, persist.

namespace tpmm {

struct ReferenceChoice {
  PolicyCheckpoint checkpoint;
  std::optional<WeightLearnResult> learned;  // LearnedWeights only
};

// Reference for the upcoming round, given every checkpoint produced so far.
// All strategies coincide while the trajectory is just the SFT checkpoint.
// exclude_initial drops checkpoint 0 from the merge pool once alternatives
// exist (ablation; merging strategies only).
inline ReferenceChoice next_reference(const ReferenceStrategy& strategy,
                                      const Trajectory& trajectory,
                                      const Dataset& current_round_dataset,
                                      bool exclude_initial = false) {
  validate_trajectory(trajectory);
  if (strategy.kind == StrategyKind::PreviousPolicy)
    return {trajectory.checkpoints.back(), std::nullopt};
  if (strategy.kind == StrategyKind::FixedSft)
    return {trajectory.checkpoints.front(), std::nullopt};

  Trajectory pool;
  if (exclude_initial && trajectory.size() > 1)
    pool.checkpoints.assign(trajectory.checkpoints.begin() + 1,
                            trajectory.checkpoints.end());
  else
    pool = trajectory;

  if (strategy.kind == StrategyKind::SimpleAverage)
    return {merge_checkpoints(pool, uniform_alpha(pool.size())), std::nullopt};

  WeightLearnResult learned =
      learn_weights(pool, current_round_dataset, strategy.weights);
  PolicyCheckpoint merged = merge_checkpoints(pool, learned.weights.alpha());
  return {std::move(merged), std::move(learned)};
}

namespace detail {

// Rethrows stage failures with "round N/stage" context, preserving the type
// (and therefore the CLI exit code).
template <typename Fn>
auto run_stage(const std::string& label, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(label + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(label + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(label + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(label + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(label + ": " + e.what());
  }
}

// First ceil(fraction*N) examples (capped so training keeps at least one).
inline std::pair<Dataset, Dataset> split_held_out(const Dataset& clean,
                                                  double fraction) {
  const auto n = static_cast<long>(clean.size());
  long h = static_cast<long>(std::ceil(fraction * static_cast<double>(n)));
  if (h > n - 1) h = n - 1;
  if (h < 0) h = 0;
  Dataset held(clean.begin(), clean.begin() + h);
  Dataset train(clean.begin() + h, clean.end());
  return {std::move(held), std::move(train)};
}

// Near-equal contiguous slices; disjoint and covering by construction.
inline std::vector<Dataset> partition_dataset(const Dataset& full, int parts) {
  std::vector<Dataset> out;
  out.reserve(static_cast<std::size_t>(parts));
  const std::size_t n = full.size();
  for (int i = 0; i < parts; ++i) {
    const std::size_t lo = n * static_cast<std::size_t>(i) / static_cast<std::size_t>(parts);
    const std::size_t hi =
        n * (static_cast<std::size_t>(i) + 1) / static_cast<std::size_t>(parts);
    out.emplace_back(full.begin() + static_cast<std::ptrdiff_t>(lo),
                     full.begin() + static_cast<std::ptrdiff_t>(hi));
  }
  return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::string losses_csv(const std::vector<double>& trace) {
  std::string text = "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    text += std::to_string(i + 1) + ',' + format_double(trace[i]) + '\n';
  return text;
}

inline std::string round_metrics_csv(const MetricsRowContext& ctx,
                                     const IterationRecord& rec) {
  std::string text = std::string(kMetricsCsvHeader) + '\n';
  text += metrics_summary_row(ctx, rec) + '\n';
  for (const MarginPoint& pt : rec.margin_trace)
    text += metrics_margin_row(ctx, rec.round, pt) + '\n';
  return text;
}

}  // namespace detail

struct RunResult {
  Trajectory trajectory;
  std::vector<IterationRecord> records;
  std::filesystem::path run_dir;
};

inline std::string aggregate_metrics_csv(const MetricsRowContext& ctx,
                                         const std::vector<IterationRecord>& records) {
  std::string text = std::string(kMetricsCsvHeader) + '\n';
  for (const IterationRecord& rec : records) text += metrics_summary_row(ctx, rec) + '\n';
  for (const IterationRecord& rec : records)
    for (const MarginPoint& pt : rec.margin_trace)
      text += metrics_margin_row(ctx, rec.round, pt) + '\n';
  return text;
}

// The whole pipeline, deterministic in cfg.master_seed. Artifacts land under
// out_root/<run_id>/: manifest.json, gold_rm.json, metrics.csv, and
// round_<t>/ with checkpoint, data, and per-round metric files. Stage errors
// abort with round and stage named; files already written stay put.
inline RunResult run_iterative(const ExperimentConfig& cfg,
                               const std::filesystem::path& out_root) {
  validate_experiment_config(cfg);
  if (cfg.run_id.empty()) throw ConfigError("run_id: must be resolved before running");

  namespace fs = std::filesystem;
  const fs::path run_dir = out_root / cfg.run_id;
  fs::create_directories(run_dir);

  const DerivedSeeds seeds = derive_run_seeds(cfg.master_seed, cfg.rounds, cfg.eval.seed);
  const ModelSpec& spec = cfg.model_spec;
  const DecodeConfig gen_decode{cfg.gen_temperature, spec.max_response_len};
  const bool learned = cfg.strategy.kind == StrategyKind::LearnedWeights;

  MetricsRowContext ctx;
  ctx.run_id = cfg.run_id;
  ctx.strategy = strategy_name(cfg.strategy.kind);
  ctx.noise_p = cfg.per_round.noise_p;
  if (learned) ctx.lambda = cfg.strategy.weights.lambda;
  ctx.seed = cfg.master_seed;

  // Manifest first: the run is reconstructible even if a later stage dies.
  Json artifact_rounds = Json::object();
  artifact_rounds["0"] =
      Json{{"policy", "round_0/policy.ckpt"}, {"train", "round_0/train.jsonl"}};
  for (int t = 1; t <= cfg.rounds; ++t) {
    const std::string dir = "round_" + std::to_string(t) + "/";
    Json entry;
    entry["policy"] = dir + "policy.ckpt";
    entry["reference"] = dir + "reference.ckpt";
    if (learned) entry["weights"] = dir + "weights.json";
    entry["train"] = dir + "train.jsonl";
    entry["metrics"] = dir + "metrics.csv";
    entry["losses"] = dir + "losses.csv";
    artifact_rounds[std::to_string(t)] = entry;
  }
  Json artifacts;
  artifacts["gold_rm"] = "gold_rm.json";
  artifacts["metrics"] = "metrics.csv";
  artifacts["rounds"] = artifact_rounds;
  write_json_file((run_dir / "manifest.json").string(),
                  build_manifest(cfg, seeds, artifacts));

  const GoldRewardModel rm =
      make_gold_rm(spec.vocab_size, seeds.gold_rm, cfg.gold_length_penalty);
  write_gold_rm_json(run_dir / "gold_rm.json", rm);

  // SFT stage: pairs built from the random init, best-of-k responses as
  // targets, preference-style records so round 0 shares the data format.
  RunResult result;
  result.run_dir = run_dir;
  result.trajectory.checkpoints.reserve(static_cast<std::size_t>(cfg.rounds) + 1);
  {
    const fs::path dir = run_dir / "round_0";
    fs::create_directories(dir);
    PolicyCheckpoint init = detail::run_stage("round 0/init", [&] {
      return build_model(spec, {InitKind::SeededNormal, cfg.init_stddev}, seeds.init);
    });
    const Dataset sft_pairs = detail::run_stage("round 0/sft data", [&] {
      const auto prompts = generate_prompts(cfg.sft.examples, cfg.prompt_len,
                                            spec.vocab_size, seeds.sft_prompts,
                                            cfg.id_distribution);
      return build_preference_pairs(init, prompts, cfg.per_round.k, rm, gen_decode,
                                    seeds.sft_pairs);
    });
    PolicyCheckpoint sft = detail::run_stage("round 0/sft train", [&] {
      DpoConfig sft_cfg = cfg.sft.cfg;
      sft_cfg.seed = seeds.sft_train;
      return train_stage(init, nullptr, sft_pairs, Objective::Sft, sft_cfg).checkpoint;
    });
    save_checkpoint((dir / "policy.ckpt").string(), sft);
    write_dataset_jsonl(dir / "train.jsonl", sft_pairs);
    result.trajectory.checkpoints.push_back(std::move(sft));
  }

  const std::vector<TokenSeq> id_prompts =
      generate_prompts(cfg.eval.n_prompts_id, cfg.eval.prompt_len, spec.vocab_size,
                       seeds.eval_id_prompts, cfg.id_distribution);
  const std::vector<TokenSeq> ood_prompts =
      generate_prompts(cfg.eval.n_prompts_ood, cfg.eval.prompt_len, spec.vocab_size,
                       seeds.eval_ood_prompts, cfg.eval.ood_distribution);
  // Copy: the trajectory vector reallocates as rounds append to it.
  const PolicyCheckpoint sft_baseline = result.trajectory.checkpoints.front();

  // Static schedule: one dataset from the SFT policy, split into disjoint
  // near-equal parts; round t consumes part t-1. Noise still lands per round
  // so the flip seed derivation is uniform across schedules.
  std::vector<Dataset> static_parts;
  if (cfg.data_schedule.kind == DataScheduleKind::PartitionedStatic) {
    const Dataset full = detail::run_stage("round 0/static data", [&] {
      const auto prompts = generate_prompts(
          cfg.per_round.pairs * cfg.data_schedule.parts, cfg.prompt_len,
          spec.vocab_size, derive_seed(seeds.rounds[0].pairs, "prompts"),
          cfg.id_distribution);
      return build_preference_pairs(sft_baseline, prompts, cfg.per_round.k, rm,
                                    gen_decode, derive_seed(seeds.rounds[0].pairs, "responses"));
    });
    static_parts = detail::partition_dataset(full, cfg.data_schedule.parts);
  }

  for (int t = 1; t <= cfg.rounds; ++t) {
    const std::string round_label = "round " + std::to_string(t);
    const fs::path dir = run_dir / ("round_" + std::to_string(t));
    fs::create_directories(dir);
    const DerivedSeeds::Round& rseeds = seeds.rounds[static_cast<std::size_t>(t)];
    const PolicyCheckpoint previous = result.trajectory.checkpoints.back();

    Dataset clean = detail::run_stage(round_label + "/data", [&]() -> Dataset {
      if (cfg.data_schedule.kind == DataScheduleKind::PartitionedStatic)
        return static_parts[static_cast<std::size_t>(t - 1)];
      const auto prompts = generate_prompts(cfg.per_round.pairs, cfg.prompt_len,
                                            spec.vocab_size,
                                            derive_seed(rseeds.pairs, "prompts"),
                                            cfg.id_distribution);
      return build_preference_pairs(previous, prompts, cfg.per_round.k, rm, gen_decode,
                                    derive_seed(rseeds.pairs, "responses"));
    });

    Dataset held;
    const bool want_held_out =
        learned && cfg.strategy.weights.dataset_source == WeightDataSource::HeldOutSplit;
    if (want_held_out) {
      auto split = detail::split_held_out(clean, cfg.strategy.weights.held_out_fraction);
      held = std::move(split.first);
      clean = std::move(split.second);
    }
    const Dataset train = detail::run_stage(round_label + "/noise", [&] {
      return inject_label_noise(clean, {cfg.per_round.noise_p, rseeds.noise});
    });

    ReferenceChoice ref = detail::run_stage(round_label + "/reference", [&] {
      ReferenceStrategy strat = cfg.strategy;
      strat.weights.seed = rseeds.weights;
      // Clean held-out slice when requested and available; the round's own
      // (possibly noisy) training pairs otherwise.
      const Dataset& wdata = (want_held_out && !held.empty()) ? held : train;
      return next_reference(strat, result.trajectory, wdata,
                            cfg.exclude_initial_checkpoint);
    });

    // Clean pairs from the current policy for margin tracking; never trained on.
    const Dataset margin_set = detail::run_stage(round_label + "/margin data", [&] {
      const auto prompts = generate_prompts(cfg.eval.margin_pairs, cfg.prompt_len,
                                            spec.vocab_size, rseeds.margin_prompts,
                                            cfg.id_distribution);
      return build_preference_pairs(previous, prompts, cfg.per_round.k, rm, gen_decode,
                                    rseeds.margin_pairs);
    });

    IterationRecord rec;
    rec.round = t;
    rec.reference_label = ref.checkpoint.label + "@" +
                          std::to_string(ref.checkpoint.iteration_index);
    if (ref.learned) rec.alpha = ref.learned->weights.alpha();

    StepObserver observer;
    if (!margin_set.empty()) {
      observer = [&](long step, const PolicyCheckpoint& current) {
        const auto margins = implicit_reward_margins(current, ref.checkpoint, margin_set,
                                                     cfg.per_round.dpo_cfg.beta);
        double chosen = 0.0, rejected = 0.0;
        for (const auto& [c, r] : margins) {
          chosen += c;
          rejected += r;
        }
        const auto n = static_cast<double>(margins.size());
        rec.margin_trace.push_back(MarginPoint{step, chosen / n, rejected / n});
      };
    }

    TrainResult trained = detail::run_stage(round_label + "/dpo", [&] {
      DpoConfig dpo_cfg = cfg.per_round.dpo_cfg;
      dpo_cfg.seed = rseeds.dpo;
      const PolicyCheckpoint& start = cfg.policy_init == PolicyInit::FromPreviousPolicy
                                          ? previous
                                          : ref.checkpoint;
      TrainResult out =
          train_stage(start, &ref.checkpoint, train, Objective::Dpo, dpo_cfg, observer);
      out.checkpoint.iteration_index = t;
      return out;
    });
    rec.train_loss_final = trained.loss_trace.empty() ? 0.0 : trained.loss_trace.back();

    detail::run_stage(round_label + "/evaluate", [&] {
      rec.win_rate = win_rate(trained.checkpoint, sft_baseline, id_prompts, rm);
      rec.ood_win_rate = win_rate(trained.checkpoint, sft_baseline, ood_prompts, rm);
      rec.mean_gold_reward = mean_gold_reward(trained.checkpoint, id_prompts, rm);
      rec.ood_mean_gold_reward = mean_gold_reward(trained.checkpoint, ood_prompts, rm);
      rec.lc_win_rate =
          lc_win_rate(trained.checkpoint, sft_baseline, id_prompts, rm, cfg.eval.lc_gamma);
    });

    detail::run_stage(round_label + "/persist", [&] {
      save_checkpoint((dir / "policy.ckpt").string(), trained.checkpoint);
      save_checkpoint((dir / "reference.ckpt").string(), ref.checkpoint);
      if (ref.learned) {
        WeightLearnConfig wcfg = cfg.strategy.weights;
        wcfg.seed = rseeds.weights;
        write_merge_weights_json(dir / "weights.json", ref.learned->weights, wcfg);
      }
      write_dataset_jsonl(dir / "train.jsonl", train);
      detail::write_text_file(dir / "metrics.csv", detail::round_metrics_csv(ctx, rec));
      detail::write_text_file(dir / "losses.csv", detail::losses_csv(trained.loss_trace));
    });

    result.trajectory.checkpoints.push_back(std::move(trained.checkpoint));
    result.records.push_back(std::move(rec));
  }

  detail::write_text_file(run_dir / "metrics.csv",
                          aggregate_metrics_csv(ctx, result.records));
  return result;
}

}  // namespace tpmm
