#pragma once

#include <charconv>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tpmm/common.hpp"
#include "tpmm/data.hpp"
#include "tpmm/dpo.hpp"
#include "tpmm/eval.hpp"
#include "tpmm/merge.hpp"
#include "tpmm/policy.hpp"

// Experiment-level configuration and per-round telemetry records shared by
// the loop, the config parser, and the CLI.

namespace tpmm {

enum class StrategyKind : std::uint8_t {
  PreviousPolicy,
  FixedSft,
  SimpleAverage,
  LearnedWeights
};

inline const char* strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::PreviousPolicy: return "previous_policy";
    case StrategyKind::FixedSft: return "fixed_sft";
    case StrategyKind::SimpleAverage: return "simple_average";
    default: return "learned_weights";
  }
}

struct ReferenceStrategy {
  StrategyKind kind = StrategyKind::LearnedWeights;
  WeightLearnConfig weights;  // LearnedWeights only

  friend bool operator==(const ReferenceStrategy&, const ReferenceStrategy&) = default;
};

enum class DataScheduleKind : std::uint8_t { RegenerateEachRound, PartitionedStatic };

struct DataSchedule {
  DataScheduleKind kind = DataScheduleKind::RegenerateEachRound;
  int parts = 0;  // PartitionedStatic only

  friend bool operator==(const DataSchedule&, const DataSchedule&) = default;
};

enum class PolicyInit : std::uint8_t { FromPreviousPolicy, FromMergedReference };

struct SftSection {
  int examples = 128;
  DpoConfig cfg;

  friend bool operator==(const SftSection&, const SftSection&) = default;
};

struct PerRound {
  int pairs = 200;
  int k = 4;
  double noise_p = 0.0;
  DpoConfig dpo_cfg;

  friend bool operator==(const PerRound&, const PerRound&) = default;
};

struct ExperimentConfig {
  std::string run_id;  // empty means derive from strategy/noise/seed
  ModelSpec model_spec;
  int prompt_len = 4;
  PromptDist id_distribution{PromptDistKind::UniformNonEos, 1.0};
  double gen_temperature = 1.0;
  double init_stddev = 0.1;
  double gold_length_penalty = 0.05;
  bool exclude_initial_checkpoint = false;
  SftSection sft;
  int rounds = 3;
  PerRound per_round;
  ReferenceStrategy strategy;
  DataSchedule data_schedule;
  PolicyInit policy_init = PolicyInit::FromPreviousPolicy;
  EvalConfig eval;
  std::uint64_t master_seed = 0;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline void validate_experiment_config(const ExperimentConfig& cfg) {
  validate_spec(cfg.model_spec);
  if (cfg.prompt_len < 1) throw ConfigError("prompt_len: must be >= 1");
  if (cfg.gen_temperature < 0) throw ConfigError("gen_temperature: must be >= 0");
  if (cfg.init_stddev < 0) throw ConfigError("init_stddev: must be >= 0");
  if (cfg.gold_length_penalty < 0)
    throw ConfigError("gold_rm.length_penalty: must be >= 0");
  if (cfg.sft.examples < 1) throw ConfigError("sft.examples: must be >= 1");
  validate_dpo_config(cfg.sft.cfg, "sft.cfg");
  if (cfg.rounds < 1) throw ConfigError("rounds: must be >= 1");
  if (cfg.per_round.pairs < 1) throw ConfigError("per_round.pairs: must be >= 1");
  if (cfg.per_round.k < 2) throw ConfigError("per_round.k: must be >= 2");
  if (cfg.per_round.noise_p < 0.0 || cfg.per_round.noise_p > 1.0)
    throw ConfigError("per_round.noise_p: must be in [0, 1]");
  validate_dpo_config(cfg.per_round.dpo_cfg, "per_round.dpo_cfg");
  if (cfg.strategy.kind == StrategyKind::LearnedWeights)
    validate_weight_learn_config(cfg.strategy.weights, "strategy.learned_weights");
  if (cfg.data_schedule.kind == DataScheduleKind::PartitionedStatic &&
      cfg.data_schedule.parts < cfg.rounds)
    throw ConfigError("data_schedule.partitioned_static: parts must be >= rounds");
  validate_eval_config(cfg.eval);
}

// Shortest round-trip decimal for a double; used everywhere a float lands in
// a text artifact so reruns are byte-identical.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// All per-run randomness flows from master_seed through these purposes.
struct DerivedSeeds {
  std::uint64_t gold_rm = 0;
  std::uint64_t init = 0;
  std::uint64_t sft_prompts = 0;
  std::uint64_t sft_pairs = 0;
  std::uint64_t sft_train = 0;
  std::uint64_t eval_id_prompts = 0;
  std::uint64_t eval_ood_prompts = 0;

  struct Round {
    std::uint64_t pairs = 0;
    std::uint64_t noise = 0;
    std::uint64_t dpo = 0;
    std::uint64_t weights = 0;
    std::uint64_t margin_prompts = 0;
    std::uint64_t margin_pairs = 0;
  };
  std::vector<Round> rounds;  // index 0 = round 1
};

inline DerivedSeeds derive_run_seeds(std::uint64_t master_seed, int rounds,
                                     std::uint64_t eval_seed = 0) {
  DerivedSeeds s;
  s.gold_rm = derive_seed(master_seed, "gold_rm");
  s.init = derive_seed(master_seed, "init");
  s.sft_prompts = derive_seed(master_seed, "sft_prompts");
  s.sft_pairs = derive_seed(master_seed, "sft_pairs");
  s.sft_train = derive_seed(master_seed, "sft_train");
  s.eval_id_prompts = derive_seed(master_seed, "eval_id_prompts", eval_seed);
  s.eval_ood_prompts = derive_seed(master_seed, "eval_ood_prompts", eval_seed);
  s.rounds.resize(static_cast<std::size_t>(rounds) + 1);  // [0] serves static data
  for (int t = 0; t <= rounds; ++t) {
    auto& r = s.rounds[static_cast<std::size_t>(t)];
    const auto tu = static_cast<std::uint64_t>(t);
    r.pairs = derive_seed(master_seed, "pairs", tu);
    r.noise = derive_seed(master_seed, "noise", tu);
    r.dpo = derive_seed(master_seed, "dpo", tu);
    r.weights = derive_seed(master_seed, "weights", tu);
    r.margin_prompts = derive_seed(master_seed, "margin_prompts", tu);
    r.margin_pairs = derive_seed(master_seed, "margin_pairs", tu);
  }
  return s;
}

struct MarginPoint {
  long step = 0;
  double chosen_reward = 0.0;
  double rejected_reward = 0.0;
};

// Per-round telemetry behind the summary tables and margin curves.
struct IterationRecord {
  int round = 0;
  std::string reference_label;
  std::optional<std::vector<double>> alpha;  // present iff LearnedWeights
  double train_loss_final = 0.0;
  double win_rate = 0.0;
  double ood_win_rate = 0.0;
  double mean_gold_reward = 0.0;
  double ood_mean_gold_reward = 0.0;
  double lc_win_rate = 0.0;
  std::vector<MarginPoint> margin_trace;
};

inline constexpr const char* kMetricsCsvHeader =
    "run_id,round,strategy,noise_p,lambda,seed,win_rate,ood_win_rate,gold_reward,"
    "ood_gold_reward,lc_win_rate,step,chosen_reward,rejected_reward";

struct MetricsRowContext {
  std::string run_id;
  std::string strategy;
  double noise_p = 0.0;
  std::optional<double> lambda;
  std::uint64_t seed = 0;
};

inline std::string metrics_summary_row(const MetricsRowContext& ctx,
                                       const IterationRecord& rec) {
  std::string row = ctx.run_id + ',' + std::to_string(rec.round) + ',' + ctx.strategy +
                    ',' + format_double(ctx.noise_p) + ',' +
                    (ctx.lambda ? format_double(*ctx.lambda) : std::string()) + ',' +
                    std::to_string(ctx.seed) + ',' + format_double(rec.win_rate) + ',' +
                    format_double(rec.ood_win_rate) + ',' +
                    format_double(rec.mean_gold_reward) + ',' +
                    format_double(rec.ood_mean_gold_reward) + ',' +
                    format_double(rec.lc_win_rate) + ",,,";
  return row;
}

inline std::string metrics_margin_row(const MetricsRowContext& ctx, int round,
                                      const MarginPoint& pt) {
  std::string row = ctx.run_id + ',' + std::to_string(round) + ',' + ctx.strategy + ',' +
                    format_double(ctx.noise_p) + ',' +
                    (ctx.lambda ? format_double(*ctx.lambda) : std::string()) + ',' +
                    std::to_string(ctx.seed) + ",,,,,," + std::to_string(pt.step) + ',' +
                    format_double(pt.chosen_reward) + ',' +
                    format_double(pt.rejected_reward);
  return row;
}

}  // namespace tpmm
