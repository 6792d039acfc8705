#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "tpmm/common.hpp"
#include "tpmm/data.hpp"
#include "tpmm/policy.hpp"

// Evaluation metrics: gold-RM head-to-head win rates (plain and
// length-controlled), mean gold reward, and implicit-reward margins. All
// decoding here is greedy, so every metric is a pure function of its inputs.

namespace tpmm {

struct EvalConfig {
  int n_prompts_id = 200;
  int n_prompts_ood = 200;
  PromptDist ood_distribution{PromptDistKind::SkewedZipf, 1.2};
  double lc_gamma = 0.05;
  int margin_pairs = 64;  // clean held-out pairs per round for margin traces
  int prompt_len = 4;     // resolved from the experiment config
  std::uint64_t seed = 0;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

inline void validate_eval_config(const EvalConfig& cfg) {
  if (cfg.n_prompts_id < 1) throw ConfigError("eval: n_prompts_id must be >= 1");
  if (cfg.n_prompts_ood < 1) throw ConfigError("eval: n_prompts_ood must be >= 1");
  if (cfg.lc_gamma < 0) throw ConfigError("eval: lc_gamma must be >= 0");
  if (cfg.margin_pairs < 1) throw ConfigError("eval: margin_pairs must be >= 1");
  if (cfg.prompt_len < 1) throw ConfigError("eval: prompt_len must be >= 1");
}

namespace detail {

inline DecodeConfig greedy_decode(const ModelSpec& spec) {
  return DecodeConfig{0.0, spec.max_response_len};
}

// Shared by win_rate and lc_win_rate; gamma extends the oracle's length
// penalty for the length-controlled variant.
inline double paired_win_rate(const PolicyCheckpoint& candidate,
                              const PolicyCheckpoint& baseline,
                              const std::vector<TokenSeq>& prompts,
                              const GoldRewardModel& rm, double gamma) {
  if (prompts.empty()) throw InputError("win_rate: empty prompt list");
  if (candidate.spec.vocab_size != rm.vocab_size ||
      baseline.spec.vocab_size != rm.vocab_size)
    throw InputError("win_rate: policy and gold rm vocab sizes differ");
  const DecodeConfig dc_cand = greedy_decode(candidate.spec);
  const DecodeConfig dc_base = greedy_decode(baseline.spec);
  long wins = 0, losses = 0;
  for (const TokenSeq& prompt : prompts) {
    const TokenSeq rc = sample_response(candidate, prompt, dc_cand, 0);
    const TokenSeq rb = sample_response(baseline, prompt, dc_base, 0);
    const double sc = gold_reward(rm, prompt, rc) -
                      gamma * static_cast<double>(rc.tokens.size());
    const double sb = gold_reward(rm, prompt, rb) -
                      gamma * static_cast<double>(rb.tokens.size());
    if (sc > sb)
      ++wins;
    else if (sc < sb)
      ++losses;
  }
  // 0.5 + (wins - losses)/(2n) equals (wins + ties/2)/n and makes
  // win_rate(A, B) + win_rate(B, A) == 1 exact in floating point.
  return 0.5 + static_cast<double>(wins - losses) /
                   (2.0 * static_cast<double>(prompts.size()));
}

}  // namespace detail

/// Fraction of prompts where the candidate's greedy response outscores the
/// baseline's under the gold RM; exact ties credit one half.
inline double win_rate(const PolicyCheckpoint& candidate, const PolicyCheckpoint& baseline,
                       const std::vector<TokenSeq>& prompts, const GoldRewardModel& rm) {
  return detail::paired_win_rate(candidate, baseline, prompts, rm, 0.0);
}

/// win_rate on the length-adjusted score gold_reward - lc_gamma * |response|.
/// Reduces to win_rate exactly at lc_gamma = 0.
inline double lc_win_rate(const PolicyCheckpoint& candidate, const PolicyCheckpoint& baseline,
                          const std::vector<TokenSeq>& prompts, const GoldRewardModel& rm,
                          double lc_gamma) {
  if (lc_gamma < 0) throw ConfigError("lc_win_rate: lc_gamma must be >= 0");
  return detail::paired_win_rate(candidate, baseline, prompts, rm, lc_gamma);
}

inline double mean_gold_reward(const PolicyCheckpoint& policy,
                               const std::vector<TokenSeq>& prompts,
                               const GoldRewardModel& rm) {
  if (prompts.empty()) throw InputError("mean_gold_reward: empty prompt list");
  if (policy.spec.vocab_size != rm.vocab_size)
    throw InputError("mean_gold_reward: policy and gold rm vocab sizes differ");
  const DecodeConfig dc = detail::greedy_decode(policy.spec);
  double total = 0.0;
  for (const TokenSeq& prompt : prompts)
    total += gold_reward(rm, prompt, sample_response(policy, prompt, dc, 0));
  return total / static_cast<double>(prompts.size());
}

/// Per-example implicit rewards (chosen, rejected):
/// beta * (log pi_policy - log pi_reference) for each response. All zeros at
/// policy == reference.
inline std::vector<std::pair<double, double>> implicit_reward_margins(
    const PolicyCheckpoint& policy, const PolicyCheckpoint& reference,
    const Dataset& dataset, double beta) {
  if (policy.spec != reference.spec)
    throw InputError("implicit_reward_margins: policy and reference specs differ");
  std::vector<std::pair<double, double>> out;
  out.reserve(dataset.size());
  for (const PreferenceExample& ex : dataset) {
    const double chosen = beta * (log_prob(policy, ex.prompt, ex.chosen) -
                                  log_prob(reference, ex.prompt, ex.chosen));
    const double rejected = beta * (log_prob(policy, ex.prompt, ex.rejected) -
                                    log_prob(reference, ex.prompt, ex.rejected));
    out.emplace_back(chosen, rejected);
  }
  return out;
}

}  // namespace tpmm
