#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "tpmm/common.hpp"
#include "tpmm/data.hpp"
#include "tpmm/policy.hpp"
#include "tpmm/rng.hpp"

// Preference and supervised objectives with exact gradients, the AdamW
// optimizer with cosine annealing, and single-stage full-batch training.

namespace tpmm {

/// Numerically stable logistic sigmoid.
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// softplus(x) = log(1 + e^x) without overflow; -log sigmoid(z) = softplus(-z).
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

enum class ScheduleKind : std::uint8_t { Constant, CosineAnneal };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Constant;
  double min_fraction = 0.0;  // CosineAnneal floor, in [0, 1]

  friend bool operator==(const LrSchedule&, const LrSchedule&) = default;
};

struct DpoConfig {
  double beta = 0.1;
  double learning_rate = 1e-2;
  int epochs = 1;
  int batch_size = 8;
  LrSchedule schedule;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double warmup_fraction = 0.0;  // linear warmup over this fraction of steps
  std::uint64_t seed = 0;

  friend bool operator==(const DpoConfig&, const DpoConfig&) = default;
};

inline void validate_dpo_config(const DpoConfig& cfg, const std::string& where) {
  if (cfg.beta <= 0) throw ConfigError(where + ": beta must be > 0");
  if (cfg.learning_rate <= 0) throw ConfigError(where + ": learning_rate must be > 0");
  if (cfg.epochs < 0) throw ConfigError(where + ": epochs must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError(where + ": batch_size must be >= 1");
  if (cfg.schedule.min_fraction < 0 || cfg.schedule.min_fraction > 1)
    throw ConfigError(where + ": schedule min_fraction must be in [0, 1]");
  if (cfg.adam_beta1 < 0 || cfg.adam_beta1 >= 1)
    throw ConfigError(where + ": adam_beta1 must be in [0, 1)");
  if (cfg.adam_beta2 < 0 || cfg.adam_beta2 >= 1)
    throw ConfigError(where + ": adam_beta2 must be in [0, 1)");
  if (cfg.adam_eps <= 0) throw ConfigError(where + ": adam_eps must be > 0");
  if (cfg.weight_decay < 0) throw ConfigError(where + ": weight_decay must be >= 0");
  if (cfg.warmup_fraction < 0 || cfg.warmup_fraction > 1)
    throw ConfigError(where + ": warmup_fraction must be in [0, 1]");
}

// Stage defaults. Tiny models want far larger steps than full-size LLMs; the
// values any given run uses are always overridable in config.
inline DpoConfig default_sft_config(Family) {
  DpoConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.schedule = {ScheduleKind::Constant, 0.0};
  return cfg;
}

inline DpoConfig default_dpo_config(Family family) {
  DpoConfig cfg;
  cfg.learning_rate = family == Family::TabularBigram ? 1e-2 : 3e-3;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.schedule = {ScheduleKind::CosineAnneal, 0.1};
  return cfg;
}

struct OptimizerState {
  long step = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;

  explicit OptimizerState(std::size_t n = 0)
      : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

// Learning-rate multiplier at a 0-based step index. Cosine annealing reaches
// min_fraction exactly at step == total_steps.
inline double schedule_factor(const DpoConfig& cfg, long step, long total_steps) {
  double factor = 1.0;
  if (cfg.schedule.kind == ScheduleKind::CosineAnneal) {
    if (total_steps < 1)
      throw ConfigError("cosine annealing requires total_steps >= 1");
    const double mf = cfg.schedule.min_fraction;
    factor = mf + (1.0 - mf) * 0.5 *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                      static_cast<double>(total_steps)));
  }
  if (cfg.warmup_fraction > 0.0) {
    const long warm = std::lround(cfg.warmup_fraction * static_cast<double>(total_steps));
    if (warm > 0 && step < warm)
      factor *= static_cast<double>(step + 1) / static_cast<double>(warm);
  }
  return factor;
}

/// One AdamW step with bias correction and decoupled weight decay, applied in
/// place. The schedule factor is evaluated at the pre-update step index.
inline void adamw_step(std::vector<double>& params, const std::vector<double>& grad,
                       OptimizerState& state, const DpoConfig& cfg, long total_steps) {
  if (params.size() != grad.size())
    throw InputError("adamw_step: params and grad lengths differ");
  if (state.first_moment.size() != params.size())
    throw InputError("adamw_step: optimizer state length mismatch");
  const double lr = cfg.learning_rate * schedule_factor(cfg, state.step, total_steps);
  const long t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad[i];
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    params[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) +
                       cfg.weight_decay * params[i]);
  }
  state.step = t;
}

/// Mean preference loss -log sigmoid(beta * margin-of-log-ratios) over the
/// batch, with the exact gradient with respect to the policy parameters. The
/// reference is a constant. Loss is computed in log-sigmoid (softplus) form.
inline std::pair<double, std::vector<double>> dpo_batch_loss_and_grad(
    const PolicyCheckpoint& policy, const PolicyCheckpoint& reference,
    const Dataset& batch, double beta) {
  if (policy.spec != reference.spec)
    throw ConfigError("dpo loss: policy and reference model specs differ");
  if (batch.empty()) throw InputError("dpo loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  std::vector<double> grad(policy.params.size(), 0.0);
  for (const PreferenceExample& ex : batch) {
    const double z = beta * ((log_prob(policy, ex.prompt, ex.chosen) -
                              log_prob(reference, ex.prompt, ex.chosen)) -
                             (log_prob(policy, ex.prompt, ex.rejected) -
                              log_prob(reference, ex.prompt, ex.rejected)));
    loss += softplus(-z) * inv_n;
    // d/dz softplus(-z) = -sigmoid(-z)
    const double coeff = -sigmoid(-z) * beta * inv_n;
    const std::vector<double> gw = grad_log_prob(policy, ex.prompt, ex.chosen);
    const std::vector<double> gl = grad_log_prob(policy, ex.prompt, ex.rejected);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += coeff * (gw[i] - gl[i]);
  }
  return {loss, std::move(grad)};
}

/// Mean negative log-likelihood of the chosen responses, with exact gradient.
inline std::pair<double, std::vector<double>> sft_loss_and_grad(
    const PolicyCheckpoint& policy, const Dataset& batch) {
  if (batch.empty()) throw InputError("sft loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  std::vector<double> grad(policy.params.size(), 0.0);
  for (const PreferenceExample& ex : batch) {
    loss -= log_prob(policy, ex.prompt, ex.chosen) * inv_n;
    const std::vector<double> g = grad_log_prob(policy, ex.prompt, ex.chosen);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] -= g[i] * inv_n;
  }
  return {loss, std::move(grad)};
}

enum class Objective : std::uint8_t { Sft, Dpo };

// Called with the 0-based optimizer step count: once with 0 before any
// update, then after every step. Used to trace implicit-reward margins.
using StepObserver = std::function<void(long step, const PolicyCheckpoint&)>;

struct TrainResult {
  PolicyCheckpoint checkpoint;
  std::vector<double> loss_trace;  // one entry per batch step
};

/// Runs one training stage over the dataset: deterministic per-epoch shuffle
/// keyed by (cfg.seed, epoch), full-batch gradients within each batch, short
/// final batch kept. DPO bumps iteration_index; SFT resets it to 0.
inline TrainResult train_stage(const PolicyCheckpoint& init,
                               const PolicyCheckpoint* reference, const Dataset& dataset,
                               Objective objective, const DpoConfig& cfg,
                               const StepObserver& observer = {}) {
  validate_dpo_config(cfg, "train_stage");
  if (dataset.empty()) throw InputError("train_stage: empty dataset");
  if (objective == Objective::Dpo && reference == nullptr)
    throw ConfigError("train_stage: DPO requires a reference checkpoint");

  TrainResult result;
  result.checkpoint = init;
  result.checkpoint.iteration_index =
      objective == Objective::Dpo ? init.iteration_index + 1 : 0;
  result.checkpoint.label = objective == Objective::Dpo ? "dpo" : "sft";

  const long batches_per_epoch =
      static_cast<long>((dataset.size() + cfg.batch_size - 1) /
                        static_cast<std::size_t>(cfg.batch_size));
  const long total_steps = static_cast<long>(cfg.epochs) * batches_per_epoch;

  OptimizerState state(init.params.size());
  if (observer) observer(0, result.checkpoint);

  std::vector<std::size_t> order(dataset.size());
  Dataset batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(dataset[order[i]]);
      auto [loss, grad] =
          objective == Objective::Dpo
              ? dpo_batch_loss_and_grad(result.checkpoint, *reference, batch, cfg.beta)
              : sft_loss_and_grad(result.checkpoint, batch);
      adamw_step(result.checkpoint.params, grad, state, cfg, total_steps);
      result.loss_trace.push_back(loss);
      if (observer) observer(state.step, result.checkpoint);
    }
  }
  return result;
}

}  // namespace tpmm
