#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpmm/common.hpp"
#include "tpmm/data.hpp"
#include "tpmm/dpo.hpp"
#include "tpmm/policy.hpp"

// Parameter-space merging of trajectory checkpoints: simple and weighted
// averages, and preference-guided learning of the merge weights through a
// softmax parameterization with entropy regularization.

namespace tpmm {

// The ordered checkpoint history [theta(0), .., theta(T)] produced across
// training rounds. All entries share one spec; merging is defined over their
// flat parameter vectors.
struct Trajectory {
  std::vector<PolicyCheckpoint> checkpoints;

  std::size_t size() const { return checkpoints.size(); }
};

inline void validate_trajectory(const Trajectory& traj) {
  if (traj.checkpoints.empty()) throw InputError("trajectory is empty");
  const ModelSpec& spec = traj.checkpoints.front().spec;
  int prev_index = -1;
  for (const PolicyCheckpoint& ckpt : traj.checkpoints) {
    if (ckpt.spec != spec)
      throw InputError("trajectory checkpoints have differing model specs");
    if (ckpt.params.size() != param_count(spec))
      throw InputError("trajectory checkpoint has wrong parameter count");
    if (ckpt.iteration_index <= prev_index)
      throw InputError("trajectory iteration_index values must be strictly increasing");
    prev_index = ckpt.iteration_index;
  }
}

/// Max-subtracted stable softmax onto the probability simplex.
inline std::vector<double> softmax_weights(const std::vector<double>& raw) {
  if (raw.empty()) throw InputError("softmax_weights: empty vector");
  double m = raw[0];
  for (double w : raw) {
    if (!std::isfinite(w)) throw InputError("softmax_weights: non-finite entry");
    m = std::max(m, w);
  }
  std::vector<double> alpha(raw.size());
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    alpha[i] = std::exp(raw[i] - m);
    total += alpha[i];
  }
  for (double& a : alpha) a /= total;
  return alpha;
}

/// Shannon entropy of a simplex vector, with 0 log 0 = 0.
inline double entropy(const std::vector<double>& alpha) {
  double h = 0.0;
  for (double a : alpha)
    if (a > 0.0) h -= a * std::log(a);
  return h;
}

// Merge weights are stored as raw logits only; alpha is always derived.
struct MergeWeights {
  std::vector<double> raw;

  std::vector<double> alpha() const { return softmax_weights(raw); }
};

inline void check_simplex(const std::vector<double>& alpha, std::size_t expected) {
  if (alpha.size() != expected)
    throw InputError("merge: alpha length " + std::to_string(alpha.size()) +
                     " does not match trajectory length " + std::to_string(expected));
  double total = 0.0;
  for (double a : alpha) {
    if (!(a >= -1e-9))
      throw InputError("merge: alpha has a negative entry beyond tolerance");
    total += a;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw InputError("merge: alpha sums to " + std::to_string(total) + ", not 1");
}

/// Coordinate-wise convex combination of the trajectory's parameter vectors.
/// The result carries the last checkpoint's iteration index and the label
/// "merged".
inline PolicyCheckpoint merge_checkpoints(const Trajectory& traj,
                                          const std::vector<double>& alpha) {
  validate_trajectory(traj);
  check_simplex(alpha, traj.size());
  PolicyCheckpoint merged;
  merged.spec = traj.checkpoints.front().spec;
  merged.iteration_index = traj.checkpoints.back().iteration_index;
  merged.label = "merged";
  const std::size_t n = traj.checkpoints.front().params.size();
  merged.params.assign(n, 0.0);
  for (std::size_t t = 0; t < traj.size(); ++t) {
    const double a = alpha[t];
    const std::vector<double>& p = traj.checkpoints[t].params;
    for (std::size_t i = 0; i < n; ++i) merged.params[i] += a * p[i];
  }
  return merged;
}

inline std::vector<double> uniform_alpha(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

/// Reference-free preference loss of the merged model minus lambda times the
/// weight entropy, differentiated with respect to the raw weight logits. The
/// chain runs through the merged parameters (grad_log_prob at the merged
/// point), the merge (d theta*/d alpha_t = theta(t)), and the softmax
/// Jacobian; the entropy term is added analytically. Checkpoints are frozen.
inline std::pair<double, std::vector<double>> weight_objective_and_grad(
    const Trajectory& traj, const std::vector<double>& raw_w, const Dataset& batch,
    double beta, double lambda) {
  validate_trajectory(traj);
  if (batch.empty()) throw InputError("weight objective: empty batch");
  const std::vector<double> alpha = softmax_weights(raw_w);
  check_simplex(alpha, traj.size());
  const PolicyCheckpoint merged = merge_checkpoints(traj, alpha);

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double pref_loss = 0.0;
  std::vector<double> grad_theta(merged.params.size(), 0.0);
  for (const PreferenceExample& ex : batch) {
    const double z = beta * (log_prob(merged, ex.prompt, ex.chosen) -
                             log_prob(merged, ex.prompt, ex.rejected));
    pref_loss += softplus(-z) * inv_n;
    const double coeff = -sigmoid(-z) * beta * inv_n;
    const std::vector<double> gw = grad_log_prob(merged, ex.prompt, ex.chosen);
    const std::vector<double> gl = grad_log_prob(merged, ex.prompt, ex.rejected);
    for (std::size_t i = 0; i < grad_theta.size(); ++i)
      grad_theta[i] += coeff * (gw[i] - gl[i]);
  }

  // dL_pref/d alpha_t = grad_theta . theta(t)
  const std::size_t kappa = traj.size();
  std::vector<double> dl_dalpha(kappa, 0.0);
  for (std::size_t t = 0; t < kappa; ++t) {
    const std::vector<double>& p = traj.checkpoints[t].params;
    double dot = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) dot += grad_theta[i] * p[i];
    dl_dalpha[t] = dot;
  }

  // Softmax Jacobian: dL/dw_s = alpha_s (dL/dalpha_s - sum_t alpha_t dL/dalpha_t).
  double weighted_mean = 0.0;
  for (std::size_t t = 0; t < kappa; ++t) weighted_mean += alpha[t] * dl_dalpha[t];
  const double h = entropy(alpha);
  std::vector<double> grad_w(kappa, 0.0);
  for (std::size_t s = 0; s < kappa; ++s) {
    grad_w[s] = alpha[s] * (dl_dalpha[s] - weighted_mean);
    // d(-lambda H)/dw_s = lambda alpha_s (log alpha_s + H); zero at uniform.
    if (alpha[s] > 0.0) grad_w[s] += lambda * alpha[s] * (std::log(alpha[s]) + h);
  }
  return {pref_loss - lambda * h, std::move(grad_w)};
}

enum class WInit : std::uint8_t { Zeros, SeededNormal };

enum class WeightDataSource : std::uint8_t { CurrentRoundTrain, HeldOutSplit };

struct WeightLearnConfig {
  double beta = 0.1;
  double lambda = 0.1;
  int steps = 200;
  double learning_rate = 0.05;
  WInit w_init = WInit::Zeros;
  std::uint64_t seed = 0;
  WeightDataSource dataset_source = WeightDataSource::CurrentRoundTrain;
  double held_out_fraction = 0.1;  // HeldOutSplit only

  friend bool operator==(const WeightLearnConfig&, const WeightLearnConfig&) = default;
};

inline void validate_weight_learn_config(const WeightLearnConfig& cfg,
                                         const std::string& where) {
  if (cfg.beta <= 0) throw ConfigError(where + ": beta must be > 0");
  if (cfg.lambda < 0) throw ConfigError(where + ": lambda must be >= 0");
  if (cfg.steps < 1) throw ConfigError(where + ": steps must be >= 1");
  if (cfg.learning_rate <= 0) throw ConfigError(where + ": learning_rate must be > 0");
  if (cfg.dataset_source == WeightDataSource::HeldOutSplit &&
      (cfg.held_out_fraction <= 0 || cfg.held_out_fraction >= 1))
    throw ConfigError(where + ": held_out_fraction must be in (0, 1)");
}

struct WeightLearnResult {
  MergeWeights weights;
  std::vector<double> loss_trace;
};

/// Full-batch adaptive-moment descent on the weight objective for cfg.steps
/// steps. Only the raw logits move; trajectory checkpoints are never touched.
/// A singleton trajectory short-circuits to alpha = (1).
inline WeightLearnResult learn_weights(const Trajectory& traj, const Dataset& dataset,
                                       const WeightLearnConfig& cfg) {
  validate_trajectory(traj);
  validate_weight_learn_config(cfg, "learn_weights");
  if (dataset.empty()) throw InputError("learn_weights: empty dataset");

  WeightLearnResult result;
  result.weights.raw.assign(traj.size(), 0.0);
  if (cfg.w_init == WInit::SeededNormal) {
    Rng rng(derive_seed(cfg.seed, "w_init"));
    for (double& w : result.weights.raw) w = 0.1 * rng.normal();
  }
  if (traj.size() == 1) return result;

  DpoConfig opt;
  opt.learning_rate = cfg.learning_rate;
  opt.schedule = {ScheduleKind::Constant, 0.0};
  OptimizerState state(traj.size());
  for (int step = 0; step < cfg.steps; ++step) {
    auto [loss, grad] =
        weight_objective_and_grad(traj, result.weights.raw, dataset, cfg.beta, cfg.lambda);
    adamw_step(result.weights.raw, grad, state, opt, cfg.steps);
    result.loss_trace.push_back(loss);
  }
  return result;
}

// {"raw": [...], "alpha": [...], "lambda": .., "steps": .., "seed": ..},
// written alongside the merged checkpoint.
inline void write_merge_weights_json(const std::filesystem::path& path,
                                     const MergeWeights& weights,
                                     const WeightLearnConfig& cfg) {
  nlohmann::ordered_json obj;
  obj["raw"] = weights.raw;
  obj["alpha"] = weights.alpha();
  obj["lambda"] = cfg.lambda;
  obj["steps"] = cfg.steps;
  obj["seed"] = cfg.seed;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << obj.dump(2) << '\n';
}

inline MergeWeights read_merge_weights_json(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string() + " for reading");
  nlohmann::ordered_json obj;
  try {
    obj = nlohmann::ordered_json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("weights json: parse error: " + std::string(e.what()));
  }
  if (!obj.contains("raw") || !obj["raw"].is_array())
    throw FormatError("weights json: missing 'raw' array");
  MergeWeights w;
  w.raw = obj["raw"].get<std::vector<double>>();
  return w;
}

}  // namespace tpmm
