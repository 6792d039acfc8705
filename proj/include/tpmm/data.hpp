#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpmm/common.hpp"
#include "tpmm/policy.hpp"
#include "tpmm/rng.hpp"

// Synthetic corpora: seeded prompt generation, the gold reward oracle that
// labels and judges everything, preference-pair construction, the label-flip
// noise protocol, and JSONL dataset I/O.

namespace tpmm {

// Seeded bigram score table plus a length penalty. Used both to label
// preference pairs and to judge policies, so labels and evaluation share one
// notion of quality.
struct GoldRewardModel {
  int vocab_size = 0;
  std::uint64_t seed = 0;
  double length_penalty = 0.05;
  std::vector<double> table;  // V*V, row = previous token

  double at(std::int32_t prev, std::int32_t next) const {
    return table[static_cast<std::size_t>(prev) * vocab_size +
                 static_cast<std::size_t>(next)];
  }
};

inline GoldRewardModel make_gold_rm(int vocab_size, std::uint64_t seed,
                                    double length_penalty = 0.05) {
  if (vocab_size < 2) throw ConfigError("gold rm: vocab_size must be >= 2");
  if (length_penalty < 0) throw ConfigError("gold rm: length_penalty must be >= 0");
  GoldRewardModel rm;
  rm.vocab_size = vocab_size;
  rm.seed = seed;
  rm.length_penalty = length_penalty;
  rm.table.resize(static_cast<std::size_t>(vocab_size) * vocab_size);
  Rng rng(derive_seed(seed, "gold_rm_table"));
  for (double& v : rm.table) v = rng.normal();
  return rm;
}

/// Score of a response under the oracle: sum of consecutive-pair table
/// entries (the last prompt token seeds the chain) minus
/// length_penalty * |response|.
inline double gold_reward(const GoldRewardModel& rm, const TokenSeq& prompt,
                          const TokenSeq& response) {
  check_token_range(prompt, rm.vocab_size);
  check_token_range(response, rm.vocab_size);
  std::int32_t prev = prompt.tokens.empty() ? kEosToken : prompt.tokens.back();
  double total = 0.0;
  for (std::int32_t tok : response.tokens) {
    total += rm.at(prev, tok);
    prev = tok;
  }
  return total - rm.length_penalty * static_cast<double>(response.tokens.size());
}

enum class PromptDistKind : std::uint8_t { UniformNonEos, SkewedZipf };

struct PromptDist {
  PromptDistKind kind = PromptDistKind::UniformNonEos;
  double zipf_s = 1.0;  // SkewedZipf exponent

  friend bool operator==(const PromptDist&, const PromptDist&) = default;
};

/// Seeded prompt generation over content tokens {1, .., V-1}. SkewedZipf(s)
/// draws token i with probability proportional to i^(-s), giving the
/// distribution-shift axis for out-of-domain evaluation.
inline std::vector<TokenSeq> generate_prompts(int count, int prompt_len, int vocab_size,
                                              std::uint64_t seed, const PromptDist& dist) {
  if (count < 1) throw ConfigError("generate_prompts: count must be >= 1");
  if (prompt_len < 1) throw ConfigError("generate_prompts: prompt_len must be >= 1");
  if (vocab_size < 2) throw ConfigError("generate_prompts: vocab_size must be >= 2");
  if (dist.kind == PromptDistKind::SkewedZipf && dist.zipf_s < 0)
    throw ConfigError("generate_prompts: zipf exponent must be >= 0");

  std::vector<double> pmf;
  if (dist.kind == PromptDistKind::SkewedZipf) {
    pmf.resize(static_cast<std::size_t>(vocab_size - 1));
    for (int i = 1; i < vocab_size; ++i)
      pmf[static_cast<std::size_t>(i - 1)] = std::pow(static_cast<double>(i), -dist.zipf_s);
  }

  std::vector<TokenSeq> prompts;
  prompts.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "prompt", static_cast<std::uint64_t>(i)));
    std::vector<std::int32_t> toks(static_cast<std::size_t>(prompt_len));
    for (auto& t : toks) {
      if (dist.kind == PromptDistKind::UniformNonEos)
        t = 1 + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab_size - 1)));
      else
        t = 1 + static_cast<std::int32_t>(rng.categorical(pmf));
    }
    prompts.push_back(prompt_seq(std::move(toks)));
  }
  return prompts;
}

// One preference pair. gold_reward_chosen/rejected hold the pre-flip values
// assigned at construction, so the original ordering stays recoverable after
// label noise swaps the sequences.
struct PreferenceExample {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;
  bool flipped = false;
  std::optional<double> gold_reward_chosen;
  std::optional<double> gold_reward_rejected;
};

using Dataset = std::vector<PreferenceExample>;

/// Best-of-k / worst-of-k pair construction: k sampled candidates per prompt,
/// chosen = highest gold reward, rejected = lowest, ties to the earlier
/// sample. Prompts whose candidates are all the same sequence yield no pair
/// and are dropped.
inline Dataset build_preference_pairs(const PolicyCheckpoint& policy,
                                      const std::vector<TokenSeq>& prompts, int k,
                                      const GoldRewardModel& rm, const DecodeConfig& decode,
                                      std::uint64_t seed) {
  if (k < 2) throw ConfigError("build_preference_pairs: k must be >= 2");
  if (policy.spec.vocab_size != rm.vocab_size)
    throw InputError("build_preference_pairs: policy and gold rm vocab sizes differ");
  Dataset out;
  out.reserve(prompts.size());
  std::vector<TokenSeq> cands(static_cast<std::size_t>(k));
  std::vector<double> rewards(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (int j = 0; j < k; ++j) {
      cands[static_cast<std::size_t>(j)] = sample_response(
          policy, prompts[i], decode,
          derive_seed(seed, "candidate", static_cast<std::uint64_t>(i),
                      static_cast<std::uint64_t>(j)));
      rewards[static_cast<std::size_t>(j)] =
          gold_reward(rm, prompts[i], cands[static_cast<std::size_t>(j)]);
    }
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (rewards[static_cast<std::size_t>(j)] > rewards[static_cast<std::size_t>(best)]) best = j;
    // Lowest-reward candidate whose sequence differs from the chosen one;
    // identical sequences cannot form a pair.
    int worst = -1;
    for (int j = 0; j < k; ++j) {
      if (cands[static_cast<std::size_t>(j)] == cands[static_cast<std::size_t>(best)]) continue;
      if (worst < 0 || rewards[static_cast<std::size_t>(j)] < rewards[static_cast<std::size_t>(worst)])
        worst = j;
    }
    if (worst < 0) continue;  // all candidates identical
    PreferenceExample ex;
    ex.prompt = prompts[i];
    ex.chosen = cands[static_cast<std::size_t>(best)];
    ex.rejected = cands[static_cast<std::size_t>(worst)];
    ex.flipped = false;
    ex.gold_reward_chosen = rewards[static_cast<std::size_t>(best)];
    ex.gold_reward_rejected = rewards[static_cast<std::size_t>(worst)];
    out.push_back(std::move(ex));
  }
  return out;
}

struct NoiseSpec {
  double p = 0.0;
  std::uint64_t seed = 0;
};

/// Independently per example, with probability p, swaps chosen and rejected
/// and toggles the flipped flag. Reward fields keep their pre-flip values.
/// Returns a new dataset; the input is untouched.
inline Dataset inject_label_noise(const Dataset& dataset, const NoiseSpec& spec) {
  if (spec.p < 0.0 || spec.p > 1.0)
    throw ConfigError("inject_label_noise: noise_p must be in [0, 1], got " +
                      std::to_string(spec.p));
  Dataset out = dataset;
  Rng rng(derive_seed(spec.seed, "label_noise"));
  for (PreferenceExample& ex : out) {
    if (rng.uniform01() < spec.p) {
      std::swap(ex.chosen, ex.rejected);
      ex.flipped = !ex.flipped;
    }
  }
  return out;
}

namespace detail {

inline nlohmann::ordered_json tokens_to_json(const TokenSeq& seq) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (std::int32_t t : seq.tokens) arr.push_back(t);
  return arr;
}

inline std::vector<std::int32_t> tokens_from_json(const nlohmann::ordered_json& arr,
                                                  const std::string& field, std::size_t line) {
  if (!arr.is_array())
    throw FormatError("dataset line " + std::to_string(line) + ": field '" + field +
                      "' must be an integer array");
  std::vector<std::int32_t> out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_number_integer())
      throw FormatError("dataset line " + std::to_string(line) + ": field '" + field +
                        "' must contain only integers");
    out.push_back(v.get<std::int32_t>());
  }
  return out;
}

}  // namespace detail

// JSONL schema, one object per line:
//   {"prompt": [...], "chosen": [...], "rejected": [...], "flipped": bool,
//    "gold_reward_chosen": num|null, "gold_reward_rejected": num|null}
inline void write_dataset_jsonl(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const PreferenceExample& ex : dataset) {
    nlohmann::ordered_json obj;
    obj["prompt"] = detail::tokens_to_json(ex.prompt);
    obj["chosen"] = detail::tokens_to_json(ex.chosen);
    obj["rejected"] = detail::tokens_to_json(ex.rejected);
    obj["flipped"] = ex.flipped;
    obj["gold_reward_chosen"] =
        ex.gold_reward_chosen ? nlohmann::ordered_json(*ex.gold_reward_chosen)
                              : nlohmann::ordered_json(nullptr);
    obj["gold_reward_rejected"] =
        ex.gold_reward_rejected ? nlohmann::ordered_json(*ex.gold_reward_rejected)
                                : nlohmann::ordered_json(nullptr);
    os << obj.dump() << '\n';
  }
  if (!os) throw IoError("write failed for " + path.string());
}

inline Dataset read_dataset_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string() + " for reading");
  Dataset out;
  std::string line;
  std::size_t line_no = 0;
  static const std::vector<std::string> kRequired = {
      "prompt", "chosen", "rejected", "flipped", "gold_reward_chosen", "gold_reward_rejected"};
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::ordered_json obj;
    try {
      obj = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": parse error: " + e.what());
    }
    if (!obj.is_object())
      throw FormatError("dataset line " + std::to_string(line_no) + ": not a JSON object");
    for (const std::string& f : kRequired)
      if (!obj.contains(f))
        throw FormatError("dataset line " + std::to_string(line_no) +
                          ": missing required field '" + f + "'");
    for (const auto& item : obj.items())
      if (std::find(kRequired.begin(), kRequired.end(), item.key()) == kRequired.end())
        throw FormatError("dataset line " + std::to_string(line_no) + ": unknown field '" +
                          item.key() + "'");

    PreferenceExample ex;
    ex.prompt = prompt_seq(detail::tokens_from_json(obj["prompt"], "prompt", line_no));
    ex.chosen = response_seq(detail::tokens_from_json(obj["chosen"], "chosen", line_no));
    ex.rejected = response_seq(detail::tokens_from_json(obj["rejected"], "rejected", line_no));
    if (!obj["flipped"].is_boolean())
      throw FormatError("dataset line " + std::to_string(line_no) + ": field 'flipped' must be a bool");
    ex.flipped = obj["flipped"].get<bool>();
    for (const char* f : {"gold_reward_chosen", "gold_reward_rejected"}) {
      const auto& v = obj[f];
      if (!v.is_null() && !v.is_number())
        throw FormatError("dataset line " + std::to_string(line_no) + ": field '" +
                          std::string(f) + "' must be a number or null");
    }
    if (!obj["gold_reward_chosen"].is_null())
      ex.gold_reward_chosen = obj["gold_reward_chosen"].get<double>();
    if (!obj["gold_reward_rejected"].is_null())
      ex.gold_reward_rejected = obj["gold_reward_rejected"].get<double>();
    if (ex.chosen == ex.rejected)
      throw FormatError("dataset line " + std::to_string(line_no) +
                        ": chosen and rejected are identical sequences");
    out.push_back(std::move(ex));
  }
  return out;
}

// Gold RM persistence: the table is regenerated from the seed, never stored.
inline void write_gold_rm_json(const std::filesystem::path& path, const GoldRewardModel& rm) {
  nlohmann::ordered_json obj;
  obj["v"] = rm.vocab_size;
  obj["seed"] = rm.seed;
  obj["length_penalty"] = rm.length_penalty;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << obj.dump(2) << '\n';
}

inline GoldRewardModel read_gold_rm_json(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string() + " for reading");
  nlohmann::ordered_json obj;
  try {
    obj = nlohmann::ordered_json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("gold rm json: parse error: " + std::string(e.what()));
  }
  for (const char* f : {"v", "seed", "length_penalty"})
    if (!obj.contains(f)) throw FormatError(std::string("gold rm json: missing field '") + f + "'");
  return make_gold_rm(obj["v"].get<int>(), obj["seed"].get<std::uint64_t>(),
                      obj["length_penalty"].get<double>());
}

}  // namespace tpmm
