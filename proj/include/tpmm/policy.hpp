#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tpmm/common.hpp"
#include "tpmm/rng.hpp"

// Desk-scale autoregressive policy models. Both families expose exact
// log-probabilities, exact parameter gradients, and seeded sampling over a
// flat 64-bit parameter vector, which is the unit of parameter-space merging.

namespace tpmm {

inline constexpr std::int32_t kEosToken = 0;

enum class Family : std::uint8_t { TabularBigram = 0, TinyNeuralLM = 1 };

inline const char* family_name(Family f) {
  return f == Family::TabularBigram ? "tabular_bigram" : "tiny_neural_lm";
}

struct ModelSpec {
  Family family = Family::TabularBigram;
  int vocab_size = 0;        // V, includes reserved EOS token id 0
  int context_window = 0;    // k, TinyNeuralLM only
  int embed_dim = 0;         // d, TinyNeuralLM only
  int hidden_dim = 0;        // h, TinyNeuralLM only
  int max_response_len = 0;  // response length cap, EOS included

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline void validate_spec(const ModelSpec& spec) {
  if (spec.vocab_size < 2)
    throw ValidationError("model spec: vocab_size must be >= 2 (EOS plus at least one content token)");
  if (spec.max_response_len < 1)
    throw ValidationError("model spec: max_response_len must be >= 1");
  if (spec.family == Family::TinyNeuralLM) {
    if (spec.context_window < 1)
      throw ValidationError("model spec: context_window must be >= 1 for tiny_neural_lm");
    if (spec.embed_dim < 1)
      throw ValidationError("model spec: embed_dim must be >= 1 for tiny_neural_lm");
    if (spec.hidden_dim < 1)
      throw ValidationError("model spec: hidden_dim must be >= 1 for tiny_neural_lm");
  } else {
    if (spec.context_window != 0)
      throw ValidationError("model spec: context_window must be 0 for tabular_bigram");
    if (spec.embed_dim != 0)
      throw ValidationError("model spec: embed_dim must be 0 for tabular_bigram");
    if (spec.hidden_dim != 0)
      throw ValidationError("model spec: hidden_dim must be 0 for tabular_bigram");
  }
}

// V*V for the bigram table; embeddings + hidden layer + output layer for the
// neural family.
inline std::size_t param_count(const ModelSpec& spec) {
  const std::size_t v = static_cast<std::size_t>(spec.vocab_size);
  if (spec.family == Family::TabularBigram) return v * v;
  const std::size_t k = static_cast<std::size_t>(spec.context_window);
  const std::size_t d = static_cast<std::size_t>(spec.embed_dim);
  const std::size_t h = static_cast<std::size_t>(spec.hidden_dim);
  return v * d + (k * d * h + h) + (h * v + v);
}

// Flat-vector offsets for the TinyNeuralLM layout:
//   [ E: V x d | W1: (k*d) x h | b1: h | W2: h x V | b2: V ]
struct NeuralLayout {
  std::size_t emb = 0, w1 = 0, b1 = 0, w2 = 0, b2 = 0;

  explicit NeuralLayout(const ModelSpec& s) {
    const std::size_t v = static_cast<std::size_t>(s.vocab_size);
    const std::size_t kd = static_cast<std::size_t>(s.context_window) *
                           static_cast<std::size_t>(s.embed_dim);
    const std::size_t h = static_cast<std::size_t>(s.hidden_dim);
    emb = 0;
    w1 = v * static_cast<std::size_t>(s.embed_dim);
    b1 = w1 + kd * h;
    w2 = b1 + h;
    b2 = w2 + h * v;
  }
};

enum class Role : std::uint8_t { Prompt, Response };

struct TokenSeq {
  std::vector<std::int32_t> tokens;
  Role role = Role::Prompt;

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

inline TokenSeq prompt_seq(std::vector<std::int32_t> tokens) {
  return TokenSeq{std::move(tokens), Role::Prompt};
}

inline TokenSeq response_seq(std::vector<std::int32_t> tokens) {
  return TokenSeq{std::move(tokens), Role::Response};
}

inline void check_token_range(const TokenSeq& seq, int vocab_size) {
  for (std::int32_t t : seq.tokens)
    if (t < 0 || t >= vocab_size)
      throw InputError("token id " + std::to_string(t) + " out of range [0, " +
                       std::to_string(vocab_size) + ")");
}

// Prompts carry no EOS; responses are nonempty, end in exactly one EOS, and
// respect max_response_len.
inline void validate_prompt(const TokenSeq& seq, const ModelSpec& spec) {
  check_token_range(seq, spec.vocab_size);
  for (std::int32_t t : seq.tokens)
    if (t == kEosToken) throw ValidationError("prompt contains EOS token");
}

inline void validate_response(const TokenSeq& seq, const ModelSpec& spec) {
  check_token_range(seq, spec.vocab_size);
  if (seq.tokens.empty()) throw ValidationError("response is empty");
  if (seq.tokens.back() != kEosToken)
    throw ValidationError("response does not end in EOS");
  for (std::size_t i = 0; i + 1 < seq.tokens.size(); ++i)
    if (seq.tokens[i] == kEosToken)
      throw ValidationError("response contains EOS before final position");
  if (static_cast<int>(seq.tokens.size()) > spec.max_response_len)
    throw ValidationError("response length " + std::to_string(seq.tokens.size()) +
                          " exceeds max_response_len " +
                          std::to_string(spec.max_response_len));
}

// One point of the optimization trajectory: a spec plus its flat parameter
// vector. Immutable by convention after construction; training and merging
// produce new checkpoints.
struct PolicyCheckpoint {
  ModelSpec spec;
  std::vector<double> params;
  int iteration_index = 0;
  std::string label;
};

inline void validate_checkpoint(const PolicyCheckpoint& ckpt) {
  validate_spec(ckpt.spec);
  if (ckpt.params.size() != param_count(ckpt.spec))
    throw ValidationError("checkpoint param vector length " +
                          std::to_string(ckpt.params.size()) +
                          " does not match spec param_count " +
                          std::to_string(param_count(ckpt.spec)));
  for (double p : ckpt.params)
    if (!std::isfinite(p)) throw ValidationError("checkpoint contains non-finite parameter");
  if (ckpt.iteration_index < 0)
    throw ValidationError("checkpoint iteration_index must be >= 0");
}

enum class InitKind : std::uint8_t { Zeros, SeededNormal };

struct InitSpec {
  InitKind kind = InitKind::Zeros;
  double stddev = 0.1;  // SeededNormal only
};

inline PolicyCheckpoint build_model(const ModelSpec& spec, const InitSpec& init,
                                    std::uint64_t seed) {
  validate_spec(spec);
  PolicyCheckpoint ckpt;
  ckpt.spec = spec;
  ckpt.params.assign(param_count(spec), 0.0);
  ckpt.iteration_index = 0;
  ckpt.label = "init";
  if (init.kind == InitKind::SeededNormal) {
    Rng rng(derive_seed(seed, "model_init"));
    for (double& p : ckpt.params) p = init.stddev * rng.normal();
  }
  return ckpt;
}

namespace detail {

// log(sum(exp(logits))) with max subtraction.
inline double log_sum_exp(const std::vector<double>& logits) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  return m + std::log(s);
}

// Context token feeding position `pos` of the response, counted back `back`
// steps (back = 1 is the immediately preceding token). Walks response, then
// prompt, then EOS padding.
inline std::int32_t context_token(const TokenSeq& prompt, const std::vector<std::int32_t>& resp,
                                  std::size_t pos, std::size_t back) {
  if (back <= pos) return resp[pos - back];
  std::size_t into_prompt = back - pos;  // >= 1
  if (into_prompt <= prompt.tokens.size())
    return prompt.tokens[prompt.tokens.size() - into_prompt];
  return kEosToken;
}

// Per-position forward pass state for TinyNeuralLM, kept for backprop.
struct NeuralForward {
  std::vector<std::int32_t> ctx;  // k context token ids, oldest first
  std::vector<double> input;      // k*d concatenated embeddings
  std::vector<double> hidden;     // h, tanh activations
  std::vector<double> logits;     // V
};

inline void neural_forward(const ModelSpec& spec, const std::vector<double>& params,
                           const NeuralLayout& lay, NeuralForward& f) {
  const int k = spec.context_window, d = spec.embed_dim, h = spec.hidden_dim,
            v = spec.vocab_size;
  f.input.resize(static_cast<std::size_t>(k) * d);
  for (int j = 0; j < k; ++j) {
    const double* e = params.data() + lay.emb + static_cast<std::size_t>(f.ctx[j]) * d;
    std::copy(e, e + d, f.input.begin() + static_cast<std::size_t>(j) * d);
  }
  f.hidden.assign(static_cast<std::size_t>(h), 0.0);
  const double* w1 = params.data() + lay.w1;
  const double* b1 = params.data() + lay.b1;
  for (int i = 0; i < k * d; ++i) {
    const double xi = f.input[static_cast<std::size_t>(i)];
    const double* row = w1 + static_cast<std::size_t>(i) * h;
    for (int m = 0; m < h; ++m) f.hidden[static_cast<std::size_t>(m)] += xi * row[m];
  }
  for (int m = 0; m < h; ++m)
    f.hidden[static_cast<std::size_t>(m)] = std::tanh(f.hidden[static_cast<std::size_t>(m)] + b1[m]);
  f.logits.assign(static_cast<std::size_t>(v), 0.0);
  const double* w2 = params.data() + lay.w2;
  const double* b2 = params.data() + lay.b2;
  for (int m = 0; m < h; ++m) {
    const double zm = f.hidden[static_cast<std::size_t>(m)];
    const double* row = w2 + static_cast<std::size_t>(m) * v;
    for (int t = 0; t < v; ++t) f.logits[static_cast<std::size_t>(t)] += zm * row[t];
  }
  for (int t = 0; t < v; ++t) f.logits[static_cast<std::size_t>(t)] += b2[t];
}

// Logits over the next token given the tokens generated so far.
inline void next_token_logits(const PolicyCheckpoint& model, const TokenSeq& prompt,
                              const std::vector<std::int32_t>& so_far, std::size_t pos,
                              std::vector<double>& logits) {
  const ModelSpec& spec = model.spec;
  const int v = spec.vocab_size;
  if (spec.family == Family::TabularBigram) {
    const std::int32_t ctx = context_token(prompt, so_far, pos, 1);
    logits.assign(static_cast<std::size_t>(v), 0.0);
    const double* row = model.params.data() + static_cast<std::size_t>(ctx) * v;
    std::copy(row, row + v, logits.begin());
  } else {
    NeuralForward f;
    const int k = spec.context_window;
    f.ctx.resize(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j)
      f.ctx[static_cast<std::size_t>(j)] =
          context_token(prompt, so_far, pos, static_cast<std::size_t>(k - j));
    NeuralLayout lay(spec);
    neural_forward(spec, model.params, lay, f);
    logits = std::move(f.logits);
  }
}

}  // namespace detail

/// Exact log pi(response | prompt): sum over response positions (EOS
/// included) of per-token log-softmax probabilities.
inline double log_prob(const PolicyCheckpoint& model, const TokenSeq& prompt,
                       const TokenSeq& response) {
  check_token_range(prompt, model.spec.vocab_size);
  check_token_range(response, model.spec.vocab_size);
  double total = 0.0;
  std::vector<double> logits;
  for (std::size_t u = 0; u < response.tokens.size(); ++u) {
    detail::next_token_logits(model, prompt, response.tokens, u, logits);
    total += logits[static_cast<std::size_t>(response.tokens[u])] -
             detail::log_sum_exp(logits);
  }
  return total;
}

/// Exact gradient of log_prob with respect to the flat parameter vector.
inline std::vector<double> grad_log_prob(const PolicyCheckpoint& model,
                                         const TokenSeq& prompt,
                                         const TokenSeq& response) {
  check_token_range(prompt, model.spec.vocab_size);
  check_token_range(response, model.spec.vocab_size);
  const ModelSpec& spec = model.spec;
  const int v = spec.vocab_size;
  std::vector<double> grad(model.params.size(), 0.0);

  if (spec.family == Family::TabularBigram) {
    std::vector<double> logits, probs(static_cast<std::size_t>(v));
    for (std::size_t u = 0; u < response.tokens.size(); ++u) {
      const std::int32_t ctx = detail::context_token(prompt, response.tokens, u, 1);
      detail::next_token_logits(model, prompt, response.tokens, u, logits);
      const double lse = detail::log_sum_exp(logits);
      double* row = grad.data() + static_cast<std::size_t>(ctx) * v;
      for (int t = 0; t < v; ++t) row[t] -= std::exp(logits[static_cast<std::size_t>(t)] - lse);
      row[response.tokens[u]] += 1.0;
    }
    return grad;
  }

  const int k = spec.context_window, d = spec.embed_dim, h = spec.hidden_dim;
  NeuralLayout lay(spec);
  detail::NeuralForward f;
  f.ctx.resize(static_cast<std::size_t>(k));
  std::vector<double> dlogit(static_cast<std::size_t>(v));
  std::vector<double> dhidden(static_cast<std::size_t>(h));
  for (std::size_t u = 0; u < response.tokens.size(); ++u) {
    for (int j = 0; j < k; ++j)
      f.ctx[static_cast<std::size_t>(j)] =
          detail::context_token(prompt, response.tokens, u, static_cast<std::size_t>(k - j));
    detail::neural_forward(spec, model.params, lay, f);
    const double lse = detail::log_sum_exp(f.logits);
    for (int t = 0; t < v; ++t)
      dlogit[static_cast<std::size_t>(t)] = -std::exp(f.logits[static_cast<std::size_t>(t)] - lse);
    dlogit[response.tokens[u]] += 1.0;

    // Output layer.
    double* gw2 = grad.data() + lay.w2;
    double* gb2 = grad.data() + lay.b2;
    const double* w2 = model.params.data() + lay.w2;
    for (int m = 0; m < h; ++m) {
      const double zm = f.hidden[static_cast<std::size_t>(m)];
      double acc = 0.0;
      const double* row = w2 + static_cast<std::size_t>(m) * v;
      double* grow = gw2 + static_cast<std::size_t>(m) * v;
      for (int t = 0; t < v; ++t) {
        grow[t] += zm * dlogit[static_cast<std::size_t>(t)];
        acc += row[t] * dlogit[static_cast<std::size_t>(t)];
      }
      dhidden[static_cast<std::size_t>(m)] = acc * (1.0 - zm * zm);  // through tanh
    }
    for (int t = 0; t < v; ++t) gb2[t] += dlogit[static_cast<std::size_t>(t)];

    // Hidden layer and embeddings.
    double* gw1 = grad.data() + lay.w1;
    double* gb1 = grad.data() + lay.b1;
    const double* w1 = model.params.data() + lay.w1;
    for (int m = 0; m < h; ++m) gb1[m] += dhidden[static_cast<std::size_t>(m)];
    for (int i = 0; i < k * d; ++i) {
      const double xi = f.input[static_cast<std::size_t>(i)];
      const double* row = w1 + static_cast<std::size_t>(i) * h;
      double* grow = gw1 + static_cast<std::size_t>(i) * h;
      double dx = 0.0;
      for (int m = 0; m < h; ++m) {
        const double dm = dhidden[static_cast<std::size_t>(m)];
        grow[m] += xi * dm;
        dx += row[m] * dm;
      }
      const int slot = i / d;
      double* gemb = grad.data() + lay.emb +
                     static_cast<std::size_t>(f.ctx[static_cast<std::size_t>(slot)]) * d;
      gemb[i % d] += dx;
    }
  }
  return grad;
}

struct DecodeConfig {
  double temperature = 1.0;  // 0 means greedy argmax, ties to lowest token id
  int max_len = 0;           // response length cap, EOS included
};

/// Draws one response. Terminates at the first sampled EOS; if max_len - 1
/// content tokens arrive without one, EOS is appended so the response always
/// fits max_len and ends in EOS. Pure function of (model, prompt, decode,
/// rng_seed).
inline TokenSeq sample_response(const PolicyCheckpoint& model, const TokenSeq& prompt,
                                const DecodeConfig& decode, std::uint64_t rng_seed) {
  if (decode.max_len < 1) throw ConfigError("decode: max_len must be >= 1");
  if (decode.temperature < 0) throw ConfigError("decode: temperature must be >= 0");
  check_token_range(prompt, model.spec.vocab_size);
  const int v = model.spec.vocab_size;
  Rng rng(derive_seed(rng_seed, "sample"));
  std::vector<std::int32_t> out;
  std::vector<double> logits, probs(static_cast<std::size_t>(v));
  while (static_cast<int>(out.size()) < decode.max_len - 1) {
    detail::next_token_logits(model, prompt, out, out.size(), logits);
    std::int32_t tok;
    if (decode.temperature == 0.0) {
      tok = 0;
      for (int t = 1; t < v; ++t)
        if (logits[static_cast<std::size_t>(t)] > logits[static_cast<std::size_t>(tok)]) tok = t;
    } else {
      double m = logits[0];
      for (double l : logits) m = std::max(m, l);
      for (int t = 0; t < v; ++t)
        probs[static_cast<std::size_t>(t)] =
            std::exp((logits[static_cast<std::size_t>(t)] - m) / decode.temperature);
      tok = static_cast<std::int32_t>(rng.categorical(probs));
    }
    out.push_back(tok);
    if (tok == kEosToken) return response_seq(std::move(out));
  }
  out.push_back(kEosToken);
  return response_seq(std::move(out));
}

}  // namespace tpmm
