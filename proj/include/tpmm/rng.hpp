#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "tpmm/common.hpp"

// Deterministic, splittable random streams. Everything downstream of a seed
// is bit-reproducible across runs and platforms, so no std::* distributions
// (their output is implementation-defined).

namespace tpmm {

// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Derives an independent child seed from (seed, parts...). Used for
// per-round / per-purpose / per-item stream splitting.
inline std::uint64_t derive_seed(std::uint64_t seed) { return mix64(seed); }

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t part, Rest... rest);
template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, Rest... rest);

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t part, Rest... rest) {
  return derive_seed(mix64(seed ^ mix64(part)), rest...);
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, Rest... rest) {
  return derive_seed(seed, fnv1a64(purpose), rest...);
}

// Counter-based splitmix64 stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Lemire multiply-shift; bias is O(n / 2^64).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller. Two uniforms per draw, no cached spare.
  double normal() {
    double u1 = 1.0 - uniform01();  // (0, 1]
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Index draw from an explicit probability vector (inverse CDF in index
  // order). Probabilities must be nonnegative; they are normalized by sum.
  std::size_t categorical(const std::vector<double>& probs) {
    if (probs.empty()) throw InputError("categorical: empty probability vector");
    double total = 0.0;
    for (double p : probs) total += p;
    double u = uniform01() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) return i;
    }
    return probs.size() - 1;
  }

 private:
  std::uint64_t state_;
};

}  // namespace tpmm
