#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "tpmm/rng.hpp"

using namespace tpmm;

TEST_CASE("fnv1a64 matches the published test vectors") {
  CHECK(fnv1a64("") == 0xCBF29CE484222325ULL);  // offset basis
  CHECK(fnv1a64("a") == 0xAF63DC4C8601EC8CULL);
  CHECK(fnv1a64("foobar") == 0x85944171F73967E8ULL);
}

TEST_CASE("derive_seed separates purposes and orders") {
  const std::uint64_t s = 42;
  CHECK(derive_seed(s, "pairs") != derive_seed(s, "noise"));
  CHECK(derive_seed(s, "a", "b") != derive_seed(s, "b", "a"));
  CHECK(derive_seed(s, "pairs", std::uint64_t{1}) !=
        derive_seed(s, "pairs", std::uint64_t{2}));
  CHECK(derive_seed(s, "pairs", std::uint64_t{1}) ==
        derive_seed(s, "pairs", std::uint64_t{1}));
  CHECK(derive_seed(s) != derive_seed(s + 1));
}

TEST_CASE("identical seeds give identical streams, different seeds diverge") {
  Rng a(123), b(123), c(124);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    const auto xa = a.next_u64();
    all_equal = all_equal && (xa == b.next_u64());
    any_diff = any_diff || (xa != c.next_u64());
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("uniform01 stays in [0,1) with a sane mean") {
  Rng rng(7);
  const int n = 20000;
  double sum = 0.0;
  bool in_range = true;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform01();
    in_range = in_range && u >= 0.0 && u < 1.0;
    sum += u;
  }
  CHECK(in_range);
  // mean of n uniforms: sd = 1/sqrt(12n); allow 5 sigma
  CHECK(std::abs(sum / n - 0.5) < 5.0 / std::sqrt(12.0 * n));
}

TEST_CASE("below(n) covers [0,n) and hits every bucket") {
  Rng rng(11);
  std::vector<int> hits(10, 0);
  for (int i = 0; i < 10000; ++i) {
    const auto v = rng.below(10);
    REQUIRE(v < 10);
    ++hits[static_cast<std::size_t>(v)];
  }
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h > 0; }));
  for (int i = 0; i < 50; ++i) CHECK(rng.below(1) == 0);
}

TEST_CASE("normal() has standard moments") {
  Rng rng(3);
  const int n = 40000;
  double sum = 0.0, sumsq = 0.0;
  bool finite = true;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    finite = finite && std::isfinite(x);
    sum += x;
    sumsq += x * x;
  }
  CHECK(finite);
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 5.0 / std::sqrt(static_cast<double>(n)));
  CHECK(var == Catch::Approx(1.0).margin(0.05));
}

TEST_CASE("shuffle permutes and is seed-deterministic") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  const std::vector<int> original = v;

  Rng rng(99);
  rng.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == original);
  CHECK(v != original);  // 50 elements: identity permutation is astronomically unlikely

  std::vector<int> w = original;
  Rng rng2(99);
  rng2.shuffle(w);
  CHECK(w == v);

  std::vector<int> u = original;
  Rng rng3(100);
  rng3.shuffle(u);
  CHECK(u != v);
}

TEST_CASE("categorical respects point masses and proportions") {
  Rng rng(5);
  for (int i = 0; i < 20; ++i)
    CHECK(rng.categorical({0.0, 0.0, 1.0, 0.0}) == 2);

  int ones = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    ones += rng.categorical({1.0, 4.0}) == 1 ? 1 : 0;
  // Binomial(n, 0.8): 5 sigma band
  CHECK(std::abs(ones - 8000) < 5.0 * std::sqrt(n * 0.8 * 0.2));

  CHECK_THROWS_AS(rng.categorical({}), InputError);
}
