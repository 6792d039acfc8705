#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tpmm/data.hpp"
#include "test_util.hpp"

using namespace tpmm;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "tpmm_data_tests";
  fs::create_directories(dir);
  return dir / name;
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << text;
}

bool same_example(const PreferenceExample& a, const PreferenceExample& b) {
  return a.prompt == b.prompt && a.chosen == b.chosen && a.rejected == b.rejected &&
         a.flipped == b.flipped && a.gold_reward_chosen == b.gold_reward_chosen &&
         a.gold_reward_rejected == b.gold_reward_rejected;
}

bool same_dataset(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same_example(a[i], b[i])) return false;
  return true;
}

GoldRewardModel constant_rm(int v, double fill, double length_penalty) {
  GoldRewardModel rm;
  rm.vocab_size = v;
  rm.length_penalty = length_penalty;
  rm.table.assign(static_cast<std::size_t>(v) * v, fill);
  return rm;
}

}  // namespace

TEST_CASE("gold reward equals transition-table sum minus length penalty") {
  // Zero table: only the length penalty survives.
  const GoldRewardModel zero = constant_rm(4, 0.0, 0.05);
  CHECK(gold_reward(zero, prompt_seq({1, 2}), response_seq({3, 2, 1, 0})) ==
        -0.2);

  // All-ones table, V=3: each of the |response| transitions scores one.
  const GoldRewardModel ones = constant_rm(3, 1.0, 0.05);
  CHECK(gold_reward(ones, prompt_seq({2}), response_seq({1, 1, 0})) == 2.85);

  // Handcrafted table: prompt's last token seeds the chain, and an empty
  // prompt starts from EOS.
  GoldRewardModel rm = constant_rm(3, 0.0, 0.0);
  rm.table[static_cast<std::size_t>(2) * 3 + 1] = 5.0;   // 2 -> 1
  rm.table[static_cast<std::size_t>(1) * 3 + 0] = -1.0;  // 1 -> 0
  rm.table[static_cast<std::size_t>(0) * 3 + 1] = 0.25;  // EOS -> 1
  CHECK(gold_reward(rm, prompt_seq({1, 2}), response_seq({1, 0})) == 4.0);
  CHECK(gold_reward(rm, prompt_seq({}), response_seq({1, 0})) == -0.75);

  CHECK_THROWS_AS(gold_reward(rm, prompt_seq({7}), response_seq({1, 0})), InputError);
  CHECK_THROWS_AS(gold_reward(rm, prompt_seq({1}), response_seq({1, 3, 0})), InputError);
}

TEST_CASE("gold rm construction is seed-deterministic and validates inputs") {
  const GoldRewardModel a = make_gold_rm(5, 42);
  const GoldRewardModel b = make_gold_rm(5, 42);
  const GoldRewardModel c = make_gold_rm(5, 43);
  REQUIRE(a.table.size() == 25);
  CHECK(a.table == b.table);
  CHECK(a.table != c.table);
  CHECK(a.length_penalty == 0.05);

  CHECK_THROWS_AS(make_gold_rm(1, 0), ConfigError);
  CHECK_THROWS_AS(make_gold_rm(4, 0, -0.1), ConfigError);
}

TEST_CASE("prompt generation respects token range, count, and seed") {
  const PromptDist uniform{};
  auto prompts = generate_prompts(50, 4, 6, 11, uniform);
  REQUIRE(prompts.size() == 50);
  for (const TokenSeq& p : prompts) {
    REQUIRE(p.tokens.size() == 4);
    CHECK(p.role == Role::Prompt);
    for (std::int32_t t : p.tokens) {
      CHECK(t >= 1);
      CHECK(t < 6);
    }
  }
  auto again = generate_prompts(50, 4, 6, 11, uniform);
  CHECK(prompts == again);
  auto other = generate_prompts(50, 4, 6, 12, uniform);
  CHECK(prompts != other);

  CHECK_THROWS_AS(generate_prompts(0, 4, 6, 1, uniform), ConfigError);
  CHECK_THROWS_AS(generate_prompts(5, 0, 6, 1, uniform), ConfigError);
  CHECK_THROWS_AS(generate_prompts(5, 4, 1, 1, uniform), ConfigError);
  CHECK_THROWS_AS(generate_prompts(5, 4, 6, 1, PromptDist{PromptDistKind::SkewedZipf, -1.0}),
                  ConfigError);
}

TEST_CASE("uniform prompts are balanced and zipf prompts are skewed") {
  const int v = 6;
  const int n = 2000, len = 4;
  const double draws = static_cast<double>(n) * len;

  std::vector<long> uni_counts(static_cast<std::size_t>(v), 0);
  for (const TokenSeq& p : generate_prompts(n, len, v, 5, PromptDist{}))
    for (std::int32_t t : p.tokens) ++uni_counts[static_cast<std::size_t>(t)];
  CHECK(uni_counts[0] == 0);
  const double p_uni = 1.0 / (v - 1);
  const double sigma_uni = std::sqrt(draws * p_uni * (1.0 - p_uni));
  for (int t = 1; t < v; ++t)
    CHECK(std::abs(uni_counts[static_cast<std::size_t>(t)] - draws * p_uni) <= 5.0 * sigma_uni);

  // Zipf(1.2) over {1..5}: expected frequencies are strictly decreasing in the
  // token id, and token 1 is far more common than token 5.
  std::vector<long> zipf_counts(static_cast<std::size_t>(v), 0);
  for (const TokenSeq& p :
       generate_prompts(n, len, v, 5, PromptDist{PromptDistKind::SkewedZipf, 1.2}))
    for (std::int32_t t : p.tokens) ++zipf_counts[static_cast<std::size_t>(t)];
  CHECK(zipf_counts[0] == 0);
  double z = 0.0;
  for (int i = 1; i < v; ++i) z += std::pow(static_cast<double>(i), -1.2);
  for (int t = 1; t < v; ++t) {
    const double pt = std::pow(static_cast<double>(t), -1.2) / z;
    const double sigma = std::sqrt(draws * pt * (1.0 - pt));
    CHECK(std::abs(zipf_counts[static_cast<std::size_t>(t)] - draws * pt) <= 5.0 * sigma);
  }
  CHECK(zipf_counts[1] > 2 * zipf_counts[5]);
}

TEST_CASE("preference pairs rank candidates by gold reward") {
  const ModelSpec spec = testutil::bigram_spec(6, 6);
  const PolicyCheckpoint policy = testutil::random_model(spec, 303);
  const GoldRewardModel rm = make_gold_rm(6, 21);
  const auto prompts = generate_prompts(40, 3, 6, 9, PromptDist{});
  const DecodeConfig decode{1.0, spec.max_response_len};

  const Dataset ds = build_preference_pairs(policy, prompts, 4, rm, decode, 77);
  REQUIRE(!ds.empty());
  for (const PreferenceExample& ex : ds) {
    CHECK_NOTHROW(validate_response(ex.chosen, spec));
    CHECK_NOTHROW(validate_response(ex.rejected, spec));
    CHECK(ex.chosen.tokens != ex.rejected.tokens);
    CHECK(!ex.flipped);
    REQUIRE(ex.gold_reward_chosen.has_value());
    REQUIRE(ex.gold_reward_rejected.has_value());
    // Stored scores are exactly what the oracle reports for the stored pair.
    CHECK(*ex.gold_reward_chosen == gold_reward(rm, ex.prompt, ex.chosen));
    CHECK(*ex.gold_reward_rejected == gold_reward(rm, ex.prompt, ex.rejected));
    CHECK(*ex.gold_reward_chosen >= *ex.gold_reward_rejected);
  }

  const Dataset again = build_preference_pairs(policy, prompts, 4, rm, decode, 77);
  CHECK(same_dataset(ds, again));
  const Dataset other = build_preference_pairs(policy, prompts, 4, rm, decode, 78);
  CHECK(!same_dataset(ds, other));

  CHECK_THROWS_AS(build_preference_pairs(policy, prompts, 1, rm, decode, 0), ConfigError);
  const GoldRewardModel small_rm = make_gold_rm(4, 21);
  CHECK_THROWS_AS(build_preference_pairs(policy, prompts, 4, small_rm, decode, 0), InputError);
}

TEST_CASE("degenerate sampling drops prompts whose candidates all agree") {
  // Temperature 0 makes every candidate identical, so no pair can be formed.
  const ModelSpec spec = testutil::bigram_spec(5, 6);
  const PolicyCheckpoint policy = testutil::random_model(spec, 4);
  const GoldRewardModel rm = make_gold_rm(5, 1);
  const auto prompts = generate_prompts(10, 3, 5, 2, PromptDist{});
  const Dataset ds =
      build_preference_pairs(policy, prompts, 3, rm, DecodeConfig{0.0, 6}, 50);
  CHECK(ds.empty());
}

TEST_CASE("label noise flips exactly per probability and keeps rewards") {
  const Dataset ds = testutil::random_dataset(1234, 2000, 8);

  SECTION("p = 0 is the identity") {
    CHECK(same_dataset(inject_label_noise(ds, {0.0, 5}), ds));
  }

  SECTION("p = 1 swaps every pair but leaves reward fields in place") {
    const Dataset flipped = inject_label_noise(ds, {1.0, 5});
    REQUIRE(flipped.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      CHECK(flipped[i].chosen == ds[i].rejected);
      CHECK(flipped[i].rejected == ds[i].chosen);
      CHECK(flipped[i].flipped != ds[i].flipped);
      CHECK(flipped[i].gold_reward_chosen == ds[i].gold_reward_chosen);
      CHECK(flipped[i].gold_reward_rejected == ds[i].gold_reward_rejected);
    }
    // Same seed, applied twice: every example swaps back.
    CHECK(same_dataset(inject_label_noise(flipped, {1.0, 5}), ds));
  }

  SECTION("p = 0.5 flips a binomially plausible count, deterministically") {
    const Dataset noisy = inject_label_noise(ds, {0.5, 5});
    long flips = 0;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (noisy[i].flipped != ds[i].flipped) ++flips;
    // 5 sigma around n/2 for n = 2000.
    CHECK(std::abs(flips - 1000L) <= 112);
    CHECK(same_dataset(inject_label_noise(ds, {0.5, 5}), noisy));
    CHECK(!same_dataset(inject_label_noise(ds, {0.5, 6}), noisy));
    CHECK(same_dataset(ds, testutil::random_dataset(1234, 2000, 8)));  // input untouched
  }

  SECTION("out-of-range p is rejected") {
    CHECK_THROWS_AS(inject_label_noise(ds, {-0.01, 0}), ConfigError);
    CHECK_THROWS_AS(inject_label_noise(ds, {1.01, 0}), ConfigError);
  }
}

TEST_CASE("dataset jsonl round-trips every field") {
  Dataset ds = testutil::random_dataset(9, 25, 6);
  ds[3].flipped = true;
  std::swap(ds[3].chosen, ds[3].rejected);
  ds[7].gold_reward_chosen.reset();
  ds[7].gold_reward_rejected.reset();

  const fs::path p = temp_file("roundtrip.jsonl");
  write_dataset_jsonl(p, ds);
  const Dataset back = read_dataset_jsonl(p);
  CHECK(same_dataset(ds, back));

  // Byte-stable output: rewriting the parsed dataset reproduces the file.
  const fs::path q = temp_file("roundtrip2.jsonl");
  write_dataset_jsonl(q, back);
  std::ifstream a(p, std::ios::binary), b(q, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
}

TEST_CASE("dataset jsonl reader reports precise line-level failures") {
  const std::string good =
      R"({"prompt": [1], "chosen": [2, 0], "rejected": [1, 0], "flipped": false, )"
      R"("gold_reward_chosen": 0.5, "gold_reward_rejected": null})";

  SECTION("malformed json names the offending line") {
    const fs::path p = temp_file("bad_syntax.jsonl");
    spit(p, good + "\n" + good + "\n{not json\n");
    try {
      read_dataset_jsonl(p);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }

  SECTION("missing required field") {
    const fs::path p = temp_file("missing_field.jsonl");
    spit(p, R"({"prompt": [1], "chosen": [2, 0], "rejected": [1, 0], "flipped": false, )"
            R"("gold_reward_chosen": null})"
            "\n");
    try {
      read_dataset_jsonl(p);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("gold_reward_rejected") != std::string::npos);
    }
  }

  SECTION("unknown field") {
    const fs::path p = temp_file("unknown_field.jsonl");
    spit(p, good.substr(0, good.size() - 1) + R"(, "extra": 1})" + "\n");
    try {
      read_dataset_jsonl(p);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("unknown field") != std::string::npos);
      CHECK(std::string(e.what()).find("extra") != std::string::npos);
    }
  }

  SECTION("wrong field types") {
    const fs::path p = temp_file("bad_types.jsonl");
    spit(p, R"({"prompt": "x", "chosen": [2, 0], "rejected": [1, 0], "flipped": false, )"
            R"("gold_reward_chosen": null, "gold_reward_rejected": null})"
            "\n");
    CHECK_THROWS_AS(read_dataset_jsonl(p), FormatError);
    spit(p, R"({"prompt": [1], "chosen": [2, 0], "rejected": [1, 0], "flipped": "no", )"
            R"("gold_reward_chosen": null, "gold_reward_rejected": null})"
            "\n");
    CHECK_THROWS_AS(read_dataset_jsonl(p), FormatError);
    spit(p, R"({"prompt": [1.5], "chosen": [2, 0], "rejected": [1, 0], "flipped": false, )"
            R"("gold_reward_chosen": null, "gold_reward_rejected": null})"
            "\n");
    CHECK_THROWS_AS(read_dataset_jsonl(p), FormatError);
  }

  SECTION("identical chosen and rejected sequences are rejected") {
    const fs::path p = temp_file("degenerate.jsonl");
    spit(p, R"({"prompt": [1], "chosen": [2, 0], "rejected": [2, 0], "flipped": false, )"
            R"("gold_reward_chosen": null, "gold_reward_rejected": null})"
            "\n");
    try {
      read_dataset_jsonl(p);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("identical") != std::string::npos);
    }
  }

  SECTION("blank lines are skipped, missing file reports IoError") {
    const fs::path p = temp_file("blanks.jsonl");
    spit(p, "\n" + good + "\n\n" + good + "\n");
    CHECK(read_dataset_jsonl(p).size() == 2);
    CHECK_THROWS_AS(read_dataset_jsonl(temp_file("no_such.jsonl")), IoError);
  }
}

TEST_CASE("gold rm json persistence regenerates an identical table") {
  const GoldRewardModel rm = make_gold_rm(7, 999, 0.125);
  const fs::path p = temp_file("gold_rm.json");
  write_gold_rm_json(p, rm);
  const GoldRewardModel back = read_gold_rm_json(p);
  CHECK(back.vocab_size == 7);
  CHECK(back.seed == 999);
  CHECK(back.length_penalty == 0.125);
  CHECK(back.table == rm.table);

  spit(p, R"({"v": 7, "seed": 999})");
  CHECK_THROWS_AS(read_gold_rm_json(p), FormatError);
  spit(p, "{broken");
  CHECK_THROWS_AS(read_gold_rm_json(p), FormatError);
  CHECK_THROWS_AS(read_gold_rm_json(temp_file("absent.json")), IoError);
}
