#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "tpmm/dpo.hpp"
#include "test_util.hpp"

using namespace tpmm;

namespace {

constexpr double kLn2 = std::numbers::ln2;

PolicyCheckpoint with_params(PolicyCheckpoint model, const std::vector<double>& params) {
  model.params = params;
  return model;
}

}  // namespace

TEST_CASE("sigmoid and softplus are stable and satisfy their identities") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(softplus(0.0) == Catch::Approx(kLn2).margin(1e-15));
  CHECK(sigmoid(1000.0) == 1.0);
  CHECK(sigmoid(-1000.0) == Catch::Approx(0.0).margin(1e-300));
  CHECK(std::isfinite(softplus(1000.0)));
  CHECK(softplus(1000.0) == Catch::Approx(1000.0).margin(1e-9));
  CHECK(softplus(-1000.0) == Catch::Approx(0.0).margin(1e-300));
  for (double x : {-3.0, -0.5, 0.25, 2.0}) {
    CHECK(softplus(x) - softplus(-x) == Catch::Approx(x).margin(1e-12));
    CHECK(sigmoid(x) + sigmoid(-x) == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("preference loss is exactly ln 2 when policy equals reference") {
  for (const ModelSpec& spec :
       {testutil::bigram_spec(6), testutil::neural_spec(6, 3, 4, 5)}) {
    const PolicyCheckpoint model = testutil::random_model(spec, 17);
    const Dataset ds = testutil::random_dataset(99, 12, spec.vocab_size);
    const auto [loss, grad] = dpo_batch_loss_and_grad(model, model, ds, 0.25);
    CHECK(loss == Catch::Approx(kLn2).margin(1e-12));
    // z == 0 for every pair, so the per-pair coefficient is -beta/2; the
    // gradient need not vanish, but it must stay finite.
    for (double g : grad) CHECK(std::isfinite(g));
  }
}

TEST_CASE("a pair and its label swap can never both beat chance") {
  const ModelSpec spec = testutil::bigram_spec(5);
  const PolicyCheckpoint policy = testutil::random_model(spec, 1);
  const PolicyCheckpoint reference = testutil::random_model(spec, 2);
  const Dataset ds = testutil::random_dataset(7, 20, 5);
  for (const PreferenceExample& ex : ds) {
    PreferenceExample swapped = ex;
    std::swap(swapped.chosen, swapped.rejected);
    const double a = dpo_batch_loss_and_grad(policy, reference, {ex}, 0.5).first;
    const double b = dpo_batch_loss_and_grad(policy, reference, {swapped}, 0.5).first;
    CHECK(a + b >= 2.0 * kLn2 - 1e-12);
  }
}

TEST_CASE("preference gradient matches central finite differences") {
  for (const ModelSpec& spec :
       {testutil::bigram_spec(5), testutil::neural_spec(5, 3, 3, 4)}) {
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
      const PolicyCheckpoint policy =
          testutil::random_model(spec, derive_seed(400, "p", trial));
      const PolicyCheckpoint reference =
          testutil::random_model(spec, derive_seed(400, "r", trial));
      const Dataset ds = testutil::random_dataset(derive_seed(400, "d", trial), 6, 5);
      const double beta = 0.7;
      const auto [loss, analytic] = dpo_batch_loss_and_grad(policy, reference, ds, beta);
      CHECK(std::isfinite(loss));
      const auto numeric = testutil::fd_gradient(
          [&](const std::vector<double>& x) {
            return dpo_batch_loss_and_grad(with_params(policy, x), reference, ds, beta)
                .first;
          },
          policy.params);
      CHECK(testutil::rel_err_inf(analytic, numeric) <= 1e-6);
    }
  }
}

TEST_CASE("supervised loss equals mean response NLL with exact gradient") {
  // Uniform policy: every response of length L has log-probability -L ln V.
  const ModelSpec spec = testutil::bigram_spec(5);
  const PolicyCheckpoint uniform = build_model(spec, InitSpec{InitKind::Zeros, 0.0}, 0);
  Dataset ds;
  PreferenceExample a;
  a.prompt = prompt_seq({1, 2});
  a.chosen = response_seq({3, 0});        // length 2
  a.rejected = response_seq({1, 0});
  PreferenceExample b = a;
  b.chosen = response_seq({1, 2, 3, 0});  // length 4
  ds.push_back(a);
  ds.push_back(b);
  const auto [loss, grad] = sft_loss_and_grad(uniform, ds);
  CHECK(loss == Catch::Approx(3.0 * std::log(5.0)).margin(1e-12));

  for (const ModelSpec& s :
       {testutil::bigram_spec(5), testutil::neural_spec(5, 2, 3, 4)}) {
    const PolicyCheckpoint model = testutil::random_model(s, 31);
    const Dataset data = testutil::random_dataset(32, 8, 5);
    const auto [l, analytic] = sft_loss_and_grad(model, data);
    CHECK(std::isfinite(l));
    const auto numeric = testutil::fd_gradient(
        [&](const std::vector<double>& x) {
          return sft_loss_and_grad(with_params(model, x), data).first;
        },
        model.params);
    CHECK(testutil::rel_err_inf(analytic, numeric) <= 1e-6);
  }
}

TEST_CASE("adamw matches a hand-computed step") {
  DpoConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.adam_beta1 = 0.9;
  cfg.adam_beta2 = 0.999;
  cfg.adam_eps = 1e-8;
  cfg.weight_decay = 0.0;
  cfg.schedule = {ScheduleKind::Constant, 0.0};

  SECTION("bias correction makes the first step lr-sized") {
    std::vector<double> params = {0.0};
    const std::vector<double> grad = {1.0};
    OptimizerState state(1);
    adamw_step(params, grad, state, cfg, 1);
    // m_hat = v_hat = 1 exactly after one step with constant gradient.
    const double expected = -0.1 * (1.0 / (1.0 + 1e-8));
    CHECK(params[0] == Catch::Approx(expected).margin(1e-15));
    CHECK(state.step == 1);

    adamw_step(params, grad, state, cfg, 2);
    CHECK(params[0] == Catch::Approx(2.0 * expected).margin(1e-12));
    CHECK(state.step == 2);
  }

  SECTION("weight decay is decoupled from the gradient") {
    cfg.weight_decay = 0.5;
    std::vector<double> params = {2.0};
    OptimizerState state(1);
    adamw_step(params, {0.0}, state, cfg, 1);
    // Zero gradient: the only movement is -lr * wd * param.
    CHECK(params[0] == Catch::Approx(2.0 - 0.1 * 0.5 * 2.0).margin(1e-15));
  }

  SECTION("length mismatches are rejected") {
    std::vector<double> params = {0.0, 0.0};
    OptimizerState state(1);
    CHECK_THROWS_AS(adamw_step(params, {1.0, 1.0}, state, cfg, 1), InputError);
    OptimizerState ok(2);
    CHECK_THROWS_AS(adamw_step(params, {1.0}, ok, cfg, 1), InputError);
  }
}

TEST_CASE("lr schedule hits its endpoints exactly") {
  DpoConfig constant;
  constant.schedule = {ScheduleKind::Constant, 0.0};
  CHECK(schedule_factor(constant, 0, 10) == 1.0);
  CHECK(schedule_factor(constant, 10, 10) == 1.0);

  DpoConfig cosine;
  cosine.schedule = {ScheduleKind::CosineAnneal, 0.1};
  CHECK(schedule_factor(cosine, 0, 10) == 1.0);
  CHECK(schedule_factor(cosine, 10, 10) == Catch::Approx(0.1).margin(1e-15));
  CHECK(schedule_factor(cosine, 5, 10) ==
        Catch::Approx(0.1 + 0.9 * 0.5).margin(1e-12));
  CHECK_THROWS_AS(schedule_factor(cosine, 0, 0), ConfigError);

  DpoConfig warm = constant;
  warm.warmup_fraction = 0.5;  // 5 warmup steps out of 10
  CHECK(schedule_factor(warm, 0, 10) == Catch::Approx(0.2).margin(1e-15));
  CHECK(schedule_factor(warm, 4, 10) == 1.0);
  CHECK(schedule_factor(warm, 5, 10) == 1.0);
}

TEST_CASE("training reduces the loss it optimizes") {
  const ModelSpec spec = testutil::bigram_spec(6);
  const PolicyCheckpoint init = testutil::random_model(spec, 3, 0.1);
  const Dataset ds = testutil::random_dataset(8, 32, 6);

  SECTION("preference training starts at ln 2 and descends") {
    DpoConfig cfg = default_dpo_config(Family::TabularBigram);
    cfg.epochs = 5;
    cfg.seed = 12;
    const TrainResult res = train_stage(init, &init, ds, Objective::Dpo, cfg);
    REQUIRE(!res.loss_trace.empty());
    CHECK(res.loss_trace.front() == Catch::Approx(kLn2).margin(1e-12));
    CHECK(res.loss_trace.back() < res.loss_trace.front());
    CHECK(res.checkpoint.iteration_index == init.iteration_index + 1);
    CHECK(res.checkpoint.label == "dpo");
    // Full-dataset loss after training beats the starting point.
    const double after =
        dpo_batch_loss_and_grad(res.checkpoint, init, ds, cfg.beta).first;
    CHECK(after < kLn2);
  }

  SECTION("supervised training descends and resets lineage") {
    PolicyCheckpoint staged = init;
    staged.iteration_index = 4;
    DpoConfig cfg = default_sft_config(Family::TabularBigram);
    cfg.epochs = 5;
    cfg.seed = 13;
    const TrainResult res = train_stage(staged, nullptr, ds, Objective::Sft, cfg);
    const double before = sft_loss_and_grad(init, ds).first;
    const double after = sft_loss_and_grad(res.checkpoint, ds).first;
    CHECK(after < before);
    CHECK(res.checkpoint.iteration_index == 0);
    CHECK(res.checkpoint.label == "sft");
  }
}

TEST_CASE("training is deterministic in its seed") {
  const ModelSpec spec = testutil::neural_spec(5, 2, 3, 4);
  const PolicyCheckpoint init = testutil::random_model(spec, 6, 0.1);
  const PolicyCheckpoint ref = testutil::random_model(spec, 7, 0.1);
  const Dataset ds = testutil::random_dataset(14, 20, 5);
  DpoConfig cfg = default_dpo_config(Family::TinyNeuralLM);
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 500;

  const TrainResult a = train_stage(init, &ref, ds, Objective::Dpo, cfg);
  const TrainResult b = train_stage(init, &ref, ds, Objective::Dpo, cfg);
  CHECK(a.checkpoint.params == b.checkpoint.params);
  CHECK(a.loss_trace == b.loss_trace);

  cfg.seed = 501;
  const TrainResult c = train_stage(init, &ref, ds, Objective::Dpo, cfg);
  CHECK(a.loss_trace != c.loss_trace);  // different shuffle, different batches
}

TEST_CASE("zero-epoch training returns the initial parameters untouched") {
  const ModelSpec spec = testutil::bigram_spec(4);
  const PolicyCheckpoint init = testutil::random_model(spec, 2);
  const Dataset ds = testutil::random_dataset(3, 6, 4);
  DpoConfig cfg = default_dpo_config(Family::TabularBigram);
  cfg.epochs = 0;
  const TrainResult res = train_stage(init, &init, ds, Objective::Dpo, cfg);
  CHECK(res.checkpoint.params == init.params);
  CHECK(res.loss_trace.empty());
}

TEST_CASE("the step observer sees step zero and then every update") {
  const ModelSpec spec = testutil::bigram_spec(4);
  const PolicyCheckpoint init = testutil::random_model(spec, 2);
  const Dataset ds = testutil::random_dataset(3, 10, 4);
  DpoConfig cfg = default_dpo_config(Family::TabularBigram);
  cfg.epochs = 2;
  cfg.batch_size = 4;  // 3 batches per epoch, 6 steps total
  std::vector<long> seen;
  std::vector<double> first_param;
  train_stage(init, &init, ds, Objective::Dpo, cfg,
              [&](long step, const PolicyCheckpoint& ckpt) {
                seen.push_back(step);
                first_param.push_back(ckpt.params[0]);
              });
  REQUIRE(seen.size() == 7);
  for (std::size_t i = 0; i < seen.size(); ++i)
    CHECK(seen[i] == static_cast<long>(i));
  CHECK(first_param.front() == init.params[0]);  // pre-update snapshot
}

TEST_CASE("training rejects invalid inputs") {
  const ModelSpec spec = testutil::bigram_spec(4);
  const PolicyCheckpoint init = testutil::random_model(spec, 2);
  const Dataset ds = testutil::random_dataset(3, 4, 4);
  const DpoConfig cfg = default_dpo_config(Family::TabularBigram);

  CHECK_THROWS_AS(train_stage(init, nullptr, ds, Objective::Dpo, cfg), ConfigError);
  CHECK_THROWS_AS(train_stage(init, &init, {}, Objective::Dpo, cfg), InputError);

  DpoConfig bad = cfg;
  bad.beta = 0.0;
  CHECK_THROWS_AS(train_stage(init, &init, ds, Objective::Dpo, bad), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(train_stage(init, &init, ds, Objective::Dpo, bad), ConfigError);
  bad = cfg;
  bad.warmup_fraction = 1.5;
  CHECK_THROWS_AS(train_stage(init, &init, ds, Objective::Dpo, bad), ConfigError);

  const PolicyCheckpoint other = testutil::random_model(testutil::bigram_spec(5), 2);
  CHECK_THROWS_AS(dpo_batch_loss_and_grad(init, other, ds, 0.1), ConfigError);
  CHECK_THROWS_AS(dpo_batch_loss_and_grad(init, init, {}, 0.1), InputError);
  CHECK_THROWS_AS(sft_loss_and_grad(init, {}), InputError);
}
