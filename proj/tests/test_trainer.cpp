#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "icrit/trainer.hpp"
#include "test_util.hpp"

using namespace icrit;
using icrit::testing::random_tensor;

namespace {

std::vector<TokenTask<double>> micro_tasks(std::size_t n, std::uint64_t seed) {
  const ModelConfig cfg = ModelConfig::micro();
  Rng rng(seed);
  std::vector<TokenTask<double>> out(n);
  for (auto& t : out) {
    const Shape s{std::size_t(cfg.noise_tokens()), std::size_t(cfg.latent_dim)};
    t.source = random_tensor<double>(s, rng, 0.5);
    t.target = t.source;
    // target = source with one token shifted, so the edit is learnable
    const std::size_t tok = rng.below(s[0]);
    for (std::size_t c = 0; c < s[1]; ++c) t.target[tok * s[1] + c] += 1.0;
    t.condition.codes = {int(tok), int(rng.below(4))};
  }
  return out;
}

StageConfig micro_stage(int stage, int epochs = 2) {
  StageConfig c = StageConfig::toy(stage);
  c.epochs = epochs;
  c.batch_size = 4;
  c.warmup_steps = 2;
  c.peak_lr = 1e-2;
  c.isolation_tolerance = 1e-12;
  c.isolation_every = 3;
  return c;
}

std::vector<double> flat_params(Model<double>& m) {
  std::vector<double> out;
  for (auto* p : m.parameters()) out.insert(out.end(), p->value.data().begin(), p->value.data().end());
  return out;
}

}  // namespace

TEST(AdamW, ScalarOracle) {
  Parameter<double> p{"w", Group::kPhi, Tensor<double>({1}, {0.5})};
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.01});
  const double grads[] = {0.3, -1.2, 0.05, 2.0, -0.7};
  const double lr = 0.01;
  double w = 0.5, m = 0, v = 0;
  for (int k = 1; k <= 5; ++k) {
    const double g = grads[k - 1];
    opt.step({&p}, {{g}}, lr);
    w *= 1 - lr * 0.01;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1 - std::pow(0.9, k)), vhat = v / (1 - std::pow(0.999, k));
    w -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    EXPECT_NEAR(p.value[0], w, 1e-10) << "step " << k;
  }
  EXPECT_EQ(opt.steps(), 5);
}

TEST(AdamW, FirstStepMovesByLr) {
  // bias-corrected first step is lr * sign(g) when wd = 0
  Parameter<double> p{"w", Group::kPhi, Tensor<double>({2}, {1.0, -1.0})};
  AdamW<double> opt({0.9, 0.999, 0.0, 0.0});
  opt.step({&p}, {{4.0, -0.25}}, 0.1);
  EXPECT_NEAR(p.value[0], 0.9, 1e-12);
  EXPECT_NEAR(p.value[1], -0.9, 1e-12);
}

TEST(AdamW, NonFiniteGradientNamesGroup) {
  Parameter<double> p{"critic.token", Group::kCritic, Tensor<double>({1}, {1.0})};
  AdamW<double> opt({});
  try {
    opt.step({&p}, {{std::nan("")}}, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find(group_name(Group::kCritic)), std::string::npos);
  }
  EXPECT_EQ(p.value[0], 1.0);
  EXPECT_EQ(opt.steps(), 0);
}

TEST(LrSchedule, WarmupThenCosineWithRestarts) {
  StageConfig c;
  c.peak_lr = 1.0;
  c.warmup_steps = 10;
  c.min_lr_ratio = 0.1;
  const long period = 20;
  EXPECT_DOUBLE_EQ(lr_schedule(0, c, period), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(5, c, period), 0.5);
  EXPECT_DOUBLE_EQ(lr_schedule(10, c, period), 1.0);
  EXPECT_NEAR(lr_schedule(20, c, period), 0.55, 1e-15);
  EXPECT_NEAR(lr_schedule(30, c, period), 0.1, 1e-15);
  EXPECT_NEAR(lr_schedule(31, c, period), 0.1 + 0.9 * 0.5 * (1 + std::cos(std::numbers::pi / 20)), 1e-15);
  EXPECT_NEAR(lr_schedule(50, c, period), 0.1, 1e-15);
  for (long s = 11; s < 30; ++s) EXPECT_LT(lr_schedule(s + 1, c, period), lr_schedule(s, c, period));
  EXPECT_THROW(lr_schedule(-1, c, period), DomainError);
}

TEST(LrSchedule, DefaultPeriodIsOneCycle) {
  StageConfig c;
  c.warmup_steps = 50;
  EXPECT_EQ(restart_period(c, 300), 250);
  EXPECT_EQ(restart_period(c, 10), 1);
  c.restart_period = 40;
  EXPECT_EQ(restart_period(c, 300), 40);
}

TEST(CfgDropout, RateAndNullFlag) {
  Rng rng(3);
  Condition c{{1, 2, 3, 4}, false};
  int dropped = 0;
  for (int i = 0; i < 20000; ++i) {
    Condition d = cfg_dropout(c, 0.1, rng);
    if (d.null) ++dropped;
    EXPECT_EQ(d.codes, c.codes);
  }
  EXPECT_NEAR(dropped / 20000.0, 0.1, 0.01);
  EXPECT_TRUE(cfg_dropout(c, 1.0, rng).null);
  EXPECT_FALSE(cfg_dropout(c, 0.0, rng).null);
  EXPECT_THROW(cfg_dropout(c, 1.5, rng), DomainError);
}

TEST(Metrics, CsvRows) {
  MetricsRecord r{3, 1, 0.5, std::nan(""), 0.25, std::nan(""), std::nan("")};
  EXPECT_EQ(metrics_csv_header(), "step,stage,lr,gen_loss,probe_loss,critic_loss,isolation_diff");
  EXPECT_EQ(metrics_csv_row(r), "3,1,0.5,,0.25,,");
}

TEST(StageConfig, Validation) {
  StageConfig c = StageConfig::toy(1);
  EXPECT_NO_THROW(c.validate());
  c.stage = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = StageConfig::toy(1);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunStage, OrderIsEnforced) {
  auto tasks = micro_tasks(8, 1);
  Model<double> m(ModelConfig::micro(), 1);
  EXPECT_THROW(run_stage(m, tasks, tasks, micro_stage(2)), StagingError);
  EXPECT_THROW(run_stage(m, tasks, tasks, micro_stage(3)), StagingError);
  run_stage(m, tasks, tasks, micro_stage(1, 1));
  EXPECT_EQ(m.stage, 1);
  EXPECT_THROW(run_stage(m, tasks, tasks, micro_stage(0)), StagingError);
  EXPECT_THROW(run_stage(m, tasks, tasks, micro_stage(3)), StagingError);
}

TEST(RunStage, CurriculumKeepsFrozenGroupsAndLogsEveryStep) {
  auto train = micro_tasks(12, 2), held = micro_tasks(6, 3);
  Model<double> m(ModelConfig::micro(), 2);
  for (int stage = 0; stage <= 3; ++stage) {
    auto cfg = micro_stage(stage);
    auto r = run_stage(m, train, held, cfg);
    EXPECT_EQ(r.log.size(), 6u) << "stage " << stage;
    EXPECT_EQ(r.frozen_checksum_before, r.frozen_checksum_after);
    for (std::size_t i = 0; i < r.log.size(); ++i) EXPECT_EQ(r.log[i].step, long(i + 1));
    EXPECT_EQ(m.stage, stage);
    if (stage == 2) {
      EXPECT_LE(r.max_isolation_diff, 1e-12);
    }
  }
}

TEST(RunStage, MaxStepsCapsTheRun) {
  auto tasks = micro_tasks(20, 4);
  Model<double> m(ModelConfig::micro(), 3);
  auto cfg = micro_stage(1, 5);
  cfg.max_steps = 7;
  EXPECT_EQ(run_stage(m, tasks, tasks, cfg).log.size(), 7u);
}

TEST(RunStage, Deterministic) {
  auto tasks = micro_tasks(16, 5);
  Model<double> a(ModelConfig::micro(), 4), b(ModelConfig::micro(), 4);
  auto ra = run_stage(a, tasks, tasks, micro_stage(0));
  auto rb = run_stage(b, tasks, tasks, micro_stage(0));
  EXPECT_EQ(flat_params(a), flat_params(b));
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].gen_loss, rb.log[i].gen_loss);
}

TEST(RunStage, StageOneLowersProbeLoss) {
  auto train = micro_tasks(64, 6), held = micro_tasks(16, 7);
  Model<double> m(ModelConfig::micro(), 5);
  auto cfg = micro_stage(1, 20);
  cfg.peak_lr = 3e-2;
  auto r = run_stage(m, train, held, cfg);
  ASSERT_TRUE(r.initial.has_probe && r.final.has_probe);
  EXPECT_LT(r.final.probe, 0.8 * r.initial.probe);
  EXPECT_EQ(r.epochs.size(), 20u);
}

TEST(Evaluate, TermsFollowStage) {
  auto tasks = micro_tasks(4, 8);
  Model<double> m(ModelConfig::micro(), 6);
  auto e0 = evaluate(m, 0, tasks, 1);
  EXPECT_TRUE(e0.has_gen);
  EXPECT_FALSE(e0.has_probe);
  auto e2 = evaluate(m, 2, tasks, 1);
  EXPECT_TRUE(e2.has_gen && e2.has_probe && e2.has_critic);
  EXPECT_EQ(e2.samples, 4u);
  auto again = evaluate(m, 2, tasks, 1);
  EXPECT_EQ(again.critic, e2.critic);
}
