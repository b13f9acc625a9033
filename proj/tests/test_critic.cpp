#include <gtest/gtest.h>

#include <cmath>

#include "icrit/gradcheck.hpp"
#include "test_util.hpp"

using namespace icrit;
using icrit::testing::random_inputs;
using icrit::testing::random_tensor;
using icrit::testing::randomize;

TEST(IsolationMask, SmallCase) {
  auto m = build_isolation_mask<float>(4, 3);
  int masked = 0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const bool expect = i != 3 && j == 3;
      EXPECT_EQ(m.at(i, j) == mask_neg_inf<float>(), expect);
      if (!expect) EXPECT_EQ(m.at(i, j), 0.0f);
      masked += expect;
    }
  EXPECT_EQ(masked, 3);
  EXPECT_EQ(m.at(3, 3), 0.0f);
  EXPECT_THROW(build_isolation_mask<float>(4, 4), DomainError);
}

TEST(IsolationMask, CountsMatchSequence) {
  for (std::size_t n : {2u, 9u, 69u}) {
    auto m = build_isolation_mask<double>(n, n / 2);
    std::size_t c = 0;
    for (auto v : m.data()) c += v == mask_neg_inf<double>();
    EXPECT_EQ(c, n - 1);
  }
}

TEST(Probe, ZeroInitOutputsZero) {
  Model<float> m(ModelConfig::micro(), 1);
  Rng rng(1);
  auto in = random_inputs<float>(m.config(), rng);
  Tape<float> tape;
  OutputRequest req;
  req.probes = true;
  auto out = m.run(in.model_input(), CriticMode::kAbsent, req, tape);
  for (auto v : out.probes.at(1).data()) EXPECT_EQ(v, 0.0f);
}

TEST(Probe, TimeConditioningIsLive) {
  auto cfg = ModelConfig::micro();
  Model<double> m(cfg, 2);
  randomize(m, 2);
  Rng rng(2);
  Var<double> hidden(random_tensor<double>({4, 8}, rng));
  Tape<double> tape;
  auto a = m.probes.forward(1, hidden, m.backbone.time_embedding(0.1, tape), tape).value();
  auto b = m.probes.forward(1, hidden, m.backbone.time_embedding(0.9, tape), tape).value();
  EXPECT_FALSE(a == b);
  EXPECT_THROW(m.probes.forward(2, hidden, m.backbone.time_embedding(0.1, tape), tape), ConfigError);
}

TEST(ProbeLoss, MeanOverLayers) {
  auto cfg = ModelConfig::toy();
  Tensor<double> v({1, 1}, {0.0});
  std::map<int, Var<double>> outs{{2, constant(Tensor<double>({1, 1}, {1.0}))},
                                  {4, constant(Tensor<double>({1, 1}, {2.0}))},
                                  {6, constant(Tensor<double>({1, 1}, {3.0}))}};
  EXPECT_DOUBLE_EQ(probe_loss(outs, v, cfg).item(), (1.0 + 4.0 + 9.0) / 3.0);
  auto single = cfg;
  single.probe_layers = {4};
  std::map<int, Var<double>> one{{4, outs[4]}};
  EXPECT_DOUBLE_EQ(probe_loss(one, v, single).item(), gen_loss(outs[4], v).item());
  outs.erase(4);
  EXPECT_THROW(probe_loss(outs, v, cfg), ConfigError);
}

TEST(CriticTarget, ClosedForms) {
  Tensor<double> v({3, 1}, {0.0, 0.0, 0.0});
  Tensor<double> p({3, 1}, {0.0, std::sqrt(std::exp(1.0) - 1.0), 2.0});
  auto e = critic_target(p, v);
  EXPECT_EQ(e[0], 0.0);
  EXPECT_NEAR(e[1], 1.0, 1e-15);
  EXPECT_NEAR(e[2], std::log(5.0), 1e-15);
}

TEST(CriticTarget, StrictlyMonotone) {
  Tensor<double> v({50, 1});
  Tensor<double> p({50, 1});
  for (std::size_t i = 0; i < 50; ++i) p[i] = 0.1 * double(i);
  auto e = critic_target(p, v);
  for (std::size_t i = 1; i < 50; ++i) EXPECT_GT(e[i], e[i - 1]);
}

TEST(CriticInner, DotProductExample) {
  Var<double> psi(Tensor<double>({1, 2}, {1, 2}));
  Var<double> chi(Tensor<double>({1, 2}, {3, 4}));
  EXPECT_DOUBLE_EQ(critic_inner(psi, chi).item(), 11.0);
  Var<double> zero(Tensor<double>({1, 2}));
  EXPECT_EQ(critic_inner(zero, chi).item(), 0.0);
}

TEST(CriticInner, MatchesLoopAndIsBilinear) {
  Rng rng(3);
  auto psi = random_tensor<double>({1, 5}, rng), chi = random_tensor<double>({7, 5}, rng);
  auto e = critic_inner(constant(psi), constant(chi)).value();
  for (std::size_t i = 0; i < 7; ++i) {
    double acc = 0;
    for (std::size_t c = 0; c < 5; ++c) acc += psi[c] * chi.at(i, c);
    EXPECT_NEAR(e[i], acc, 1e-12);
  }
  for (double c : {2.0, -0.5, 8.0}) {
    Tensor<double> scaled = psi;
    for (auto& x : scaled.data()) x *= c;
    auto es = critic_inner(constant(scaled), constant(chi)).value();
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(es[i], c * e[i]);
  }
}

TEST(CriticLoss, Examples) {
  Rng rng(4);
  auto e4 = random_tensor<double>({6}, rng), e6 = random_tensor<double>({6}, rng);
  std::map<int, Tensor<double>> targets{{4, e4}, {6, e6}};
  std::map<int, Var<double>> exact{{4, constant(e4)}, {6, constant(e6)}};
  EXPECT_EQ(critic_loss(exact, targets).item(), 0.0);
  auto shift = [](Tensor<double> t, double d) {
    for (auto& x : t.data()) x += d;
    return t;
  };
  std::map<int, Var<double>> off{{4, constant(shift(e4, 0.25))}, {6, constant(shift(e6, 0.25))}};
  EXPECT_NEAR(critic_loss(off, targets).item(), 0.0625, 1e-15);

  auto p4 = random_tensor<double>({6}, rng), p6 = random_tensor<double>({6}, rng);
  std::map<int, Var<double>> pred{{4, constant(p4)}, {6, constant(p6)}};
  double acc = 0;
  for (std::size_t i = 0; i < 6; ++i) acc += (p4[i] - e4[i]) * (p4[i] - e4[i]) + (p6[i] - e6[i]) * (p6[i] - e6[i]);
  EXPECT_NEAR(critic_loss(pred, targets).item(), acc / 12.0, 1e-12);

  std::map<int, Tensor<double>> wrong{{4, e4}, {5, e6}};
  EXPECT_THROW(critic_loss(pred, wrong), ConfigError);
}

TEST(CriticPredict, FreshCriticPredictsZeroAndDisabledThrows) {
  Model<float> m(ModelConfig::micro(), 5);
  Rng rng(5);
  auto in = random_inputs<float>(m.config(), rng);
  Tape<float> tape;
  OutputRequest req;
  req.predictions = true;
  auto out = m.run(in.model_input(), CriticMode::kMasked, req, tape);
  for (auto v : out.predictions.at(1).data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(m.run(in.model_input(), CriticMode::kAbsent, req, tape), ConfigError);

  auto cfg = ModelConfig::micro();
  cfg.critic_enabled = false;
  Model<float> off(cfg, 5);
  EXPECT_THROW(off.run(in.model_input(), CriticMode::kMasked, OutputRequest{}, tape), ConfigError);
}

TEST(Isolation, MaskedRunEqualsAbsentRun) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model<float> mf(ModelConfig::micro(), seed);
    randomize(mf, seed, 0.5);
    Rng rng(seed);
    auto in = random_inputs<float>(mf.config(), rng);
    EXPECT_LE(isolation_check(mf, in.model_input()), 1e-6);
    EXPECT_GT(unmasked_difference(mf, in.model_input()), 0.0);
  }
}

TEST(Isolation, TargetsDoNotMoveUnderMask) {
  Model<double> m(ModelConfig::micro(), 6);
  randomize(m, 6);
  Rng rng(6);
  auto in = random_inputs<double>(m.config(), rng);
  OutputRequest req;
  req.probes = true;
  Tape<double> t1, t2;
  auto masked = m.run(in.model_input(), CriticMode::kMasked, req, t1);
  auto absent = m.run(in.model_input(), CriticMode::kAbsent, req, t2);
  auto a = critic_target(masked.probes.at(1).value(), in.v_star);
  auto b = critic_target(absent.probes.at(1).value(), in.v_star);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE(std::abs(a[i] - b[i]), 1e-12);
}

TEST(StageLoss, StructuralFreezing) {
  Model<double> m(ModelConfig::micro(), 7);
  randomize(m, 7);
  Rng rng(7);
  auto in = random_inputs<double>(m.config(), rng);
  for (int stage : {1, 2, 3}) {
    Tape<double> tape(stage_groups(stage));
    auto loss = stage_loss(m, stage, in.example(), tape);
    backward(loss.total);
    for (auto* p : m.parameters()) {
      const bool trainable = stage_groups(stage).contains(p->group);
      EXPECT_EQ(tape.has_grad_buffer(*p), trainable && !tape.grad(*p).empty()) << p->name;
      if (!trainable) EXPECT_FALSE(tape.has_grad_buffer(*p)) << "stage " << stage << " " << p->name;
    }
  }
}

TEST(StageLoss, ZeroWeightsReduceToGenLoss) {
  Model<double> m(ModelConfig::micro(), 8);
  randomize(m, 8);
  Rng rng(8);
  auto in = random_inputs<double>(m.config(), rng);
  Tape<double> tape(stage_groups(3));
  auto loss = stage_loss(m, 3, in.example(), tape, LossWeights{0.0, 0.0});
  EXPECT_DOUBLE_EQ(loss.total.item(), loss.gen);
  Tape<double> tape2(stage_groups(3));
  auto full = stage_loss(m, 3, in.example(), tape2);
  EXPECT_NEAR(full.total.item(), full.gen + full.critic + full.probe, 1e-12);
}

TEST(StageLoss, Stage3GradientMatchesFiniteDifferences) {
  Model<double> m(ModelConfig::micro(), 9);
  randomize(m, 9);
  Rng rng(9);
  auto in = random_inputs<double>(m.config(), rng);
  std::vector<Parameter<double>*> params;
  for (auto* p : m.parameters())
    if (stage_groups(3).contains(p->group)) params.push_back(p);
  auto r = finite_diff_check<double>(
      [&](Tape<double>& tape) { return stage_loss(m, 3, in.example(), tape).total; }, params);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst_parameter << "[" << r.worst_index << "] " << r.worst_analytic
                                   << " vs " << r.worst_numeric;
}

TEST(Model, NativeMode) {
  Model<float> m(ModelConfig::micro(), 1);
  EXPECT_EQ(m.native_mode(), CriticMode::kAbsent);
  m.stage = 2;
  EXPECT_EQ(m.native_mode(), CriticMode::kMasked);
  m.stage = 3;
  EXPECT_EQ(m.native_mode(), CriticMode::kUnmasked);
}
