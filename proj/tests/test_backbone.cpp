#include <gtest/gtest.h>

#include <cmath>

#include "icrit/gradcheck.hpp"
#include "test_util.hpp"

using namespace icrit;
using icrit::testing::random_inputs;
using icrit::testing::random_tensor;
using icrit::testing::randomize;

TEST(ModelConfig, ToyDefaults) {
  auto c = ModelConfig::toy();
  EXPECT_EQ(c.noise_tokens(), 64);
  EXPECT_EQ(c.sequence_length(true), 69);
  EXPECT_EQ(c.sequence_length(false), 68);
  EXPECT_EQ(c.critic_index(), 4);
  EXPECT_EQ(c.deepest_probe(), 6);
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelConfig, RejectsBadProbeLayers) {
  auto c = ModelConfig::toy();
  c.probe_layers = {2, 9};
  EXPECT_THROW(c.validate(), ConfigError);
  c.probe_layers = {4, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::toy();
  c.num_heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TimeFeatures, ClosedFormAndDomain) {
  auto f = time_features<double>(0.0, 4);
  for (int k = 0; k < 4; ++k) {
    EXPECT_DOUBLE_EQ(f[k], 1.0);
    EXPECT_DOUBLE_EQ(f[4 + k], 0.0);
  }
  auto g = time_features<double>(0.25, 2);
  EXPECT_NEAR(g[0], std::cos(250.0), 1e-12);
  EXPECT_NEAR(g[1], std::cos(250.0 * std::exp(-std::log(1e4) / 2)), 1e-12);
  EXPECT_THROW(time_features<double>(1.5, 4), DomainError);
  EXPECT_THROW(time_features<double>(-0.1, 4), DomainError);
}

TEST(Backbone, FreshHeadPredictsZeroVelocity) {
  Model<float> m(ModelConfig::micro(), 1);
  Rng rng(1);
  auto in = random_inputs<float>(m.config(), rng);
  auto v = m.velocity(in.model_input(), CriticMode::kAbsent);
  for (auto x : v.data()) EXPECT_EQ(x, 0.0f);
}

TEST(Backbone, ZeroedBlocksLeaveEmbeddingsUntouched) {
  auto cfg = ModelConfig::micro();
  Backbone<double> b(cfg, 3);
  b.zero_blocks();
  Rng rng(2);
  auto in = random_inputs<double>(cfg, rng);
  Tape<double> tape;
  ForwardRequest<double> req;
  req.noise = &in.xt;
  req.source = &in.source;
  req.condition = in.condition;
  req.t = in.t;
  req.trace_layers = {1, 2};
  auto r1 = b.forward(req, tape);
  req.last_block = 1;
  auto r0 = b.forward(req, tape);
  EXPECT_EQ(r1.trace.at(2).noise.value(), r0.trace.at(1).noise.value());
  EXPECT_FALSE(r0.velocity.defined());
}

TEST(Backbone, InputValidation) {
  auto cfg = ModelConfig::micro();
  Backbone<float> b(cfg, 1);
  Rng rng(3);
  auto in = random_inputs<float>(cfg, rng);
  Tape<float> tape;
  ForwardRequest<float> req;
  req.noise = &in.xt;
  req.source = &in.source;
  req.condition = in.condition;
  req.t = 0.5f;
  Tensor<float> wrong({3, 3});
  req.source = &wrong;
  EXPECT_THROW(b.forward(req, tape), DimensionError);
  req.source = &in.source;
  req.condition.codes.pop_back();
  EXPECT_THROW(b.forward(req, tape), DimensionError);
  req.condition = in.condition;
  req.condition.codes[0] = 99;
  EXPECT_THROW(b.forward(req, tape), DomainError);
}

TEST(Backbone, TraceMissingLayerThrows) {
  BlockTrace<float> t;
  EXPECT_THROW(t.at(3), MissingTraceError);
  EXPECT_THROW(t.scores_at(3), MissingTraceError);
}

TEST(Backbone, SameSeedSameWeights) {
  Backbone<float> a(ModelConfig::micro(), 5), b(ModelConfig::micro(), 5), c(ModelConfig::micro(), 6);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value);
    any_diff = any_diff || !(pa[i]->value == pc[i]->value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Backbone, ConditionAndTimeChangeTheVelocity) {
  Model<double> m(ModelConfig::micro(), 7);
  randomize(m, 7);
  Rng rng(4);
  auto in = random_inputs<double>(m.config(), rng);
  auto base = m.velocity(in.model_input(), CriticMode::kAbsent);
  auto other = in.model_input();
  other.condition.null = true;
  EXPECT_FALSE(base == m.velocity(other, CriticMode::kAbsent));
  other = in.model_input();
  other.t = in.t * 0.5;
  EXPECT_FALSE(base == m.velocity(other, CriticMode::kAbsent));
}

TEST(Backbone, GradientMatchesFiniteDifferences) {
  Model<double> m(ModelConfig::micro(), 8);
  randomize(m, 8);
  Rng rng(5);
  auto in = random_inputs<double>(m.config(), rng);
  auto params = m.backbone.parameters();
  auto r = finite_diff_check<double>(
      [&](Tape<double>& tape) {
        auto out = m.run(in.model_input(), CriticMode::kAbsent, {}, tape);
        return gen_loss(out.velocity, in.v_star);
      },
      params);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "] " << r.worst_analytic << " vs "
                                   << r.worst_numeric;
}

TEST(Backbone, AttentionKeyMassSumsScores) {
  auto cfg = ModelConfig::micro();
  Backbone<double> b(cfg, 9);
  BlockTrace<double> trace;
  trace.text_tokens = 2;
  Tensor<double> sc({2, 6, 6});
  for (std::size_t i = 0; i < sc.size(); ++i) sc[i] = double(i % 7);
  trace.scores[1] = sc;
  auto map = attention_key_mass(trace, 1, 2, 2);
  for (std::size_t j = 0; j < 4; ++j) {
    double expect = 0;
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t q = 0; q < 6; ++q) expect += sc[(h * 6 + q) * 6 + 2 + j];
    EXPECT_DOUBLE_EQ(map.values[j], expect);
  }
}
