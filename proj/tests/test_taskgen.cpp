#include <gtest/gtest.h>

#include <algorithm>

#include "icrit/taskgen.hpp"
#include "test_util.hpp"

using namespace icrit;

namespace {

// true where any pixel of the token differs
std::vector<bool> changed_tokens(const EditTask& task, const ImageSpec& spec) {
  std::vector<bool> out(std::size_t(spec.tokens()), false);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x)
      for (int c = 0; c < spec.channels; ++c) {
        const std::size_t i = (std::size_t(y) * std::size_t(spec.width) + std::size_t(x)) * std::size_t(spec.channels) +
                              std::size_t(c);
        if (task.source[i] != task.target[i])
          out[std::size_t((y / spec.patch) * spec.grid_w() + x / spec.patch)] = true;
      }
  return out;
}

}  // namespace

TEST(Taskgen, CopyIsIdentityWithEmptyMask) {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    EditTask t = generate_task(rng, TaskKind::kCopy);
    EXPECT_EQ(t.source, t.target);
    for (auto m : t.mask) EXPECT_EQ(m, 0);
  }
}

TEST(Taskgen, EditsStayInsideMask) {
  ImageSpec spec;
  Rng rng(2);
  for (TaskKind k : {TaskKind::kRecolor, TaskKind::kErase, TaskKind::kMirror, TaskKind::kMove}) {
    for (int i = 0; i < 200; ++i) {
      EditTask t = generate_task(rng, k, spec);
      auto changed = changed_tokens(t, spec);
      for (std::size_t j = 0; j < changed.size(); ++j)
        if (changed[j]) {
          ASSERT_EQ(t.mask[j], 1) << task_kind_name(k) << " task " << i << " token " << j;
        }
    }
  }
}

TEST(Taskgen, OracleReapplicationReproducesTarget) {
  ImageSpec spec;
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    for (TaskKind k : {TaskKind::kMirror, TaskKind::kRecolor, TaskKind::kMove, TaskKind::kErase}) {
      EditTask t = generate_task(rng, k, spec);
      EXPECT_EQ(apply_instruction(t.source, t.instruction, spec), t.target);
      EXPECT_EQ(region_mask(t.instruction, spec), t.mask);
    }
  }
}

TEST(Taskgen, PixelsStayInRange) {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    EditTask t = generate_task(rng, TaskKind(i % kTaskKinds));
    for (float v : t.source.data()) EXPECT_TRUE(v >= -1.0f && v <= 1.0f);
    for (float v : t.target.data()) EXPECT_TRUE(v >= -1.0f && v <= 1.0f);
  }
}

TEST(Taskgen, MirrorTwiceIsIdentity) {
  ImageSpec spec;
  Rng rng(5);
  EditTask t = generate_task(rng, TaskKind::kMirror, spec);
  EXPECT_EQ(apply_instruction(t.target, t.instruction, spec), t.source);
}

TEST(Taskgen, KindNamesRoundTrip) {
  for (int k = 0; k < kTaskKinds; ++k) EXPECT_EQ(parse_task_kind(task_kind_name(TaskKind(k))), TaskKind(k));
  EXPECT_THROW(parse_task_kind("rotate"), ConfigError);
}

TEST(Tokenize, CountsAndRoundTrip) {
  Rng rng(6);
  for (int patch : {1, 2, 4}) {
    auto img = icrit::testing::random_tensor<float>({16, 16, 3}, rng);
    auto tok = tokenize(img, patch);
    EXPECT_EQ(tok.dim(0), std::size_t((16 / patch) * (16 / patch)));
    EXPECT_EQ(tok.dim(1), std::size_t(patch * patch * 3));
    EXPECT_EQ(detokenize(tok, 16, 16, 3, patch), img);
  }
}

TEST(Tokenize, PatchOneIsReshape) {
  Rng rng(7);
  auto img = icrit::testing::random_tensor<float>({4, 6, 3}, rng);
  auto tok = tokenize(img, 1);
  EXPECT_TRUE(std::equal(tok.data().begin(), tok.data().end(), img.data().begin(), img.data().end()));
}

TEST(Tokenize, InTokenOrder) {
  // 2x2x1 image, one token: order is (dy, dx)
  Tensor<float> img({2, 2, 1}, {1, 2, 3, 4});
  auto tok = tokenize(img, 2);
  EXPECT_EQ(std::vector<float>(tok.data().begin(), tok.data().end()), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Tokenize, IndivisibleDims) {
  Tensor<float> img({15, 16, 3});
  EXPECT_THROW(tokenize(img, 2), DimensionError);
  EXPECT_THROW(detokenize(Tensor<float>({64, 12}), 15, 16, 3, 2), DimensionError);
}

TEST(Dataset, EmptyAndDeterministic) {
  EXPECT_TRUE(make_dataset(1, 0, default_mix()).empty());
  auto a = make_dataset(9, 40, default_mix()), b = make_dataset(9, 40, default_mix());
  EXPECT_EQ(a, b);
  auto c = make_dataset(10, 40, default_mix());
  EXPECT_NE(a, c);
}

TEST(Dataset, PrefixStable) {
  auto a = make_dataset(3, 10, default_mix()), b = make_dataset(3, 25, default_mix());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Dataset, KindFrequenciesFollowMix) {
  const KindMix mix{0.2, 0.35, 0.15, 0.1, 0.2};
  auto tasks = make_dataset(11, 10000, mix);
  std::array<int, kTaskKinds> count{};
  for (const auto& t : tasks) ++count[std::size_t(t.instruction.kind)];
  for (int k = 0; k < kTaskKinds; ++k) EXPECT_NEAR(count[std::size_t(k)] / 10000.0, mix[std::size_t(k)], 0.02);
}

TEST(Dataset, BadMix) {
  EXPECT_THROW(validate_mix({0.5, 0.5, 0.5, 0, 0}), ConfigError);
  EXPECT_THROW(validate_mix({1.2, -0.2, 0, 0, 0}), ConfigError);
  EXPECT_THROW(make_dataset(1, 5, {0.1, 0.1, 0.1, 0.1, 0.1}), ConfigError);
  EXPECT_NO_THROW(validate_mix(default_mix()));
}

TEST(Dataset, ParseMix) {
  auto m = parse_mix("copy=0.2,recolor=0.2,erase=0.2,mirror-region=0.2,move-shape=0.2");
  for (double v : m) EXPECT_DOUBLE_EQ(v, 0.2);
  auto n = parse_mix("0.2,0.4,0.2,0.1,0.1");
  EXPECT_DOUBLE_EQ(n[1], 0.4);
  EXPECT_THROW(parse_mix("copy=0.5,recolor=0.6"), ConfigError);
  EXPECT_THROW(parse_mix("banana"), ConfigError);
}
