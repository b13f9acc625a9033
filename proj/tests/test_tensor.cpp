#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "icrit/tensor.hpp"

using namespace icrit;

TEST(Tensor, ShapeAndAccess) {
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_THROW(t.dim(2), DimensionError);
  t.at(1, 2) = 5.0f;
  EXPECT_EQ(t[5], 5.0f);
  EXPECT_THROW(Tensor<float>({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount) {
  Tensor<int> t({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.storage(), t.storage());
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, CastRoundTrip) {
  Tensor<float> f({3}, {0.5f, -1.25f, 3.0f});
  EXPECT_EQ(f.cast<double>().cast<float>(), f);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, ForksAreIndependentAndStable) {
  Rng base(11);
  Rng f1 = base.fork(1), f2 = base.fork(2), f1b = base.fork(1);
  EXPECT_NE(f1.next_u64(), f2.next_u64());
  Rng f1c = base.fork(1);
  EXPECT_EQ(f1b.next_u64(), f1c.next_u64());
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(3);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, BelowCoversRange) {
  Rng rng(5);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Checksum, DetectsSingleBitFlip) {
  std::vector<float> v{1.0f, 2.0f, 3.0f};
  const auto before = checksum<float>(v);
  v[1] = std::nextafter(v[1], 10.0f);
  EXPECT_NE(before, checksum<float>(v));
}

TEST(Checksum, Fnv1aKnownVector) {
  // FNV-1a 64 of "a".
  const std::byte a{0x61};
  EXPECT_EQ(fnv1a(std::span<const std::byte>(&a, 1)), 0xaf63dc4c8601ec8cULL);
}

TEST(Mask, ThresholdSeparatesSentinel) {
  EXPECT_LE(mask_neg_inf<float>(), mask_threshold<float>());
  EXPECT_LE(mask_neg_inf<double>(), mask_threshold<double>());
  EXPECT_GT(-1e30f, mask_threshold<float>());
}
