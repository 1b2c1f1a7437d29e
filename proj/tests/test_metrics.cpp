#include <cmath>

#include <gtest/gtest.h>

#include "mvtt/metrics.hpp"
#include "mvtt/random.hpp"
#include "oracles.hpp"

using namespace mvtt;

namespace {

Volume mask_from(std::array<std::size_t, 3> dims, const std::vector<int>& bits, std::array<double, 3> spacing = {1, 1, 1}) {
  Volume v(dims, spacing, VolumeKind::label);
  for (std::size_t i = 0; i < bits.size(); ++i) v.values[i] = bits[i];
  return v;
}

std::vector<int> random_bits(std::size_t n, Rng& rng, double p) {
  std::vector<int> b(n);
  for (auto& x : b) x = rng.uniform() < p;
  return b;
}

}  // namespace

TEST(Confusion, HandExample) {
  auto c = confusion(mask_from({1, 1, 4}, {1, 1, 0, 0}), mask_from({1, 1, 4}, {1, 0, 1, 0}));
  EXPECT_EQ(c, (ConfusionCounts{1, 1, 1, 1}));
}

TEST(Confusion, IdentityAndComplement) {
  Rng rng(1);
  auto bits = random_bits(60, rng, 0.5);
  std::vector<int> comp(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) comp[i] = 1 - bits[i];
  auto same = confusion(mask_from({3, 4, 5}, bits), mask_from({3, 4, 5}, bits));
  EXPECT_EQ(same.fp, 0u);
  EXPECT_EQ(same.fn, 0u);
  auto opposite = confusion(mask_from({3, 4, 5}, comp), mask_from({3, 4, 5}, bits));
  EXPECT_EQ(opposite.tp, 0u);
  EXPECT_EQ(opposite.tn, 0u);
}

TEST(Confusion, MatchesVoxelLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::array<std::size_t, 3> dims{1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(16)};
    const std::size_t n = dims[0] * dims[1] * dims[2];
    auto a = random_bits(n, rng, rng.uniform()), b = random_bits(n, rng, rng.uniform());
    auto c = confusion(mask_from(dims, a), mask_from(dims, b));
    ASSERT_EQ(c, oracle::confusion(a, b));
    ASSERT_EQ(c.total(), n);
  }
}

TEST(Confusion, ShapeMismatchRejected) {
  EXPECT_THROW(confusion(Volume({1, 2, 2}, {1, 1, 1}, VolumeKind::label), Volume({1, 4, 1}, {1, 1, 1}, VolumeKind::label)),
               Error);
}

TEST(Metrics, Perfect) {
  auto m = metrics({5, 0, 0, 7});
  EXPECT_EQ(*m.accuracy, 1.0);
  EXPECT_EQ(*m.sensitivity, 1.0);
  EXPECT_EQ(*m.specificity, 1.0);
  EXPECT_EQ(*m.dice, 1.0);
}

TEST(Metrics, AllOnes) {
  auto m = metrics({1, 1, 1, 1});
  EXPECT_EQ(*m.accuracy, 0.5);
  EXPECT_EQ(*m.sensitivity, 0.5);
  EXPECT_EQ(*m.specificity, 0.5);
  EXPECT_EQ(*m.dice, 0.5);
}

TEST(Metrics, EmptyTruthLeavesRatiosUndefined) {
  auto m = metrics({0, 0, 0, 9});
  EXPECT_FALSE(m.sensitivity.has_value());
  EXPECT_FALSE(m.dice.has_value());
  EXPECT_EQ(*m.specificity, 1.0);
  EXPECT_EQ(*m.accuracy, 1.0);
}

TEST(Metrics, DiceSymmetricAndBounded) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = mask_from({2, 5, 5}, random_bits(50, rng, 0.3));
    auto b = mask_from({2, 5, 5}, random_bits(50, rng, 0.3));
    auto ab = metrics(confusion(a, b)), ba = metrics(confusion(b, a));
    ASSERT_EQ(ab.dice, ba.dice);
    for (const auto& v : {ab.accuracy, ab.sensitivity, ab.specificity, ab.dice})
      if (v) {
        ASSERT_GE(*v, 0.0);
        ASSERT_LE(*v, 1.0);
      }
  }
}

TEST(ScarBurden, EmptyScarIsZero) {
  auto anatomy = mask_from({2, 2, 2}, {1, 1, 1, 1, 1, 1, 1, 1});
  EXPECT_EQ(scar_burden(Volume({2, 2, 2}, {1, 1, 1}, VolumeKind::label), anatomy).percentage, 0.0);
}

TEST(ScarBurden, SingleVoxelWall) {
  Volume anatomy({1, 1, 1}, {2, 1, 1}, VolumeKind::label, 1.0);
  EXPECT_DOUBLE_EQ(surface_area_mm2(anatomy), 10.0);
  auto b = scar_burden(anatomy, anatomy);
  EXPECT_DOUBLE_EQ(b.wall_volume_mm3, 22.5);
  EXPECT_DOUBLE_EQ(b.scar_volume_mm3, 2.0);
  EXPECT_DOUBLE_EQ(b.percentage, 100.0 * 2.0 / 22.5);
}

TEST(ScarBurden, EmptyAnatomyRejected) {
  Volume empty({2, 2, 2}, {1, 1, 1}, VolumeKind::label);
  EXPECT_THROW(scar_burden(empty, empty), Error);
}

TEST(ScarBurden, GridMismatchRejected) {
  Volume a({2, 2, 2}, {1, 1, 1}, VolumeKind::label, 1.0);
  Volume b({2, 2, 2}, {2, 1, 1}, VolumeKind::label, 1.0);
  EXPECT_THROW(scar_burden(a, b), Error);
}

TEST(ScarBurden, InvariantUnderAxisPermutation) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::array<std::size_t, 3> d{2 + rng.below(5), 2 + rng.below(5), 2 + rng.below(5)};
    const std::array<double, 3> s{rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2)};
    const std::size_t n = d[0] * d[1] * d[2];
    auto anat = mask_from(d, random_bits(n, rng, 0.7), s);
    anat.values[0] = 1.0;
    auto scar = anat;
    for (double& v : scar.values) v = v * (rng.uniform() < 0.3);
    // (z,y,x) -> (x,z,y)
    auto permute = [&](const Volume& v) {
      Volume out({d[2], d[0], d[1]}, {s[2], s[0], s[1]}, VolumeKind::label);
      for (std::size_t z = 0; z < d[0]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
          for (std::size_t x = 0; x < d[2]; ++x) out.at(x, z, y) = v.at(z, y, x);
      return out;
    };
    const double before = scar_burden(scar, anat).percentage;
    const double after = scar_burden(permute(scar), permute(anat)).percentage;
    EXPECT_NEAR(before, after, 1e-12 * std::max(1.0, before));
  }
}

TEST(Pearson, Extremes) {
  const std::vector<double> x{1, 2, 3, 7};
  std::vector<double> neg;
  for (double v : x) neg.push_back(-v);
  EXPECT_DOUBLE_EQ(pearson(x, x), 1.0);
  EXPECT_DOUBLE_EQ(pearson(x, neg), -1.0);
}

TEST(Pearson, MatchesDirectFormula) {
  const std::vector<double> x{1, 2, 3}, y{1, 2, 4};
  EXPECT_NEAR(pearson(x, y), oracle::pearson(x, y), 1e-12);
  EXPECT_NEAR(pearson(x, y), 3.0 / std::sqrt(2.0 * 42.0 / 9.0), 1e-12);
}

TEST(Pearson, AffineInvariant) {
  Rng rng(5);
  std::vector<double> x(30), y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    x[i] = rng.normal();
    y[i] = 0.5 * x[i] + rng.normal();
  }
  const double r = pearson(x, y);
  std::vector<double> ys(30);
  for (std::size_t i = 0; i < 30; ++i) ys[i] = 3.7 * y[i] + 11.0;
  EXPECT_NEAR(pearson(x, ys), r, 1e-12);
}

TEST(Pearson, Rejections) {
  EXPECT_THROW(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), Error);
  EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), Error);
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), Error);
}

TEST(BlandAltman, Examples) {
  const std::vector<double> x{1.0, 4.0, 2.5};
  auto same = bland_altman(x, x);
  EXPECT_EQ(same.bias, 0.0);
  EXPECT_EQ(same.loa_low, 0.0);
  EXPECT_EQ(same.loa_high, 0.0);

  const std::vector<double> shifted{1.5, 4.5, 3.0};
  auto s = bland_altman(x, shifted);
  EXPECT_DOUBLE_EQ(s.bias, 0.5);
  EXPECT_NEAR(s.loa_high - s.loa_low, 0.0, 1e-15);

  auto d = bland_altman(std::vector<double>{0, 0}, std::vector<double>{1, 3});
  EXPECT_DOUBLE_EQ(d.bias, 2.0);
  EXPECT_DOUBLE_EQ(d.sd, std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(d.loa_low, 2.0 - 1.96 * std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(d.loa_high, 2.0 + 1.96 * std::sqrt(2.0));
  EXPECT_LE(d.loa_low, d.bias);
  EXPECT_LE(d.bias, d.loa_high);
}

TEST(BlandAltman, TooShortRejected) {
  EXPECT_THROW(bland_altman(std::vector<double>{1}, std::vector<double>{1}), Error);
}

TEST(Summary, SkipsUndefined) {
  auto s = summarize({1.0, std::nullopt, 3.0});
  EXPECT_EQ(s.count, 2u);
  EXPECT_DOUBLE_EQ(*s.mean, 2.0);
  EXPECT_DOUBLE_EQ(*s.sd, std::sqrt(2.0));
  EXPECT_FALSE(summarize({std::nullopt}).mean.has_value());
}
