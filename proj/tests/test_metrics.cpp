#include <gtest/gtest.h>

#include <cmath>

#include "flowseg/metrics.hpp"
#include "support/oracles.hpp"

using namespace flowseg;

namespace {
Volume mask_with(std::array<std::int64_t, 3> dims, const std::vector<std::array<std::int64_t, 3>>& on,
                 std::array<float, 3> spacing = {1, 1, 1}) {
  Volume m(dims, spacing);
  for (const auto& p : on) m.at(p[0], p[1], p[2]) = 1.0f;
  return m;
}
}  // namespace

TEST(Dice, Basics) {
  Volume a = mask_with({4, 4, 4}, {{0, 0, 0}, {0, 0, 1}});
  Volume b = mask_with({4, 4, 4}, {{0, 0, 0}, {0, 0, 1}, {1, 1, 1}, {2, 2, 2}});
  Volume c = mask_with({4, 4, 4}, {{3, 3, 3}});
  EXPECT_EQ(dice(a, a), 1.0);
  EXPECT_EQ(dice(a, c), 0.0);
  EXPECT_NEAR(dice(a, b), 2.0 * 2 / 6, 1e-15);
  EXPECT_EQ(dice(a, b), dice(b, a));
  Volume empty({4, 4, 4}, {1, 1, 1});
  EXPECT_EQ(dice(empty, empty), 1.0);
  EXPECT_THROW(dice(a, Volume({4, 4, 5}, {1, 1, 1})), ShapeError);
}

TEST(Surface, SolidCubeHasNoInteriorOnSurface) {
  Volume cube({5, 5, 5}, {1, 1, 1});
  for (std::int64_t i = 1; i < 4; ++i)
    for (std::int64_t j = 1; j < 4; ++j)
      for (std::int64_t k = 1; k < 4; ++k) cube.at(i, j, k) = 1.0f;
  EXPECT_EQ(surface_voxels(cube).size(), 26u);
}

TEST(Msd, PointsAndIdentity) {
  Volume a = mask_with({8, 8, 8}, {{1, 2, 2}});
  Volume b = mask_with({8, 8, 8}, {{4, 2, 2}});
  EXPECT_NEAR(mean_surface_distance(a, b), 3.0, 1e-12);
  EXPECT_EQ(mean_surface_distance(a, a), 0.0);
  Volume empty({8, 8, 8}, {1, 1, 1});
  EXPECT_EQ(mean_surface_distance(empty, empty), 0.0);
  EXPECT_NEAR(mean_surface_distance(a, empty), std::sqrt(3.0 * 64), 1e-12);
  EXPECT_NEAR(mean_surface_distance(empty, a), std::sqrt(3.0 * 64), 1e-12);
}

TEST(Msd, AnisotropicSpacing) {
  Volume a = mask_with({6, 6, 6}, {{1, 1, 1}}, {0.5f, 1.0f, 2.0f});
  Volume b = mask_with({6, 6, 6}, {{3, 1, 2}}, {0.5f, 1.0f, 2.0f});
  EXPECT_NEAR(mean_surface_distance(a, b), std::sqrt(1.0 + 4.0), 1e-12);
}

TEST(Msd, ParallelPlates) {
  for (std::int64_t d : {1, 3, 6}) {
    Volume a({10, 10, 10}, {1, 1, 1}), b = a;
    for (std::int64_t i = 0; i < 10; ++i)
      for (std::int64_t j = 0; j < 10; ++j) {
        a.at(i, j, 1) = 1.0f;
        b.at(i, j, 1 + d) = 1.0f;
      }
    EXPECT_NEAR(mean_surface_distance(a, b), static_cast<double>(d), 1e-12);
    EXPECT_NEAR(mean_surface_distance(a, b), oracle::msd_brute_force(a, b), 1e-9);
  }
}

TEST(Msd, TranslationInvariantAndSymmetric) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto ra = oracle::random_mask(rng, {10, 10, 10}, {1, 1, 1});
    auto rb = oracle::random_mask(rng, {10, 10, 10}, {1, 1, 1});
    // Both copies stay clear of the border, so shifting changes nothing.
    auto place = [&](const Volume& src, std::array<std::int64_t, 3> off) {
      Volume out({16, 16, 16}, {1, 1, 1});
      for (std::int64_t i = 0; i < 10; ++i)
        for (std::int64_t j = 0; j < 10; ++j)
          for (std::int64_t k = 0; k < 10; ++k) out.at(i + off[0], j + off[1], k + off[2]) = src.at(i, j, k);
      return out;
    };
    const Volume a = place(ra, {1, 1, 1}), b = place(rb, {1, 1, 1});
    const Volume a2 = place(ra, {4, 2, 5}), b2 = place(rb, {4, 2, 5});
    const double m = mean_surface_distance(a, b);
    EXPECT_NEAR(m, mean_surface_distance(b, a), 1e-12);
    EXPECT_NEAR(m, mean_surface_distance(a2, b2), 1e-12);
    EXPECT_NEAR(m, oracle::msd_brute_force(a, b), 1e-6);
  }
}

TEST(Metrics, MatchBruteForceOnRandomMasks) {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const std::array<std::int64_t, 3> dims{4 + static_cast<std::int64_t>(rng.below(13)),
                                           4 + static_cast<std::int64_t>(rng.below(13)),
                                           4 + static_cast<std::int64_t>(rng.below(13))};
    const std::array<float, 3> spacing{1.0f, 1.0f, trial % 2 ? 1.0f : 2.5f};
    auto a = oracle::random_mask(rng, dims, spacing), b = oracle::random_mask(rng, dims, spacing);
    EXPECT_EQ(dice(a, b), oracle::dice_brute_force(a, b)) << trial;
    EXPECT_NEAR(mean_surface_distance(a, b), oracle::msd_brute_force(a, b), 1e-6) << trial;
  }
}

TEST(Aggregate, SingleVolume) {
  auto rows = aggregate({{"tfg", 0, 7, 0.4, 11.0}});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].mean_dice, 0.4);
  EXPECT_EQ(rows[0].std_dice, 0.0);
  EXPECT_EQ(rows[0].median_msd, 11.0);
}

TEST(Aggregate, MatchesOnePassRecomputation) {
  Rng rng(9);
  std::vector<VolumeScore> scores;
  for (int fold = 0; fold < 3; ++fold)
    for (int v = 0; v < 7; ++v) scores.push_back({"cam", fold, fold * 10 + v, rng.uniform(), rng.uniform(0, 30)});
  auto row = aggregate(scores).front();
  // Welford over fold means; median by counting ranks.
  double fold_mean[3] = {0, 0, 0};
  for (const auto& s : scores) fold_mean[s.fold] += s.dice / 7.0;
  double mean = 0, m2 = 0;
  for (int k = 0; k < 3; ++k) {
    const double delta = fold_mean[k] - mean;
    mean += delta / (k + 1);
    m2 += delta * (fold_mean[k] - mean);
  }
  EXPECT_NEAR(row.mean_dice, mean, 1e-12);
  EXPECT_NEAR(row.std_dice, std::sqrt(m2 / 3), 1e-12);
  double med = 0;
  for (const auto& s : scores) {
    int below = 0, above = 0;
    for (const auto& o : scores) {
      below += o.msd_mm < s.msd_mm;
      above += o.msd_mm > s.msd_mm;
    }
    if (below == 10 && above == 10) med = s.msd_mm;
  }
  EXPECT_EQ(row.median_msd, med);
  EXPECT_EQ(median({1.0, 4.0, 2.0, 3.0}), 2.5);
}

TEST(Aggregate, TableFormatting) {
  std::vector<MethodSummary> rows{{"tfg", 0.4205, 0.0424, 12.5, 10}};
  EXPECT_EQ(summary_table(rows), "Ours 42.05±4.24 12.50\n");
  auto ordered = aggregate({{"cam", 0, 1, 0.2, 5.0}, {"tfg", 0, 1, 0.5, 3.0}, {"gradcam", 0, 1, 0.3, 4.0}});
  ASSERT_EQ(ordered.size(), 3u);
  EXPECT_EQ(ordered[0].method, "tfg");
  EXPECT_EQ(ordered[1].method, "gradcam");
  EXPECT_EQ(ordered[2].method, "cam");
  EXPECT_EQ(summary_csv(ordered).substr(0, 37), "method,mean_dice,std_dice,median_msd\n");
  EXPECT_EQ(results_csv({{"tfg", 1, 4, 0.5, 2.25}}), "method,fold,volume_id,dice,msd_mm\ntfg,1,4,0.500000,2.250000\n");
}
