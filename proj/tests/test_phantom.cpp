#include <gtest/gtest.h>

#include <set>

#include "flowseg/phantom.hpp"
#include "flowseg/rng.hpp"

using namespace flowseg;

namespace {
PhantomConfig one_sphere(float radius) {
  PhantomConfig cfg;
  cfg.min_nodules = cfg.max_nodules = 1;
  cfg.min_radius_mm = cfg.max_radius_mm = radius;
  cfg.lobed_fraction = 0.0f;
  return cfg;
}
}  // namespace

TEST(Phantom, NoNodulesMeansEmptyMask) {
  PhantomConfig cfg;
  cfg.min_nodules = cfg.max_nodules = 0;
  auto p = generate_phantom(11, cfg);
  EXPECT_EQ(p.gt_mask.count_positive(), 0);
  EXPECT_TRUE(p.nodules.empty());
}

TEST(Phantom, SameSeedIsBitIdentical) {
  PhantomConfig cfg;
  auto a = generate_phantom(99, cfg);
  auto b = generate_phantom(99, cfg);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.gt_mask, b.gt_mask);
  auto c = generate_phantom(100, cfg);
  EXPECT_NE(a.image, c.image);
}

TEST(Phantom, SphereVoxelCountMatchesRasterizedBall) {
  // Oracle: integer lattice points within 3 voxels of a lattice center = 123.
  int lattice = 0;
  for (int i = -3; i <= 3; ++i)
    for (int j = -3; j <= 3; ++j)
      for (int k = -3; k <= 3; ++k) lattice += (i * i + j * j + k * k <= 9);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = generate_phantom(seed, one_sphere(3.0f));
    const auto n = p.gt_mask.count_positive();
    EXPECT_GE(n, 80);
    EXPECT_LE(n, 160);
    EXPECT_EQ(n, lattice);
  }
}

TEST(Phantom, NodulesSitInsideLungsAndRaiseIntensity) {
  PhantomConfig cfg;
  cfg.min_nodules = 1;
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    auto p = generate_phantom(seed, cfg);
    ASSERT_GE(p.nodules.size(), 1u);
    for (const auto& n : p.nodules) {
      const float v = p.image.at(n.center[0], n.center[1], n.center[2]);
      EXPECT_GT(v, -150.0f);  // tissue-like, far above lung
    }
    // Mask voxels are bright; background lung is dark.
    for (std::size_t i = 0; i < p.gt_mask.values.size(); ++i) {
      if (p.gt_mask.values[i] > 0.5f) EXPECT_GT(p.image.values[i], -500.0f);
    }
  }
}

TEST(Phantom, ImpossiblePlacementFails) {
  auto cfg = one_sphere(9.0f);
  EXPECT_THROW(generate_phantom(1, cfg), PlacementError);
}

TEST(Phantom, RejectsTinyVolumes) {
  PhantomConfig cfg;
  cfg.dims = {8, 32, 32};
  EXPECT_THROW(generate_phantom(1, cfg), std::invalid_argument);
}

TEST(Preprocess, AffineClipMap) {
  Volume v({1, 1, 5}, {1, 1, 1});
  v.values = {-1000.0f, 1000.0f, 0.0f, -2000.0f, 3000.0f};
  auto out = preprocess(v);
  EXPECT_FLOAT_EQ(out.values[0], 0.0f);
  EXPECT_FLOAT_EQ(out.values[1], 255.0f);
  EXPECT_FLOAT_EQ(out.values[2], 127.5f);
  EXPECT_FLOAT_EQ(out.values[3], 0.0f);
  EXPECT_FLOAT_EQ(out.values[4], 255.0f);
}

TEST(Preprocess, IsNotIdempotent) {
  Volume v({1, 1, 2}, {1, 1, 1});
  v.values = {0.0f, 255.0f};
  auto twice = preprocess(v);
  EXPECT_NEAR(twice.values[0], 127.5f, 1e-4);
  EXPECT_NEAR(twice.values[1], 160.0125f, 1e-3);
}

TEST(Preprocess, OutputInDisplayRange) {
  auto p = generate_phantom(3, PhantomConfig{});
  for (float x : preprocess(p.image).values) {
    EXPECT_GE(x, 0.0f);
    EXPECT_LE(x, 255.0f);
  }
}

TEST(SliceLabels, AllZeroMask) {
  Volume m({4, 4, 6}, {1, 1, 1});
  for (const auto& l : slice_labels(m)) EXPECT_EQ(l.label, 0);
}

TEST(SliceLabels, SpanMarksExactlyThoseSlices) {
  Volume m({4, 4, 20}, {1, 1, 1});
  for (int k = 10; k <= 14; ++k) m.at(1, 2, k) = 1.0f;
  auto labels = slice_labels(m);
  ASSERT_EQ(labels.size(), 20u);
  for (int k = 0; k < 20; ++k) EXPECT_EQ(labels[k].label, (k >= 10 && k <= 14) ? 1 : 0) << k;
}

TEST(SliceLabels, MatchBruteForceScanOnRandomMasks) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Volume m({5, 6, 7}, {1, 1, 1});
    for (auto& v : m.values) v = rng.bernoulli(0.02) ? 1.0f : 0.0f;
    auto labels = slice_labels(m);
    for (int k = 0; k < 7; ++k) {
      bool any = false;
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j) any = any || m.at(i, j, k) > 0.5f;
      EXPECT_EQ(labels[k].label, any ? 1 : 0);
      EXPECT_EQ(labels[k].slice, k);
    }
  }
}

TEST(SliceLabels, PositiveLabelsHaveMaskVoxelsOnPhantoms) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = generate_phantom(seed, PhantomConfig{});
    auto labels = slice_labels(p);
    for (const auto& l : labels) {
      std::int64_t count = 0;
      for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) count += p.gt_mask.at(i, j, l.slice) > 0.5f;
      EXPECT_EQ(l.label == 1, count > 0);
    }
  }
}

TEST(Folds, SixIntoThree) {
  auto folds = make_folds(6, 3, 1);
  std::set<std::int64_t> all;
  for (const auto& f : folds) {
    EXPECT_EQ(f.eval.size(), 2u);
    EXPECT_EQ(f.train.size(), 4u);
    for (auto id : f.eval) EXPECT_TRUE(all.insert(id).second);
  }
  EXPECT_EQ(all.size(), 6u);
}

TEST(Folds, SevenIntoThreeNearEqual) {
  auto folds = make_folds(7, 3, 2);
  std::multiset<std::size_t> sizes;
  for (const auto& f : folds) sizes.insert(f.eval.size());
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{2, 2, 3}));
}

TEST(Folds, TenFoldProtocol) {
  auto folds = make_folds(20, 10, 3);
  EXPECT_EQ(folds.size(), 10u);
  for (const auto& f : folds) EXPECT_EQ(f.eval.size(), 2u);
}

TEST(Folds, PartitionPropertyOverManyShapes) {
  for (std::int64_t n = 2; n <= 25; ++n) {
    for (int k = 2; k <= n && k <= 10; ++k) {
      auto folds = make_folds(n, k, static_cast<std::uint64_t>(n * 31 + k));
      std::vector<int> seen(static_cast<std::size_t>(n), 0);
      for (const auto& f : folds) {
        EXPECT_GE(f.eval.size(), static_cast<std::size_t>(n / k));
        EXPECT_LE(f.eval.size(), static_cast<std::size_t>(n / k + 1));
        EXPECT_EQ(f.train.size() + f.eval.size(), static_cast<std::size_t>(n));
        for (auto id : f.eval) seen[id]++;
        std::set<std::int64_t> tr(f.train.begin(), f.train.end());
        for (auto id : f.eval) EXPECT_FALSE(tr.count(id));
      }
      for (int c : seen) EXPECT_EQ(c, 1);
    }
  }
}

TEST(Folds, RejectsTooFew) {
  EXPECT_THROW(make_folds(2, 3, 0), std::invalid_argument);
  EXPECT_THROW(make_folds(5, 1, 0), std::invalid_argument);
}

TEST(Phantom, DefaultCorpusMixesNoduleCounts) {
  std::set<std::size_t> counts;
  for (std::uint64_t seed = 0; seed < 30; ++seed) counts.insert(generate_phantom(seed, PhantomConfig{}).nodules.size());
  EXPECT_EQ(counts, (std::set<std::size_t>{0, 1, 2}));
}
