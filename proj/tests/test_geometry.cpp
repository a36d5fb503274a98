#include <random>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "protodetect/geometry.hpp"

using namespace protodetect;

TEST(Iou, HalfOverlapIsOneThird) {
  EXPECT_NEAR(iou({0, 0, 10, 10}, {5, 0, 15, 10}), 1.0 / 3.0, 1e-12);
}

TEST(Iou, DisjointAndIdentical) {
  EXPECT_EQ(iou({0, 0, 10, 10}, {10, 0, 20, 10}), 0.0);
  EXPECT_EQ(iou({2, 3, 7, 9}, {2, 3, 7, 9}), 1.0);
}

TEST(Iou, SymmetricAndBounded) {
  std::mt19937_64 gen(11);
  for (int i = 0; i < 500; ++i) {
    const auto a = testing_util::random_box(gen, 100, 80, false);
    const auto b = testing_util::random_box(gen, 100, 80, false);
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(ClipBox, Idempotent) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(-50, 150);
  for (int i = 0; i < 200; ++i) {
    const PixelBox b{u(gen), u(gen), u(gen), u(gen)};
    const PixelBox once = clip_box(b, 100, 60);
    const PixelBox twice = clip_box(once, 100, 60);
    EXPECT_EQ(once.x_min, twice.x_min);
    EXPECT_EQ(once.y_max, twice.y_max);
  }
}

TEST(CellWeights, SingleCellBox) {
  const GridGeometry g{4, 4, 10, 40, 40};
  const auto w = box_to_cell_weights({10, 10, 20, 20}, g);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0].row, 1);
  EXPECT_EQ(w[0].col, 1);
  EXPECT_DOUBLE_EQ(w[0].weight, 1.0);
}

TEST(CellWeights, StraddlingBoxSplitsEvenly) {
  const GridGeometry g{4, 4, 10, 40, 40};
  const auto w = box_to_cell_weights({5, 0, 15, 10}, g);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_DOUBLE_EQ(w[0].weight, 0.5);
  EXPECT_DOUBLE_EQ(w[1].weight, 0.5);
}

TEST(CellWeights, WeightedAreaEqualsClippedArea) {
  std::mt19937_64 gen(5);
  const GridGeometry g{9, 13, 14, 120, 180};
  for (int i = 0; i < 1000; ++i) {
    PixelBox b = testing_util::random_box(gen, 220, 160, false);
    b.x_min -= 20, b.y_min -= 20;
    const PixelBox c = clip_box(b, g.image_w, g.image_h);
    if (c.degenerate()) continue;
    double area = 0;
    for (const auto& w : box_to_cell_weights(b, g)) {
      EXPECT_GT(w.weight, 0);
      area += w.weight * g.patch_size * g.patch_size;
    }
    EXPECT_NEAR(area, c.area(), 1e-6 * c.area());
  }
}

TEST(CellWeights, DegenerateBoxThrows) {
  const GridGeometry g{4, 4, 10, 40, 40};
  EXPECT_THROW(box_to_cell_weights({5, 5, 5, 9}, g), Error);
  EXPECT_THROW(box_to_cell_weights({50, 50, 60, 60}, g), Error);
}

TEST(PoolingWeights, MaskWithNoForegroundFallsBack) {
  const GridGeometry g{4, 4, 10, 40, 40};
  Mask m{10, 10, std::vector<std::uint8_t>(100, 0)};
  bool fallback = false;
  const auto w = pooling_weights({0, 0, 10, 10}, g, &m, &fallback);
  EXPECT_TRUE(fallback);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_DOUBLE_EQ(w[0].weight, 1.0);
}

TEST(Nms, SuppressesLowerScoreOverlap) {
  const std::vector<Detection> d{{{0, 0, 10, 10}, 0, 0.9}, {{1, 0, 11, 10}, 0, 0.8}};
  const auto kept = nms(d, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].score, 0.9);
}

TEST(Nms, DifferentClassesSurviveUnlessAgnostic) {
  const std::vector<Detection> d{{{0, 0, 10, 10}, 0, 0.9}, {{1, 0, 11, 10}, 1, 0.8}};
  EXPECT_EQ(nms(d, 0.5).size(), 2u);
  EXPECT_EQ(nms(d, 0.5, true).size(), 1u);
}

TEST(Nms, ScoreTieKeepsSmallerBox) {
  const std::vector<Detection> d{{{0, 0, 12, 12}, 0, 0.5}, {{0, 0, 10, 10}, 0, 0.5}};
  const auto kept = nms(d, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].box.x_max, 10);
}

TEST(Nms, IouExactlyAtThresholdSuppresses) {
  const std::vector<Detection> d{{{0, 0, 10, 10}, 0, 0.9}, {{5, 0, 15, 10}, 0, 0.8}};
  EXPECT_EQ(nms(d, 1.0 / 3.0).size(), 1u);
  EXPECT_EQ(nms(d, 0.34).size(), 2u);
}

TEST(Nms, MatchesBruteForce) {
  std::mt19937_64 gen(17);
  std::uniform_int_distribution<int> count(0, 30), cls(0, 2), coarse(0, 5);
  for (int s = 0; s < 300; ++s) {
    std::vector<Detection> d;
    const int n = count(gen);
    for (int i = 0; i < n; ++i) {
      // coarse scores force ties
      d.push_back({testing_util::random_box(gen, 60, 60, true), cls(gen), coarse(gen) / 5.0});
    }
    for (bool agnostic : {false, true}) {
      const auto a = nms(d, 0.4, agnostic);
      const auto b = oracle::nms(d, 0.4, agnostic);
      ASSERT_EQ(a.size(), b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].score, b[i].score);
        EXPECT_EQ(a[i].class_id, b[i].class_id);
        EXPECT_EQ(a[i].box.x_min, b[i].box.x_min);
        EXPECT_EQ(a[i].box.y_max, b[i].box.y_max);
      }
    }
  }
}

TEST(Nms, IdempotentAndNoKeptPairOverlaps) {
  std::mt19937_64 gen(23);
  for (int s = 0; s < 100; ++s) {
    std::vector<Detection> d;
    std::uniform_real_distribution<double> sc(0, 1);
    for (int i = 0; i < 25; ++i) d.push_back({testing_util::random_box(gen, 50, 50, false), 0, sc(gen)});
    const auto once = nms(d, 0.5);
    EXPECT_EQ(nms(once, 0.5).size(), once.size());
    for (std::size_t i = 0; i < once.size(); ++i) {
      for (std::size_t j = i + 1; j < once.size(); ++j) EXPECT_LT(iou(once[i].box, once[j].box), 0.5);
    }
  }
}
