#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "protodetect/classifier.hpp"

using namespace protodetect;

namespace {

PrototypeSet make_protos(int objects, int background, const std::vector<double>& rows, int dim) {
  std::vector<ObjectClass> cls;
  for (int i = 0; i < objects; ++i) cls.push_back({"c" + std::to_string(i), ClassRole::kNovel});
  return PrototypeSet(ClassTable(cls, background), dim, rows, 0.1, Provenance::kAveraged);
}

PrototypeSet random_protos(std::mt19937_64& gen, int objects, int background, int dim) {
  std::normal_distribution<double> n;
  std::vector<double> rows(static_cast<std::size_t>(objects + background) * dim);
  for (double& v : rows) v = n(gen);
  return make_protos(objects, background, rows, dim);
}

std::vector<std::vector<double>> rows_of(const PrototypeSet& p) {
  std::vector<std::vector<double>> out;
  for (int r = 0; r < p.rows(); ++r) out.emplace_back(p.row(r).begin(), p.row(r).end());
  return out;
}

}  // namespace

TEST(Similarity, IdenticalAndOrthogonal) {
  FeatureMap fm({1, 2, 4, 4, 8}, 2, {2, 0, 0, 5});
  const auto p = make_protos(2, 0, {1, 0, 0, 1}, 2);
  const auto s = similarity_map(fm, p);
  EXPECT_DOUBLE_EQ(s.cell(0, 0)[0], 1.0);
  EXPECT_DOUBLE_EQ(s.cell(0, 0)[1], 0.0);
  EXPECT_DOUBLE_EQ(s.cell(0, 1)[1], 1.0);
}

TEST(Similarity, ZeroFeatureScoresZero) {
  FeatureMap fm({1, 1, 4, 4, 4}, 2, {0, 0});
  const auto s = similarity_map(fm, make_protos(1, 0, {1, 1}, 2));
  EXPECT_EQ(s.cell(0, 0)[0], 0.0);
}

TEST(Similarity, DimensionMismatchThrows) {
  FeatureMap fm({1, 1, 4, 4, 4}, 3, {1, 0, 0});
  EXPECT_THROW(similarity_map(fm, make_protos(1, 0, {1, 1}, 2)), Error);
}

TEST(Similarity, MatchesNaiveLoopAndIsBounded) {
  std::mt19937_64 gen(5);
  const auto fm = testing_util::random_map(gen, 6, 6, 4, 24, 24, 8);
  const auto p = random_protos(gen, 3, 2, 8);
  const auto s = similarity_map(fm, p);
  for (int r = 0; r < 6; ++r) {
    for (int c = 0; c < 6; ++c) {
      const auto f = fm.cell(r, c);
      double fn = 0;
      for (float v : f) fn += double(v) * v;
      for (int k = 0; k < 5; ++k) {
        double dot = 0;
        for (int d = 0; d < 8; ++d) dot += f[d] * double(p.row(k)[d]);
        EXPECT_NEAR(s.cell(r, c)[k], dot / std::sqrt(fn), 1e-9);
        EXPECT_LE(std::abs(s.cell(r, c)[k]), 1.0 + 1e-6);
      }
    }
  }
}

TEST(ScoreBox, SingleCellAndUniformMap) {
  std::mt19937_64 gen(2);
  const auto fm = testing_util::random_map(gen, 4, 4, 10, 40, 40, 3);
  const auto p = random_protos(gen, 2, 1, 3);
  const auto s = similarity_map(fm, p);
  const auto one = score_box(s, {10, 20, 20, 30});
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(one[k], s.cell(2, 1)[k], 1e-12);

  SimilarityMap flat{fm.geometry(), 2, std::vector<double>(16 * 2, 0.25)};
  const auto any = score_box(flat, testing_util::random_box(gen, 40, 40, false));
  EXPECT_NEAR(any[0], 0.25, 1e-12);
  EXPECT_NEAR(any[1], 0.25, 1e-12);
}

TEST(ScoreBox, MatchesPixelOracle) {
  std::mt19937_64 gen(6);
  for (int i = 0; i < 100; ++i) {
    const auto fm = testing_util::random_map(gen, 5, 6, 7, 33, 40, 5);
    const auto p = random_protos(gen, 2, 2, 5);
    const auto box = testing_util::random_box(gen, 40, 33, i % 3 == 0);
    const auto got = score_box(similarity_map(fm, p), box);
    const auto ref = oracle::pixel_scores(fm, rows_of(p), box);
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(got[k], ref[k], 1e-6);
  }
}

TEST(Classify, Examples) {
  const ClassTable t2({{"a", ClassRole::kNovel}, {"b", ClassRole::kNovel}}, 1);
  const auto v = classify_proposal({0.9, 0.2, 0.5}, t2);
  EXPECT_FALSE(v.background);
  EXPECT_EQ(v.class_id, 0);
  EXPECT_EQ(v.score, 0.9);
  const ClassTable t1({{"a", ClassRole::kNovel}}, 1);
  EXPECT_TRUE(classify_proposal({0.3, 0.8}, t1).background);
}

TEST(Classify, ExhaustiveThreeRowGridsWithTies) {
  const ClassTable t({{"a", ClassRole::kNovel}, {"b", ClassRole::kNovel}}, 1);
  const double levels[] = {-0.5, 0.0, 0.5};
  for (double a : levels) {
    for (double b : levels) {
      for (double c : levels) {
        const std::vector<double> s{a, b, c};
        const int ref = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
        const auto v = classify_proposal(s, t);
        EXPECT_EQ(v.row, ref);
        EXPECT_EQ(v.background, ref == 2);
      }
    }
  }
}

TEST(Detect, ZeroProposals) {
  std::mt19937_64 gen(1);
  const auto fm = testing_util::random_map(gen, 2, 2, 4, 8, 8, 3);
  EXPECT_TRUE(detect_image(fm, {}, random_protos(gen, 1, 0, 3)).empty());
}

TEST(Detect, MatchingMapGivesScoreOne) {
  std::vector<float> data;
  for (int i = 0; i < 9; ++i) data.insert(data.end(), {0.0f, 2.0f, 0.0f});
  FeatureMap fm({3, 3, 4, 12, 12}, 3, data);
  const auto p = make_protos(2, 1, {1, 0, 0, 0, 1, 0, 0, 0, 1}, 3);
  const auto d = detect_image(fm, {{1, 1, 9, 9}}, p);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].class_id, 1);
  EXPECT_NEAR(d[0].score, 1.0, 1e-12);
}

TEST(Detect, BackgroundWinnersAreDropped) {
  std::vector<float> data;
  for (int i = 0; i < 4; ++i) data.insert(data.end(), {0.0f, 0.0f, 1.0f});
  FeatureMap fm({2, 2, 4, 8, 8}, 3, data);
  const auto p = make_protos(2, 1, {1, 0, 0, 0, 1, 0, 0, 0, 1}, 3);
  EXPECT_TRUE(detect_image(fm, {{0, 0, 8, 8}, {1, 1, 3, 3}}, p).empty());
}

TEST(Detect, PlantedBoxesRankTop) {
  std::mt19937_64 gen(9);
  std::normal_distribution<float> n(0, 1);
  const int dim = 8;
  std::vector<float> data(static_cast<std::size_t>(16) * 16 * dim);
  for (float& v : data) v = n(gen);
  // class 0 at cells [2,6)x[2,6), class 1 at [9,13)x[8,12)
  for (int r = 0; r < 16; ++r) {
    for (int c = 0; c < 16; ++c) {
      int cls = -1;
      if (r >= 2 && r < 6 && c >= 2 && c < 6) cls = 0;
      if (r >= 9 && r < 13 && c >= 8 && c < 12) cls = 1;
      if (cls < 0) continue;
      for (int d = 0; d < dim; ++d) data[(r * 16 + c) * dim + d] = d == cls ? 5.0f : 0.1f * n(gen);
    }
  }
  FeatureMap fm({16, 16, 10, 160, 160}, dim, data);
  std::vector<double> rows(3 * dim, 0.0);
  rows[0] = 1;
  rows[dim + 1] = 1;
  rows[2 * dim + 2] = 1;
  const auto p = make_protos(2, 1, rows, dim);
  std::vector<PixelBox> props{{20, 20, 60, 60}, {80, 90, 120, 130}};
  for (int i = 0; i < 50; ++i) props.push_back(testing_util::random_box(gen, 160, 160, false));
  std::shuffle(props.begin(), props.end(), gen);
  auto d = detect_image(fm, props, p);
  std::sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  ASSERT_GE(d.size(), 2u);
  std::vector<PixelBox> top{d[0].box, d[1].box};
  EXPECT_NE(std::find(top.begin(), top.end(), PixelBox{20, 20, 60, 60}), top.end());
  EXPECT_NE(std::find(top.begin(), top.end(), PixelBox{80, 90, 120, 130}), top.end());
}

TEST(Detect, OutputsAreInputProposalsAndPermutationInvariant) {
  std::mt19937_64 gen(13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto fm = testing_util::random_map(gen, 6, 6, 8, 48, 48, 4);
    const auto p = random_protos(gen, 3, 1, 4);
    std::vector<PixelBox> props;
    for (int i = 0; i < 20; ++i) props.push_back(testing_util::random_box(gen, 48, 48, false));
    const auto a = detect_image(fm, props, p);
    for (const auto& det : a) {
      EXPECT_NE(std::find(props.begin(), props.end(), det.box), props.end());
      EXPECT_LT(det.class_id, 3);
    }
    std::shuffle(props.begin(), props.end(), gen);
    const auto b = detect_image(fm, props, p);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  }
}

TEST(Detect, MarginScoreSubtractsBestBackground) {
  FeatureMap fm({1, 1, 4, 4, 4}, 2, {1.0f, 0.2f});
  const auto p = make_protos(1, 1, {1, 0, 0, 1}, 2);
  DetectOptions opts;
  opts.score_mode = ScoreMode::kMargin;
  const auto d = detect_image(fm, {{0, 0, 4, 4}}, p, opts);
  ASSERT_EQ(d.size(), 1u);
  const double n = std::sqrt(1.0 + 0.2f * 0.2f);
  EXPECT_NEAR(d[0].score, (1.0 - 0.2f) / n, 1e-6);
}

TEST(ScaleInvariance, FeaturesAndStoredPrototypes) {
  std::mt19937_64 gen(21);
  std::uniform_real_distribution<double> scale(0.01, 100);
  for (int trial = 0; trial < 30; ++trial) {
    const auto fm = testing_util::random_map(gen, 5, 5, 6, 30, 30, 6);
    const auto p = random_protos(gen, 3, 2, 6);
    std::vector<float> scaled_f = fm.data();
    for (std::size_t i = 0; i < scaled_f.size(); i += 6) {
      const double s = scale(gen);
      for (int d = 0; d < 6; ++d) scaled_f[i + d] = static_cast<float>(scaled_f[i + d] * s);
    }
    const FeatureMap fm2(fm.geometry(), 6, scaled_f);
    std::vector<float> scaled_p = p.data();
    for (std::size_t i = 0; i < scaled_p.size(); i += 6) {
      const double s = scale(gen);
      for (int d = 0; d < 6; ++d) scaled_p[i + d] = static_cast<float>(scaled_p[i + d] * s);
    }
    const auto p2 = PrototypeSet::from_stored(p.class_table(), 6, scaled_p, 0.1, Provenance::kAveraged);
    const auto s1 = similarity_map(fm, p);
    const auto s2 = similarity_map(fm2, p2);
    for (int i = 0; i < 10; ++i) {
      const auto box = testing_util::random_box(gen, 30, 30, false);
      EXPECT_EQ(classify_proposal(score_box(s1, box), p.class_table()).row,
                classify_proposal(score_box(s2, box), p2.class_table()).row);
    }
  }
}
