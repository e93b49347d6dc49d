#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "scenelabel/active_query.hpp"

namespace scenelabel {
namespace {

constexpr UncertaintyMeasure kMeasures[] = {UncertaintyMeasure::kEntropy,
                                            UncertaintyMeasure::kLeastConfidence,
                                            UncertaintyMeasure::kMargin};

UncertaintyMap MakeMap(int keyframe, int w, int h, std::vector<float> values) {
  UncertaintyMap m;
  m.keyframe = keyframe;
  m.width = w;
  m.height = h;
  m.values = std::move(values);
  for (float v : m.values) m.frame_total += v;
  return m;
}

TEST(PixelUncertainty, OneHotIsZero) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(5);
  p[2] = 1;
  for (auto m : kMeasures) EXPECT_EQ(PixelUncertainty(p, m), 0.0) << MeasureName(m);
}

TEST(PixelUncertainty, UniformThirteen) {
  const Eigen::VectorXd p = Eigen::VectorXd::Constant(13, 1.0 / 13);
  EXPECT_NEAR(PixelUncertainty(p, UncertaintyMeasure::kEntropy), 2.5649493574615367, 1e-12);
  EXPECT_NEAR(PixelUncertainty(p, UncertaintyMeasure::kLeastConfidence), 12.0 / 13, 1e-15);
  EXPECT_NEAR(PixelUncertainty(p, UncertaintyMeasure::kMargin), 1.0, 1e-15);
}

TEST(PixelUncertainty, ThreeClassValues) {
  Eigen::VectorXd p(3);
  p << 0.5, 0.3, 0.2;
  EXPECT_NEAR(PixelUncertainty(p, UncertaintyMeasure::kEntropy), 1.0296530140645735, 1e-14);
  EXPECT_NEAR(PixelUncertainty(p, UncertaintyMeasure::kLeastConfidence), 0.5, 1e-15);
  EXPECT_NEAR(PixelUncertainty(p, UncertaintyMeasure::kMargin), 0.8, 1e-15);
}

TEST(PixelUncertainty, UniformIsMaximal) {
  std::mt19937_64 rng(3);
  std::gamma_distribution<double> g(0.5);
  for (int c : {2, 4, 13}) {
    const Eigen::VectorXd u = Eigen::VectorXd::Constant(c, 1.0 / c);
    for (int trial = 0; trial < 500; ++trial) {
      Eigen::VectorXd p(c);
      for (int i = 0; i < c; ++i) p[i] = g(rng) + 1e-12;
      p /= p.sum();
      for (auto m : kMeasures) {
        const double value = PixelUncertainty(p, m);
        EXPECT_LE(value, PixelUncertainty(u, m) + 1e-12);
        EXPECT_GE(value, 0.0);
      }
    }
  }
}

TEST(PixelUncertainty, HierarchicalAtZeroLogits) {
  EXPECT_NEAR(HierarchicalUncertainty(Eigen::VectorXd::Zero(8)), std::log(2.0), 1e-15);
  EXPECT_NEAR(HierarchicalUncertainty(Eigen::VectorXd::Constant(3, 60.0)), 0.0, 1e-20);
}

TEST(PixelUncertainty, MeasureNames) {
  for (auto m : kMeasures) EXPECT_EQ(ParseMeasure(MeasureName(m)), m);
  EXPECT_THROW(ParseMeasure("variance"), Error);
}

TEST(SelectQuery, SingleUncertainPixel) {
  std::vector<float> v(12, 0.0f);
  v[7] = 0.4f;
  const std::vector<UncertaintyMap> maps = {MakeMap(0, 4, 3, v)};
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto q = SelectQuery(maps, 1.0 / 12, {}, 0.0, &rng);
    EXPECT_EQ(q.u, 3);
    EXPECT_EQ(q.v, 1);
    EXPECT_FLOAT_EQ(q.value, 0.4f);
  }
}

TEST(SelectQuery, FrameChosenInProportionToTotal) {
  const std::vector<UncertaintyMap> maps = {MakeMap(0, 2, 2, {0.25f, 0.25f, 0.25f, 0.25f}),
                                            MakeMap(1, 2, 2, {1.0f, 1.0f, 1.0f, 1.0f})};
  std::mt19937_64 rng(11);
  const int draws = 20000;
  int second = 0;
  for (int i = 0; i < draws; ++i) second += SelectQuery(maps, 0.5, {}, 0.0, &rng).keyframe == 1;
  EXPECT_NEAR(second / static_cast<double>(draws), 0.8, 0.015);
}

TEST(SelectQuery, ProposalRanksWithinTopK) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> v(20 * 10);
    for (auto& x : v) x = u(rng);
    const auto maps = std::vector<UncertaintyMap>{MakeMap(0, 20, 10, v)};
    std::vector<float> sorted = v;
    std::sort(sorted.rbegin(), sorted.rend());
    const double k = 0.05;
    const auto q = SelectQuery(maps, k, {}, 0.0, &rng);
    EXPECT_GE(q.value, sorted[static_cast<size_t>(std::ceil(k * v.size())) - 1]);
    EXPECT_FLOAT_EQ(q.value, maps[0].at(q.u, q.v));
  }
}

TEST(SelectQuery, NeverProposesNearAnnotations) {
  std::vector<float> v(16 * 16, 0.0f);
  for (int y = 6; y < 10; ++y) {
    for (int x = 6; x < 10; ++x) v[y * 16 + x] = 1.0f;
  }
  v[0] = 0.5f;
  const auto maps = std::vector<UncertaintyMap>{MakeMap(2, 16, 16, v)};
  std::vector<Annotation> ann = {{2, 8, 8, FlatLabel{0}}};
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    const auto q = SelectQuery(maps, 0.02, ann, 5.0, &rng);
    EXPECT_GT(std::hypot(q.u - 8, q.v - 8), 5.0);
  }
  // Annotations on another keyframe do not exclude anything here.
  ann[0].keyframe = 3;
  bool hit_block = false;
  for (int i = 0; i < 50; ++i) {
    const auto q = SelectQuery(maps, 0.02, ann, 5.0, &rng);
    hit_block |= q.u >= 6 && q.u < 10 && q.v >= 6 && q.v < 10;
  }
  EXPECT_TRUE(hit_block);
}

TEST(SelectQuery, StridedCoordinates) {
  std::vector<float> v(6, 0.0f);
  v[5] = 1.0f;
  auto m = MakeMap(0, 3, 2, v);
  m.stride = 4;
  std::mt19937_64 rng(2);
  const auto q = SelectQuery(std::vector<UncertaintyMap>{m}, 0.1, {}, 0.0, &rng);
  EXPECT_EQ(q.u, 8);
  EXPECT_EQ(q.v, 4);
}

TEST(SelectQuery, DeterministicForSeed) {
  std::mt19937_64 src(4);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<UncertaintyMap> maps;
  for (int k = 0; k < 3; ++k) {
    std::vector<float> v(64);
    for (auto& x : v) x = u(src);
    maps.push_back(MakeMap(k, 8, 8, v));
  }
  std::mt19937_64 a(77), b(77);
  for (int i = 0; i < 10; ++i) {
    const auto qa = SelectQuery(maps, 0.05, {}, 2.0, &a);
    const auto qb = SelectQuery(maps, 0.05, {}, 2.0, &b);
    EXPECT_EQ(qa.keyframe, qb.keyframe);
    EXPECT_EQ(qa.u, qb.u);
    EXPECT_EQ(qa.v, qb.v);
  }
}

TEST(SelectQuery, ErrorsWhenNothingEligible) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(SelectQuery({}, 0.05, {}, 5.0, &rng), Error);
  const auto maps = std::vector<UncertaintyMap>{MakeMap(0, 2, 2, {1, 1, 1, 1})};
  const std::vector<Annotation> ann = {{0, 0, 0, FlatLabel{0}}};
  try {
    SelectQuery(maps, 0.5, ann, 10.0, &rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotFound);
  }
  EXPECT_THROW(SelectQuery(maps, 0.0, {}, 0.0, &rng), Error);
}

TEST(RefreshMaps, FreshFieldIsNearMaximallyUncertain) {
  EncodingConfig enc;
  enc.num_frequency_bands = 4;
  enc.scene_bound.min = Vec3(-2, -2, -1);
  enc.scene_bound.max = Vec3(2, 2, 3);
  const FieldParams params = InitParams(3, 16, enc, 32);
  Keyframe kf;
  kf.id = 0;
  kf.frame.intrinsics = {30, 30, 12.5, 9.5, 26, 19};
  kf.frame.colour = ColourImage(26, 19, 3);
  kf.frame.depth = DepthImage(26, 19, 1, 1.5f);
  kf.frame.world_from_camera = Pose::Identity();
  QueryConfig cfg;
  SamplingConfig sampling;
  const int classes = 13;
  const auto maps = RefreshMaps(params, std::vector<Keyframe>{kf}, SemanticMode::kFlat, classes,
                                cfg, sampling, 7);
  ASSERT_EQ(maps.size(), 1u);
  const auto& m = maps[0];
  EXPECT_EQ(m.width, 7);
  EXPECT_EQ(m.height, 5);
  EXPECT_EQ(m.values.size(), 35u);
  EXPECT_EQ(m.snapshot, 7u);
  double sum = 0;
  for (float v : m.values) {
    EXPECT_GT(v, 0.9 * std::log(classes));
    EXPECT_LE(v, std::log(classes) + 1e-5);
    sum += v;
  }
  EXPECT_NEAR(m.frame_total, sum, 1e-6 * sum);
}

}  // namespace
}  // namespace scenelabel
