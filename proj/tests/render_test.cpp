#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "scenelabel/render.hpp"

namespace scenelabel {
namespace {

CameraIntrinsics TestIntrinsics() {
  CameraIntrinsics k;
  k.fx = 100;
  k.fy = 110;
  k.cx = 40;
  k.cy = 30;
  k.width = 80;
  k.height = 60;
  return k;
}

TEST(PixelToRay, PrincipalPoint) {
  auto k = TestIntrinsics();
  Ray r = PixelToRay(k.cx, k.cy, k, Pose::Identity(), 0.1, 5.0);
  EXPECT_NEAR((r.direction - Vec3::UnitZ()).norm(), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(r.range_per_depth, 1.0);
}

TEST(PixelToRay, OneFocalLengthRight) {
  auto k = TestIntrinsics();
  k.width = 200;
  Ray r = PixelToRay(k.cx + k.fx, k.cy, k, Pose::Identity(), 0.1, 5.0);
  EXPECT_NEAR((r.direction - Vec3(1, 0, 1).normalized()).norm(), 0.0, 1e-15);
  EXPECT_NEAR(r.range_per_depth, std::sqrt(2.0), 1e-15);
}

TEST(PixelToRay, PoseComposes) {
  auto k = TestIntrinsics();
  Pose pose = Pose::Identity();
  pose.linear() = Eigen::AngleAxisd(0.7, Vec3(1, 2, 3).normalized()).toRotationMatrix();
  pose.translation() = Vec3(0.5, -1, 2);
  Ray local = PixelToRay(13, 47, k, Pose::Identity(), 0.1, 5.0);
  Ray world = PixelToRay(13, 47, k, pose, 0.1, 5.0);
  EXPECT_LT((world.origin - pose.translation()).norm(), 1e-15);
  EXPECT_LT((world.direction - pose.linear() * local.direction).norm(), 1e-15);
  EXPECT_NEAR(world.direction.norm(), 1.0, 1e-12);
}

TEST(PixelToRay, OutOfBoundsThrows) {
  auto k = TestIntrinsics();
  EXPECT_THROW(PixelToRay(-1, 0, k, Pose::Identity(), 0.1, 5), Error);
  EXPECT_THROW(PixelToRay(0, 60, k, Pose::Identity(), 0.1, 5), Error);
}

TEST(Samples, MidpointStrata) {
  Ray r;
  r.near = 1;
  r.far = 5;
  SamplingConfig cfg;
  auto d = StratifiedSamples(r, 4, std::nullopt, cfg, SampleMode::kMidpoint);
  ASSERT_EQ(d.size(), 4u);
  EXPECT_DOUBLE_EQ(d[0], 1.5);
  EXPECT_DOUBLE_EQ(d[1], 2.5);
  EXPECT_DOUBLE_EQ(d[2], 3.5);
  EXPECT_DOUBLE_EQ(d[3], 4.5);
}

TEST(Samples, JitteredAscendingWithinRange) {
  Ray r;
  r.near = 0.2;
  r.far = 4;
  SamplingConfig cfg;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    std::optional<double> guide;
    if (seed % 2) guide = 0.2 + 3.8 * (seed % 7) / 7.0;
    auto d = StratifiedSamples(r, 16, guide, cfg, SampleMode::kJittered, &rng);
    for (size_t i = 0; i < d.size(); ++i) {
      EXPECT_GE(d[i], r.near);
      EXPECT_LE(d[i], r.far);
      if (i > 0) EXPECT_GT(d[i], d[i - 1]);
    }
  }
}

TEST(Samples, GuidedBandHoldsHalf) {
  Ray r;
  r.near = 0.1;
  r.far = 5;
  SamplingConfig cfg;
  const double band = cfg.guided_sigma * cfg.guided_band_sigmas;
  for (uint64_t seed = 0; seed < 500; ++seed) {
    std::mt19937_64 rng(seed);
    auto d = StratifiedSamples(r, 32, 2.0, cfg, SampleMode::kJittered, &rng);
    int inside = 0;
    for (double x : d) inside += std::abs(x - 2.0) <= band;
    EXPECT_GE(inside, 16);
  }
}

// Term-by-term extended-precision evaluation of the compositing equations.
struct OracleComposite {
  long double depth = 0, variance = 0, tail = 1;
  std::vector<long double> colour, logits, weights;
};

OracleComposite Oracle(const SampleSet& s) {
  const int n = static_cast<int>(s.size());
  const int k = static_cast<int>(s.values.rows()) - 4;
  OracleComposite o;
  o.colour.assign(3, 0);
  o.logits.assign(k, 0);
  std::vector<long double> occ(n);
  for (int i = 0; i < n; ++i) {
    const long double delta = i + 1 < n ? static_cast<long double>(s.depths[i + 1]) - s.depths[i]
                                        : static_cast<long double>(s.last_delta);
    occ[i] = 1.0L - std::exp(-static_cast<long double>(s.values(3, i)) * delta);
  }
  for (int i = 0; i < n; ++i) {
    long double w = occ[i];
    for (int j = 0; j < i; ++j) w *= 1.0L - occ[j];
    o.weights.push_back(w);
    o.depth += w * s.depths[i];
    for (int c = 0; c < 3; ++c) o.colour[c] += w * s.values(c, i);
    for (int c = 0; c < k; ++c) o.logits[c] += w * s.values(4 + c, i);
  }
  for (int i = 0; i < n; ++i) {
    const long double diff = o.depth - s.depths[i];
    o.variance += o.weights[i] * diff * diff;
    o.tail *= 1.0L - occ[i];
  }
  return o;
}

SampleSet RandomSampleSet(std::mt19937_64* rng, int n, int k) {
  std::uniform_real_distribution<double> u(0, 1);
  SampleSet s;
  s.depths.resize(n);
  double d = 0.1 + u(*rng);
  for (int i = 0; i < n; ++i) {
    s.depths[i] = d;
    d += 0.01 + 0.5 * u(*rng);
  }
  s.last_delta = 0.05 + 0.3 * u(*rng);
  s.values.resize(4 + k, n);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) s.values(c, i) = u(*rng);
    // Mix of transparent, moderate and near-opaque densities.
    const double r = u(*rng);
    s.values(3, i) = r < 0.2 ? 0.0 : (r < 0.9 ? 5 * u(*rng) : 200 * u(*rng));
    for (int c = 0; c < k; ++c) s.values(4 + c, i) = 4 * u(*rng) - 2;
  }
  return s;
}

TEST(Composite, MatchesExtendedPrecisionOracle) {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 2 + t % 15;
    const auto s = RandomSampleSet(&rng, n, 3);
    const auto c = Composite(s);
    const auto o = Oracle(s);
    worst = std::max(worst, std::abs(c.depth - static_cast<double>(o.depth)));
    worst = std::max(worst, std::abs(c.depth_variance - static_cast<double>(o.variance)));
    worst = std::max(worst, std::abs(c.transmittance - static_cast<double>(o.tail)));
    for (int i = 0; i < 3; ++i) {
      worst = std::max(worst, std::abs(c.colour[i] - static_cast<double>(o.colour[i])));
      worst = std::max(worst, std::abs(c.semantic_logits[i] - static_cast<double>(o.logits[i])));
    }
    for (int i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(c.weights[i] - static_cast<double>(o.weights[i])));
    }
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(Composite, TransparentAndOpaque) {
  SampleSet s;
  s.depths = Eigen::Vector3d(1, 2, 3);
  s.last_delta = 1;
  s.values = Eigen::MatrixXd::Zero(6, 3);
  s.values.topRows(3).setConstant(0.7);
  auto c = Composite(s);
  EXPECT_EQ(c.depth, 0.0);
  EXPECT_EQ(c.colour.norm(), 0.0);
  EXPECT_EQ(c.semantic_logits.norm(), 0.0);
  EXPECT_EQ(c.weights.norm(), 0.0);

  s.values(3, 0) = 1e6;
  s.values.col(0).head(3) = Eigen::Vector3d(0.1, 0.2, 0.3);
  c = Composite(s);
  EXPECT_NEAR(c.weights[0], 1.0, 1e-12);
  EXPECT_NEAR(c.depth, 1.0, 1e-12);
  EXPECT_NEAR(c.depth_variance, 0.0, 1e-12);
  EXPECT_NEAR((c.colour - Eigen::Vector3d(0.1, 0.2, 0.3)).norm(), 0.0, 1e-12);
}

TEST(Composite, TelescopingSinglePrecision) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 1000; ++t) {
    const auto s = RandomSampleSet(&rng, 2 + t % 15, 2);
    const VectorX<float> d = s.depths.cast<float>();
    const MatrixX<float> v = s.values.cast<float>();
    auto c = Composite<float>(d, static_cast<float>(s.last_delta), v);
    double tail = 1;
    for (int i = 0; i < c.occupancies.size(); ++i) tail *= 1.0 - c.occupancies[i];
    EXPECT_NEAR(c.weights.cast<double>().sum(), 1.0 - tail, 1e-6);
    EXPECT_NEAR(c.weights.sum() + c.transmittance, 1.0f, 1e-6f);
    EXPECT_GE(c.depth_variance, 0.0f);
    EXPECT_TRUE((c.occupancies.array() >= 0).all() && (c.occupancies.array() <= 1).all());
  }
}

TEST(Composite, ColourChannelEquivariance) {
  std::mt19937_64 rng(8);
  const auto s = RandomSampleSet(&rng, 9, 1);
  SampleSet p = s;
  p.values.row(0) = s.values.row(2);
  p.values.row(1) = s.values.row(0);
  p.values.row(2) = s.values.row(1);
  auto a = Composite(s), b = Composite(p);
  EXPECT_DOUBLE_EQ(b.colour[0], a.colour[2]);
  EXPECT_DOUBLE_EQ(b.colour[1], a.colour[0]);
  EXPECT_DOUBLE_EQ(b.colour[2], a.colour[1]);
}

TEST(Composite, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(77);
  const double h = 1e-6;
  for (int t = 0; t < 20; ++t) {
    auto s = RandomSampleSet(&rng, 3 + t % 6, 2);
    for (int i = 0; i < s.size(); ++i) s.values(3, i) = std::min(s.values(3, i), 8.0);
    CompositeCotangent<double> cot;
    cot.depth = 0.7;
    cot.depth_variance = -1.3;
    cot.colour = Eigen::Vector3d(0.2, -0.4, 1.1);
    cot.semantic_logits = Eigen::Vector2d(0.9, -0.6);
    auto objective = [&](const SampleSet& x) {
      auto c = Composite(x);
      return cot.depth * c.depth + cot.depth_variance * c.depth_variance +
             cot.colour.dot(c.colour) + cot.semantic_logits.dot(c.semantic_logits);
    };
    const auto c = Composite(s);
    Eigen::MatrixXd grad(s.values.rows(), s.values.cols());
    CompositeBackward<double>(s.depths, s.last_delta, s.values, c, cot, grad);
    for (int r = 0; r < s.values.rows(); ++r) {
      for (int i = 0; i < s.values.cols(); ++i) {
        SampleSet up = s, down = s;
        up.values(r, i) += h;
        down.values(r, i) -= h;
        const double fd = (objective(up) - objective(down)) / (2 * h);
        EXPECT_LT(std::abs(grad(r, i) - fd) / (std::abs(fd) + 1e-8), 1e-4)
            << "row " << r << " sample " << i;
      }
    }
  }
}

TEST(RenderPixel, EqualsChainedOps) {
  EncodingConfig enc;
  enc.num_frequency_bands = 2;
  auto p = InitParams(4, 3, enc, 16).cast<double>();
  auto k = TestIntrinsics();
  Pose pose = Pose::Identity();
  pose.translation() = Vec3(0.1, 0.2, -0.5);
  SamplingConfig cfg;
  auto c = RenderPixel<double>(p, k, pose, 12, 34, 8, 1.2, cfg, SampleMode::kMidpoint);
  Ray ray = PixelToRay(12, 34, k, pose, cfg.near, cfg.far);
  auto d = StratifiedSamples(ray, 8, 1.2 * ray.range_per_depth, cfg, SampleMode::kMidpoint);
  auto s = SampleField<double>(p, ray, d);
  auto e = Composite(s);
  EXPECT_DOUBLE_EQ(c.depth, e.depth);
  EXPECT_DOUBLE_EQ(c.colour[1], e.colour[1]);
  EXPECT_NEAR(c.weights.sum() + c.transmittance, 1.0, 1e-6);
}

TEST(RenderFrame, StridedShape) {
  EncodingConfig enc;
  enc.num_frequency_bands = 1;
  auto p = InitParams(4, 2, enc, 8);
  auto k = TestIntrinsics();
  k.width = 10;
  k.height = 7;
  k.cx = 5;
  k.cy = 3;
  auto f = RenderFrame(p, k, Pose::Identity(), 4, SamplingConfig{}, 4);
  EXPECT_EQ(f.width, 3);
  EXPECT_EQ(f.height, 2);
  EXPECT_EQ(f.logits.cols(), 6);
  EXPECT_EQ(f.logits.rows(), 2);
}

}  // namespace
}  // namespace scenelabel
