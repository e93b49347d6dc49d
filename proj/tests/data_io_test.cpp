#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "scenelabel/data_io.hpp"

namespace scenelabel {
namespace {

namespace fs = std::filesystem;

fs::path TempDir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("scenelabel_data_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Pose RandomPose(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  Pose p = Pose::Identity();
  p.linear() = q.toRotationMatrix();
  p.translation() = Vec3(n(rng), n(rng), n(rng));
  return p;
}

std::vector<Frame> MakeFrames(int count) {
  std::mt19937_64 rng(12);
  std::vector<Frame> frames;
  for (int i = 0; i < count; ++i) {
    Frame f;
    f.intrinsics = {40, 41, 15.5, 11.5, 32, 24};
    f.colour = ColourImage(32, 24, 3);
    f.depth = DepthImage(32, 24, 1, 1.5f);
    for (int v = 0; v < 24; ++v) {
      for (int u = 0; u < 32; ++u) {
        f.colour.at(u, v, 0) = u / 31.0f;
        f.colour.at(u, v, 1) = v / 23.0f;
        f.colour.at(u, v, 2) = i / 9.0f;
      }
    }
    f.depth.at(3, 4) = 0.0f;  // invalid pixel
    f.depth.at(5, 5) = 0.25f * (i + 1);
    f.world_from_camera = RandomPose(rng);
    frames.push_back(f);
  }
  return frames;
}

TEST(Manifest, TenFrameRoundTrip) {
  const fs::path dir = TempDir("roundtrip");
  const auto frames = MakeFrames(10);
  const std::string manifest = WriteSequence(dir.string(), frames);
  SequenceReader reader(manifest);
  ASSERT_EQ(reader.size(), 10u);
  EXPECT_EQ(reader.manifest().intrinsics, frames[0].intrinsics);
  int count = 0;
  while (auto f = reader.next()) {
    const Frame& src = frames[count];
    EXPECT_EQ(f->intrinsics, src.intrinsics);
    EXPECT_FLOAT_EQ(f->depth.at(0, 0), 1.5f);
    EXPECT_EQ(f->depth.at(3, 4), 0.0f);
    EXPECT_FLOAT_EQ(f->depth.at(5, 5), 0.25f * (count + 1));
    // 8-bit quantisation, channel order preserved.
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(f->colour.at(31, 23, c), src.colour.at(31, 23, c), 0.5 / 255 + 1e-6);
      EXPECT_NEAR(f->colour.at(10, 7, c), src.colour.at(10, 7, c), 0.5 / 255 + 1e-6);
    }
    EXPECT_LT((f->world_from_camera.matrix() - src.world_from_camera.matrix())
                  .cwiseAbs()
                  .maxCoeff(),
              1e-14);
    ++count;
  }
  EXPECT_EQ(count, 10);
  EXPECT_FALSE(reader.next());
}

TEST(Manifest, DepthScaleApplied) {
  const fs::path dir = TempDir("scale");
  auto frames = MakeFrames(1);
  WriteSequence(dir.string(), frames);  // 1.5 m -> raw 1500 at 1 mm per unit
  std::ofstream(dir / "half.txt") << "# same images, half the scale\n"
                                     "intrinsics 40 41 15.5 11.5 32 24\n"
                                     "depth_scale 0.0005\n"
                                     "poses poses.txt\n"
                                     "frame colour/000000.png depth/000000.png  # first\n";
  const Frame f = SequenceReader((dir / "half.txt").string()).load(0);
  EXPECT_FLOAT_EQ(f.depth.at(0, 0), 0.75f);
}

TEST(Manifest, Errors) {
  const fs::path dir = TempDir("errors");
  WriteSequence(dir.string(), MakeFrames(2));
  auto code_of = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kInvalidArgument;
  };
  std::ofstream(dir / "short.txt") << "intrinsics 40 41 15.5 11.5 32 24\n"
                                      "poses poses.txt\n"
                                      "frame colour/000000.png depth/000000.png\n";
  EXPECT_EQ(code_of([&] { ReadManifest((dir / "short.txt").string()); }), ErrorCode::kParse);
  std::ofstream(dir / "unknown.txt") << "lens 1 2\n";
  EXPECT_EQ(code_of([&] { ReadManifest((dir / "unknown.txt").string()); }), ErrorCode::kParse);
  EXPECT_EQ(code_of([&] { ReadManifest((dir / "absent.txt").string()); }), ErrorCode::kIo);

  std::ofstream(dir / "size.txt") << "intrinsics 40 41 15.5 11.5 30 24\n"
                                     "poses poses.txt\n"
                                     "frame colour/000000.png depth/000000.png\n"
                                     "frame colour/000001.png depth/000001.png\n";
  SequenceReader wrong_size((dir / "size.txt").string());
  EXPECT_EQ(code_of([&] { wrong_size.load(0); }), ErrorCode::kShapeMismatch);

  std::ofstream(dir / "colourdepth.txt") << "intrinsics 40 41 15.5 11.5 32 24\n"
                                            "poses poses.txt\n"
                                            "frame colour/000000.png colour/000000.png\n"
                                            "frame colour/000001.png depth/000009.png\n";
  SequenceReader mixed((dir / "colourdepth.txt").string());
  EXPECT_EQ(code_of([&] { mixed.load(0); }), ErrorCode::kParse);
  EXPECT_EQ(code_of([&] { mixed.load(1); }), ErrorCode::kIo);
  EXPECT_EQ(code_of([&] { mixed.load(2); }), ErrorCode::kOutOfRange);
}

TEST(Pose, FormatParseRoundTrip) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const Pose p = RandomPose(rng);
    std::istringstream in(FormatPose(p));
    std::vector<double> values((std::istream_iterator<double>(in)), std::istream_iterator<double>());
    ASSERT_EQ(values.size(), 12u);
    const Pose q = ParsePose(values);
    EXPECT_LT((q.matrix() - p.matrix()).cwiseAbs().maxCoeff(), 1e-14);
  }
  // An exactly orthonormal rotation comes back bit for bit.
  Pose axis = Pose::Identity();
  axis.linear() << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  axis.translation() = Vec3(0.1, -2.5, 1e-9);
  std::istringstream in(FormatPose(axis));
  std::vector<double> values((std::istream_iterator<double>(in)), std::istream_iterator<double>());
  EXPECT_EQ(ParsePose(values).matrix(), axis.matrix());
}

TEST(Pose, Validation) {
  std::vector<double> v = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  EXPECT_NO_THROW(ParsePose(v));
  v[15] = 2;
  EXPECT_THROW(ParsePose(v), Error);
  v[15] = 1;
  v[0] = 1.01;  // stretched rotation
  try {
    ParsePose(v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
  v[0] = 1 + 1e-6;  // small drift is projected back onto a rotation
  const Pose p = ParsePose(v);
  EXPECT_LT((p.linear().transpose() * p.linear() - Mat3::Identity()).norm(), 1e-12);
  EXPECT_THROW(ParsePose(std::vector<double>(11, 0.0)), Error);
}

TEST(ClassRemap, TableAndUnmapped) {
  const fs::path dir = TempDir("remap");
  std::ofstream(dir / "remap.txt") << "# raw -> train\n3 0\n7 1\n\n9 1 # merged\n";
  const auto table = LoadClassRemap((dir / "remap.txt").string());
  EXPECT_EQ(table.size(), 3u);
  LabelImage labels(4, 1, 1);
  labels.data = {3, 7, 9, 4};
  const LabelImage out = RemapLabels(labels, table, -1);
  EXPECT_EQ(out.data, (std::vector<int32_t>{0, 1, 1, -1}));
  std::ofstream(dir / "dup.txt") << "1 2\n1 3\n";
  EXPECT_THROW(LoadClassRemap((dir / "dup.txt").string()), Error);
}

// Two keyframes: a square of class 0 and a larger square of class 1 in the
// first, a small class 1 blob and an ignore region in the second.
std::vector<LabelImage> ClickScene() {
  std::vector<LabelImage> gt(2, LabelImage(40, 30, 1, 2));
  for (int v = 5; v < 16; ++v) {
    for (int u = 5; u < 16; ++u) gt[0].at(u, v) = 0;
  }
  for (int v = 6; v < 27; ++v) {
    for (int u = 18; u < 39; ++u) gt[0].at(u, v) = 1;
  }
  for (int v = 0; v < 5; ++v) {
    for (int u = 0; u < 5; ++u) gt[1].at(u, v) = 1;
  }
  for (int v = 10; v < 30; ++v) {
    for (int u = 10; u < 40; ++u) gt[1].at(u, v) = -1;
  }
  return gt;
}

TEST(CentroidClicks, OnePerClassAtRegionCentres) {
  const auto gt = ClickScene();
  std::mt19937_64 rng(1);
  const auto clicks = CentroidClicks(gt, 2, 2, &rng);
  ASSERT_EQ(clicks.size(), 2u);
  EXPECT_EQ(clicks[0], (ScriptedClick{0, 10, 10, 0}));
  EXPECT_EQ(clicks[1], (ScriptedClick{0, 28, 16, 1}));
}

TEST(CentroidClicks, LaterClicksSpreadOutAndStayInClass) {
  const auto gt = ClickScene();
  std::mt19937_64 rng(2);
  const auto clicks = CentroidClicks(gt, 3, 12, &rng);
  ASSERT_GE(clicks.size(), 6u);
  for (size_t i = 0; i < clicks.size(); ++i) {
    const auto& c = clicks[i];
    EXPECT_EQ(gt[c.keyframe].at(c.u, c.v), c.class_id);
    for (size_t j = 0; j < i; ++j) {
      if (clicks[j].keyframe != c.keyframe) continue;
      EXPECT_GT(std::hypot(c.u - clicks[j].u, c.v - clicks[j].v), kClickSpacing);
    }
  }
  EXPECT_EQ(clicks[0].class_id, 0);
  EXPECT_EQ(clicks[1].class_id, 1);
  EXPECT_EQ(clicks[2].class_id, 2);
  // Resuming from a prefix continues the same sequence.
  std::mt19937_64 a(5), b(5);
  const auto full = CentroidClicks(gt, 3, 6, &a);
  auto head = CentroidClicks(gt, 3, 3, &b);
  const auto tail = CentroidClicks(gt, 3, 3, &b, head);
  head.insert(head.end(), tail.begin(), tail.end());
  EXPECT_EQ(full, head);
}

TEST(ErrorGuided, PrefersConfidentMistakesThenLowMargin) {
  std::vector<LabelImage> gt(1, LabelImage(8, 8, 1, 0));
  gt[0].at(6, 6) = -1;
  PredictionView p;
  p.stride = 2;
  p.labels = LabelImage(4, 4, 1, 0);
  p.confidence = Image<float>(4, 4, 1, 0.9f);
  p.margin = Image<float>(4, 4, 1, 0.8f);
  p.labels.at(0, 3) = 1;
  p.confidence.at(0, 3) = 0.6f;
  p.labels.at(3, 0) = 1;
  p.confidence.at(3, 0) = 0.7f;
  p.labels.at(3, 3) = 1;  // ignored GT
  p.confidence.at(3, 3) = 0.99f;
  std::mt19937_64 rng(0);
  const std::vector<PredictionView> preds = {p};
  auto click = ErrorGuidedClick(gt, preds, 2, {}, &rng);
  ASSERT_TRUE(click);
  EXPECT_EQ(*click, (ScriptedClick{0, 6, 0, 0}));
  const std::vector<ScriptedClick> prev = {*click};
  click = ErrorGuidedClick(gt, preds, 2, prev, &rng);
  ASSERT_TRUE(click);
  EXPECT_EQ(*click, (ScriptedClick{0, 0, 6, 0}));

  // Everything correct: lowest margin wins.
  auto q = p;
  q.labels = LabelImage(4, 4, 1, 0);
  q.margin.at(2, 1) = 0.1f;
  const std::vector<PredictionView> right = {q};
  click = ErrorGuidedClick(gt, right, 2, {}, &rng);
  ASSERT_TRUE(click);
  EXPECT_EQ(*click, (ScriptedClick{0, 4, 2, 0}));

  // One click in the middle covers the whole 8x8 image.
  const std::vector<ScriptedClick> covering = {{0, 3, 3, 0}};
  EXPECT_FALSE(ErrorGuidedClick(gt, right, 2, covering, &rng));
}

TEST(ClickPolicy, Names) {
  for (auto p : {ClickPolicy::kCentroid, ClickPolicy::kErrorGuided}) {
    EXPECT_EQ(ParseClickPolicy(ClickPolicyName(p)), p);
  }
  EXPECT_THROW(ParseClickPolicy("lasso"), Error);
}

}  // namespace
}  // namespace scenelabel
