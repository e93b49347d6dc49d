#include <cmath>
#include <algorithm>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "scenelabel/semantics.hpp"

namespace scenelabel {
namespace {

TEST(FlatProbs, UniformAndStable) {
  auto p = FlatProbs<double>(Eigen::Vector4d::Constant(3.0));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p[i], 0.25);
  auto q = FlatProbs<double>(Eigen::Vector2d(1000, 0));
  EXPECT_TRUE(q.allFinite());
  EXPECT_NEAR(q[0], 1.0, 1e-15);
  EXPECT_NEAR(q[1], 0.0, 1e-15);
}

TEST(FlatProbs, MatchesExtendedPrecision) {
  auto p = FlatProbs<double>(Eigen::Vector3d(1, 2, 3));
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  EXPECT_NEAR(p[0], static_cast<double>(std::exp(1.0L) / z), 1e-12);
  EXPECT_NEAR(p[1], static_cast<double>(std::exp(2.0L) / z), 1e-12);
  EXPECT_NEAR(p[2], static_cast<double>(std::exp(3.0L) / z), 1e-12);
}

TEST(FlatProbs, ShiftInvariantAndNormalised) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 3);
  for (int t = 0; t < 100; ++t) {
    Eigen::VectorXd l(2 + t % 14);
    for (auto& v : l) v = n(rng);
    auto a = FlatProbs<double>(l);
    auto b = FlatProbs<double>((l.array() + 17.5).matrix());
    EXPECT_NEAR(a.sum(), 1.0, 1e-6);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
    Eigen::Index ia, ib;
    a.maxCoeff(&ia);
    b.maxCoeff(&ib);
    EXPECT_EQ(ia, ib);
  }
}

TEST(FlatLoss, Values) {
  EXPECT_DOUBLE_EQ(FlatLoss(Eigen::Vector3d(0, 1, 0), {1}), 0.0);
  EXPECT_NEAR(FlatLoss(Eigen::VectorXd::Constant(13, 1.0 / 13), {4}), 2.5649493574615367,
              1e-12);
  EXPECT_NEAR(FlatLoss(Eigen::Vector2d(1, 0), {1}), -std::log(kProbFloor), 1e-9);
  EXPECT_THROW(FlatLoss(Eigen::Vector2d(1, 0), {2}), Error);
}

TEST(FlatLoss, GradientMatchesFiniteDifferences) {
  Eigen::VectorXd l(5);
  l << 0.3, -1.2, 2.0, 0.7, -0.1;
  Eigen::VectorXd g;
  FlatLossFromLogits<double>(l, 2, &g);
  const auto p = FlatProbs<double>(l);
  Eigen::VectorXd onehot = Eigen::VectorXd::Zero(5);
  onehot[2] = 1;
  EXPECT_LT((g - (p - onehot)).norm(), 1e-14);
  for (int i = 0; i < 5; ++i) {
    Eigen::VectorXd up = l, down = l;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    const double fd = (FlatLossFromLogits<double>(up, 2, nullptr) -
                       FlatLossFromLogits<double>(down, 2, nullptr)) / 2e-6;
    EXPECT_NEAR(g[i], fd, 1e-8);
  }
}

TEST(ClassRegistry, AddFindAndLimit) {
  ClassRegistry reg(2);
  EXPECT_EQ(reg.add("mug"), 0);
  EXPECT_EQ(reg.add("table"), 1);
  EXPECT_EQ(reg.add("mug"), 0);
  EXPECT_EQ(reg.find("table"), 1);
  EXPECT_FALSE(reg.find("chair").has_value());
  EXPECT_THROW(reg.add("chair"), Error);
  EXPECT_EQ(reg.colour(0), PaletteColour(0));
}

// Background/foreground tree with wall and floor under background.
LabelTree ExampleTree() {
  LabelTree t(3);
  t.add_node({0}, "background");
  t.add_node({1}, "foreground");
  t.add_node({0, 0}, "floor");
  t.add_node({0, 1}, "wall");
  return t;
}

TEST(LabelTree, EncodeMasks) {
  auto t = ExampleTree();
  auto bg = t.encode({0});
  EXPECT_EQ(bg.label.bits, (BranchPath{0}));
  EXPECT_EQ(bg.mask, (std::vector<uint8_t>{1, 0, 0}));
  auto wall = t.encode({0, 1});
  EXPECT_EQ(wall.bits, (std::vector<uint8_t>{0, 1, 0}));
  EXPECT_EQ(wall.mask, (std::vector<uint8_t>{1, 1, 0}));
  EXPECT_THROW(t.encode({1, 1}), Error);
  t.add_node({0, 1, 1}, "poster");
  auto deep = t.encode({0, 1, 1});
  EXPECT_EQ(deep.mask, (std::vector<uint8_t>{1, 1, 1}));
}

TEST(LabelTree, DecodeExample) {
  auto t = ExampleTree();
  const double s[3] = {0.1, 0.9, 0.3};
  EXPECT_EQ(t.find(t.decode(s))->name, "wall");
  LabelTree only(4);
  only.add_node({0}, "left");
  const double low[4] = {0.2, 0.2, 0.2, 0.2};
  EXPECT_EQ(only.decode(low), (BranchPath{0}));
  const double high[4] = {0.8, 0.2, 0.2, 0.2};
  EXPECT_TRUE(only.decode(high).empty());
  EXPECT_EQ(t.decode(s, 1), (BranchPath{0}));
}

TEST(LabelTree, RejectsOrphansAndDepth) {
  LabelTree t(2);
  EXPECT_THROW(t.add_node({0, 1}, "orphan"), Error);
  t.add_node({1}, "a");
  t.add_node({1, 0}, "b");
  EXPECT_THROW(t.add_node({1, 0, 1}, "too deep"), Error);
}

// Visits every prefix-closed tree of the given depth: nodes are listed in
// pre-order and each node is either kept or dropped once its parent is kept.
// The tree is edited in place as the recursion descends and unwinds.
void EnumerateTrees(
    int depth,
    const std::function<void(const LabelTree&, const std::vector<BranchPath>&)>& visit) {
  std::vector<BranchPath> all;
  std::function<void(BranchPath)> collect = [&](BranchPath p) {
    if (static_cast<int>(p.size()) == depth) return;
    for (uint8_t b = 0; b < 2; ++b) {
      BranchPath c = p;
      c.push_back(b);
      all.push_back(c);
      collect(c);
    }
  };
  collect({});
  std::vector<int> parent_of(all.size(), -1);
  for (size_t i = 0; i < all.size(); ++i) {
    for (size_t k = 0; k < i; ++k) {
      if (all[k].size() + 1 == all[i].size() &&
          std::equal(all[k].begin(), all[k].end(), all[i].begin())) {
        parent_of[i] = static_cast<int>(k);
      }
    }
  }
  std::vector<char> keep(all.size(), 0);
  std::vector<BranchPath> kept;
  LabelTree tree(depth);
  std::function<void(size_t)> recurse = [&](size_t i) {
    if (i == all.size()) {
      visit(tree, kept);
      return;
    }
    recurse(i + 1);
    if (parent_of[i] < 0 || keep[parent_of[i]]) {
      keep[i] = 1;
      tree.add_node(all[i], "n", Rgb8{});
      kept.push_back(all[i]);
      recurse(i + 1);
      kept.pop_back();
      tree.remove_node(all[i]);
      keep[i] = 0;
    }
  };
  recurse(0);
}

TEST(LabelTree, RoundTripExhaustive) {
  size_t visited = 0;
  for (int depth = 1; depth <= 4; ++depth) {
    EnumerateTrees(depth, [&](const LabelTree& tree, const std::vector<BranchPath>& kept) {
      ++visited;
      ASSERT_EQ(tree.size(), kept.size());
      for (const auto& path : kept) {
        const std::vector<double> sigma(path.begin(), path.end());
        ASSERT_EQ(tree.decode(sigma), path);
      }
      // Encoding depends only on the node, so ancestor prefixes are checked
      // once on the complete tree.
      if (kept.size() + 2 != (2u << depth)) return;
      for (const auto& path : kept) {
        auto enc = tree.encode(path);
        EXPECT_EQ(std::count(enc.mask.begin(), enc.mask.end(), 1),
                  static_cast<long>(path.size()));
        BranchPath parent(path.begin(), path.end() - 1);
        if (parent.empty()) continue;
        auto penc = tree.encode(parent);
        for (size_t i = 0; i < parent.size(); ++i) EXPECT_EQ(enc.bits[i], penc.bits[i]);
      }
    });
  }
  // (1 + f(d-1))^2 trees per depth: 4 + 25 + 676 + 458329.
  EXPECT_EQ(visited, 459034u);
}

TEST(HierLoss, Values) {
  const double exact[3] = {0, 1, 1};
  EXPECT_DOUBLE_EQ(HierLoss(exact, {{0, 1, 1}}), 0.0);
  const double half[3] = {0.5, 0.5, 0.5};
  EXPECT_NEAR(HierLoss(half, {{1, 0}}), 2 * std::log(2.0), 1e-12);
  const double sigma[4] = {0.2, 0.7, 0.45, 0.9};
  const BranchPath bits{0, 1, 1};
  double oracle = 0;
  for (int j = 0; j < 3; ++j) {
    oracle += -(bits[j] * std::log(sigma[j]) + (1 - bits[j]) * std::log(1 - sigma[j]));
  }
  EXPECT_NEAR(HierLoss(sigma, {bits}), oracle, 1e-12);
}

TEST(HierLoss, InactiveLevelsContributeNothing) {
  Eigen::VectorXd l(4);
  l << 0.4, -2, 5, -7;
  Eigen::VectorXd g;
  const double a = HierLossFromLogits<double>(l, {{1, 0}}, &g);
  Eigen::VectorXd l2 = l;
  l2[2] = -30;
  l2[3] = 30;
  EXPECT_DOUBLE_EQ(HierLossFromLogits<double>(l2, {{1, 0}}, nullptr), a);
  EXPECT_EQ(g[2], 0.0);
  EXPECT_EQ(g[3], 0.0);
  for (int i = 0; i < 2; ++i) {
    Eigen::VectorXd up = l, down = l;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    const double fd = (HierLossFromLogits<double>(up, {{1, 0}}, nullptr) -
                       HierLossFromLogits<double>(down, {{1, 0}}, nullptr)) / 2e-6;
    EXPECT_NEAR(g[i], fd, 1e-8);
  }
}

TEST(HierLoss, MonotoneInDistance) {
  const BranchPath bits{1, 0, 1};
  for (int level = 0; level < 3; ++level) {
    double prev = -1;
    for (double dist = 0.0; dist < 1.0; dist += 0.05) {
      double sigma[3] = {0.8, 0.3, 0.6};
      sigma[level] = bits[level] ? 1.0 - dist : dist;
      const double loss = HierLoss(sigma, {bits});
      EXPECT_GE(loss, prev);
      prev = loss;
    }
  }
}

TEST(Schema, JsonRoundTrip) {
  LabelSchema s;
  s.mode = SemanticMode::kHierarchical;
  s.tree = ExampleTree();
  s.classes.add("mug");
  auto j = SchemaToJson(s);
  auto back = SchemaFromJson(j);
  EXPECT_EQ(back.mode, s.mode);
  EXPECT_TRUE(back.tree == s.tree);
  EXPECT_TRUE(back.classes == s.classes);
  EXPECT_EQ(SchemaToJson(back).dump(), j.dump());
}

TEST(Colours, ChildBlendsParent) {
  auto root0 = DefaultNodeColour({0});
  EXPECT_EQ(root0, PaletteColour(0));
  auto child = DefaultNodeColour({0, 1});
  auto mix = PaletteColour(2 * 1 + 1);
  EXPECT_EQ(child.r, static_cast<uint8_t>((root0.r + mix.r) / 2));
}

}  // namespace
}  // namespace scenelabel
