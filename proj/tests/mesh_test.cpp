#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "scenelabel/mesh.hpp"

namespace scenelabel {
namespace {

DensityGrid AnalyticGrid(int n, double half, const std::function<float(const Vec3&)>& occ) {
  DensityGrid g;
  g.box.min = Vec3::Constant(-half);
  g.box.max = Vec3::Constant(half);
  g.resolution = {n, n, n};
  g.spacing = 2 * half / (n - 1);
  g.occupancy.resize(static_cast<size_t>(n) * n * n);
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) g.occupancy[g.index(i, j, k)] = occ(g.corner(i, j, k));
    }
  }
  return g;
}

// Smooth ball of radius r: occupancy crosses 0.5 exactly on the sphere.
std::function<float(const Vec3&)> Ball(double r) {
  return [r](const Vec3& p) { return static_cast<float>(1 / (1 + std::exp((p.norm() - r) / 0.05))); };
}

int EulerCharacteristic(const TriangleMesh& m) {
  std::set<std::pair<int, int>> edges;
  for (const auto& t : m.triangles) {
    for (int e = 0; e < 3; ++e) {
      const int a = t[e], b = t[(e + 1) % 3];
      edges.insert({std::min(a, b), std::max(a, b)});
    }
  }
  return static_cast<int>(m.vertices.size()) - static_cast<int>(edges.size()) +
         static_cast<int>(m.triangles.size());
}

// Every edge of a closed, consistently wound surface is used once in each
// direction.
bool ClosedAndOriented(const TriangleMesh& m) {
  std::map<std::pair<int, int>, int> directed;
  for (const auto& t : m.triangles) {
    for (int e = 0; e < 3; ++e) ++directed[{t[e], t[(e + 1) % 3]}];
  }
  for (const auto& [edge, count] : directed) {
    if (count != 1) return false;
    const auto it = directed.find({edge.second, edge.first});
    if (it == directed.end() || it->second != 1) return false;
  }
  return true;
}

Vec3 Normal(const TriangleMesh& m, const std::array<int, 3>& t) {
  return (m.vertices[t[1]] - m.vertices[t[0]]).cross(m.vertices[t[2]] - m.vertices[t[0]]);
}

TEST(MarchingCubes, SingleOccupiedCornerIsASphereTopologically) {
  DensityGrid g = AnalyticGrid(3, 1.0, [](const Vec3&) { return 0.0f; });
  g.occupancy[g.index(1, 1, 1)] = 1.0f;
  const TriangleMesh m = MarchingCubes(g);
  EXPECT_EQ(m.vertices.size(), 6u);
  EXPECT_EQ(m.triangles.size(), 8u);
  EXPECT_EQ(EulerCharacteristic(m), 2);
  EXPECT_TRUE(ClosedAndOriented(m));
  for (const auto& t : m.triangles) {
    const Vec3 c = (m.vertices[t[0]] + m.vertices[t[1]] + m.vertices[t[2]]) / 3;
    EXPECT_GT(Normal(m, t).dot(c), 0);  // faces away from the occupied corner
  }
}

TEST(MarchingCubes, EveryCubeCaseStaysClosed) {
  // All 256 corner patterns inside a padded 4x4x4 grid give closed, oriented
  // surfaces with even Euler characteristic.
  for (int mask = 0; mask < 256; ++mask) {
    DensityGrid g = AnalyticGrid(4, 1.5, [](const Vec3&) { return 0.0f; });
    for (int c = 0; c < 8; ++c) {
      if (mask & (1 << c)) g.occupancy[g.index(1 + (c & 1), 1 + ((c >> 1) & 1), 1 + (c >> 2))] = 0.9f;
    }
    const TriangleMesh m = MarchingCubes(g);
    EXPECT_EQ(m.empty(), mask == 0) << mask;
    EXPECT_TRUE(ClosedAndOriented(m)) << mask;
    EXPECT_EQ(EulerCharacteristic(m) % 2, 0) << mask;
  }
}

double MeanRadialError(int n) {
  const double r = 0.6;
  const TriangleMesh m = MarchingCubes(AnalyticGrid(n, 1.0, Ball(r)));
  double sum = 0;
  for (const Vec3& v : m.vertices) sum += std::abs(v.norm() - r);
  return sum / m.vertices.size();
}

TEST(MarchingCubes, SphereVerticesLieOnTheSurface) {
  const int n = 32;
  const double r = 0.6;
  const DensityGrid g = AnalyticGrid(n, 1.0, Ball(r));
  const TriangleMesh m = MarchingCubes(g);
  ASSERT_FALSE(m.empty());
  EXPECT_EQ(EulerCharacteristic(m), 2);
  EXPECT_TRUE(ClosedAndOriented(m));
  const double diagonal = std::sqrt(3.0) * g.spacing;
  for (const Vec3& v : m.vertices) {
    EXPECT_LT(std::abs(v.norm() - r), 1.5 * diagonal);
    for (int a = 0; a < 3; ++a) {
      EXPECT_GE(v[a], g.box.min[a]);
      EXPECT_LE(v[a], g.box.max[a]);
    }
  }
  for (const auto& t : m.triangles) {
    const Vec3 c = (m.vertices[t[0]] + m.vertices[t[1]] + m.vertices[t[2]]) / 3;
    // Winding agrees with the occupancy gradient, which points inwards.
    EXPECT_GT(Normal(m, t).dot(c), 0);
  }
}

TEST(MarchingCubes, FinerGridsAreMoreAccurate) {
  EXPECT_GT(MeanRadialError(32), MeanRadialError(64));
}

TEST(MarchingCubes, EmptyAndFullGridsHaveNoSurface) {
  EXPECT_TRUE(MarchingCubes(AnalyticGrid(5, 1, [](const Vec3&) { return 0.1f; })).empty());
  EXPECT_TRUE(MarchingCubes(AnalyticGrid(5, 1, [](const Vec3&) { return 0.9f; })).empty());
  EXPECT_THROW(MarchingCubes(AnalyticGrid(5, 1, Ball(0.5)), 1.5), Error);
}

FieldParams SmallField() {
  EncodingConfig enc;
  enc.num_frequency_bands = 3;
  enc.scene_bound.min = Vec3::Constant(-1);
  enc.scene_bound.max = Vec3::Constant(1);
  return InitParams(4, 3, enc, 16);
}

TEST(QueryGrid, OccupancyFromDensity) {
  const FieldParams params = SmallField();
  Aabb box;
  box.min = Vec3(-0.5, -0.5, -0.25);
  box.max = Vec3(0.5, 0.5, 0.25);
  const DensityGrid g = QueryGrid(params, box, {5, 5, 3});
  EXPECT_EQ(g.occupancy.size(), 75u);
  EXPECT_NEAR(g.spacing, 0.25, 1e-12);
  Eigen::Matrix3Xd p(3, 1);
  p.col(0) = g.corner(3, 1, 2);
  EXPECT_NEAR((p.col(0) - Vec3(0.25, -0.25, 0.25)).norm(), 0, 1e-12);
  const double rho = QueryDensity(params, p)[0];
  EXPECT_NEAR(g.at(3, 1, 2), 1 - std::exp(-rho * g.spacing), 1e-6);
  box.max.x() = 1.5;
  EXPECT_THROW(QueryGrid(params, box, {5, 5, 3}), Error);
  box.max.x() = 0.5;
  EXPECT_THROW(QueryGrid(params, box, {1, 5, 3}), Error);
}

TEST(LabelVertices, MatchesPointQueries) {
  const FieldParams params = SmallField();
  const FieldParamsD exact = params.cast<double>();
  const TriangleMesh m = MarchingCubes(AnalyticGrid(12, 0.9, Ball(0.5)));
  LabelSchema schema;
  schema.classes.add("a");
  schema.classes.add("b");
  schema.classes.add("c");
  const LabelledMesh lm = LabelVertices(m, params, schema, 3);
  ASSERT_EQ(lm.labels.size(), m.vertices.size());
  for (size_t i = 0; i < m.vertices.size(); ++i) {
    Eigen::Matrix3Xd p(3, 1);
    p.col(0) = m.vertices[i];
    MatrixX<double> f;
    EncodePositions<double>(params.encoding(), p, &f);
    const auto out = FieldForwardPoint<double>(exact, f.col(0));
    Eigen::Index best = 0;
    out.semantic_logits.head(3).maxCoeff(&best);
    EXPECT_EQ(lm.labels[i], best);
    EXPECT_EQ(lm.colours[i], schema.classes.colour(static_cast<int>(best)));
  }
  // Without classes every vertex is unlabelled grey.
  const LabelSchema empty;
  const LabelledMesh none = LabelVertices(m, params, empty, 0);
  for (size_t i = 0; i < none.labels.size(); ++i) {
    EXPECT_EQ(none.labels[i], -1);
    EXPECT_EQ(none.colours[i], (Rgb8{128, 128, 128}));
  }
}

TEST(Ply, HeaderCountsAndFilter) {
  LabelledMesh lm;
  lm.mesh.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
  lm.mesh.triangles = {{0, 1, 2}, {0, 2, 3}, {1, 3, 2}};
  lm.colours = {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {9, 9, 9}};
  lm.labels = {0, 0, 0, 1};
  std::ostringstream all, only0;
  WritePly(all, lm);
  WritePly(only0, lm, std::set<int>{0});
  EXPECT_NE(all.str().find("element vertex 4\n"), std::string::npos);
  EXPECT_NE(all.str().find("element face 3\n"), std::string::npos);
  EXPECT_NE(all.str().find("property int label\n"), std::string::npos);
  EXPECT_NE(all.str().find("0.000000 0.000000 1.000000 9 9 9 1\n"), std::string::npos);
  EXPECT_NE(only0.str().find("element vertex 3\n"), std::string::npos);
  EXPECT_NE(only0.str().find("element face 1\n"), std::string::npos);
  EXPECT_NE(only0.str().find("3 0 1 2\n"), std::string::npos);
  EXPECT_EQ(only0.str().find("9 9 9"), std::string::npos);
  lm.labels.pop_back();
  std::ostringstream bad;
  EXPECT_THROW(WritePly(bad, lm), Error);
}

}  // namespace
}  // namespace scenelabel
