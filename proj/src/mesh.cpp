#include "scenelabel/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>

namespace scenelabel {

Vec3 DensityGrid::corner(int i, int j, int k) const {
  const Vec3 ext = box.extent();
  return box.min + Vec3(ext.x() * i / (resolution[0] - 1), ext.y() * j / (resolution[1] - 1),
                        ext.z() * k / (resolution[2] - 1));
}

DensityGrid QueryGrid(const FieldParams& params, const Aabb& box,
                      std::array<int, 3> resolution) {
  for (int r : resolution) {
    if (r < 2) throw Error(ErrorCode::kInvalidArgument, "grid resolution must be >= 2");
  }
  const Aabb& bound = params.encoding().scene_bound;
  const double pad = 1e-9 * bound.extent().maxCoeff();
  if (!bound.contains(box.min, pad) || !bound.contains(box.max, pad) ||
      !((box.max.array() > box.min.array()).all())) {
    throw Error(ErrorCode::kInvalidArgument, "grid box must be a nonempty box inside the scene bound");
  }
  DensityGrid grid;
  grid.box = box;
  grid.resolution = resolution;
  const Vec3 ext = box.extent();
  grid.spacing = (ext.x() / (resolution[0] - 1) + ext.y() / (resolution[1] - 1) +
                  ext.z() / (resolution[2] - 1)) / 3.0;
  grid.occupancy.resize(static_cast<size_t>(resolution[0]) * resolution[1] * resolution[2]);
  const int slab = resolution[0] * resolution[1];
  Eigen::Matrix3Xd points(3, slab);
  for (int k = 0; k < resolution[2]; ++k) {
    for (int j = 0; j < resolution[1]; ++j) {
      for (int i = 0; i < resolution[0]; ++i) points.col(j * resolution[0] + i) = grid.corner(i, j, k);
    }
    const VectorX<float> density = QueryDensity(params, points);
    for (int p = 0; p < slab; ++p) {
      grid.occupancy[static_cast<size_t>(k) * slab + p] =
          static_cast<float>(1.0 - std::exp(-static_cast<double>(density[p]) * grid.spacing));
    }
  }
  return grid;
}

namespace {

// Corner c of a cell sits at offset (c & 1, (c >> 1) & 1, (c >> 2) & 1).
Eigen::Vector3i CornerOffset(int c) { return {c & 1, (c >> 1) & 1, (c >> 2) & 1}; }

struct CellEdge {
  int a, b;  // corners, b = a | (1 << axis)
  int axis;
};

struct CaseTables {
  std::array<CellEdge, 12> edges;
  std::array<std::vector<std::array<int, 3>>, 256> triangles;  // cell edge ids
};

int EdgeId(const std::array<CellEdge, 12>& edges, int a, int b) {
  for (int e = 0; e < 12; ++e) {
    if ((edges[e].a == a && edges[e].b == b) || (edges[e].a == b && edges[e].b == a)) return e;
  }
  return -1;
}

// Builds the 256 triangulations from face contours. On each face, the inside
// corners are walked counter-clockwise (seen from outside the cell) and every
// run of inside corners is cut by a segment from the edge where the walk
// leaves it to the edge where it entered. Faces with two diagonal inside
// corners therefore keep them apart, a rule that depends on the face alone
// and so agrees between neighbouring cells. Segments chain into closed
// loops which are fanned into triangles.
CaseTables BuildTables() {
  CaseTables t;
  int n = 0;
  for (int axis = 0; axis < 3; ++axis) {
    for (int c = 0; c < 8; ++c) {
      if (!(c & (1 << axis))) t.edges[n++] = {c, c | (1 << axis), axis};
    }
  }
  std::vector<std::array<int, 4>> faces;
  for (int axis = 0; axis < 3; ++axis) {
    for (int side = 0; side < 2; ++side) {
      std::vector<int> corners;
      for (int c = 0; c < 8; ++c) {
        if (((c >> axis) & 1) == side) corners.push_back(c);
      }
      const int u = (axis + 1) % 3, v = (axis + 2) % 3;
      const auto angle = [&](int c) {
        const auto o = CornerOffset(c);
        return std::atan2(o[v] - 0.5, o[u] - 0.5);
      };
      std::sort(corners.begin(), corners.end(), [&](int a, int b) {
        return side == 1 ? angle(a) < angle(b) : angle(a) > angle(b);
      });
      faces.push_back({corners[0], corners[1], corners[2], corners[3]});
    }
  }
  for (int config = 0; config < 256; ++config) {
    const auto inside = [&](int c) { return ((config >> c) & 1) != 0; };
    std::map<int, int> next;  // exit edge -> entry edge
    for (const auto& f : faces) {
      for (int k = 0; k < 4; ++k) {
        const int cur = f[k], nxt = f[(k + 1) % 4];
        if (!inside(cur) || inside(nxt)) continue;
        // Walk back from `cur` to the start of its inside run.
        int start = k;
        while (inside(f[(start + 3) % 4]) && (start + 3) % 4 != k) start = (start + 3) % 4;
        const int before = f[(start + 3) % 4];
        next[EdgeId(t.edges, cur, nxt)] = EdgeId(t.edges, before, f[start]);
      }
    }
    while (!next.empty()) {
      std::vector<int> loop;
      int e = next.begin()->first;
      while (next.count(e)) {
        loop.push_back(e);
        const int to = next[e];
        next.erase(e);
        e = to;
      }
      for (size_t i = 1; i + 1 < loop.size(); ++i) {
        t.triangles[config].push_back({loop[0], loop[i], loop[i + 1]});
      }
    }
  }
  // Orient so that a lone inside corner gets a normal pointing away from it.
  const auto mid = [&](int e) -> Vec3 {
    return 0.5 * (CornerOffset(t.edges[e].a) + CornerOffset(t.edges[e].b)).cast<double>();
  };
  const auto& tri = t.triangles[1].at(0);
  const Vec3 normal = (mid(tri[1]) - mid(tri[0])).cross(mid(tri[2]) - mid(tri[0]));
  if (normal.dot(Vec3(1, 1, 1)) < 0) {
    for (auto& list : t.triangles) {
      for (auto& tr : list) std::swap(tr[1], tr[2]);
    }
  }
  return t;
}

const CaseTables& Tables() {
  static const CaseTables tables = BuildTables();
  return tables;
}

}  // namespace

TriangleMesh MarchingCubes(const DensityGrid& grid, double iso) {
  if (!(iso > 0 && iso < 1)) throw Error(ErrorCode::kInvalidArgument, "iso must be in (0, 1)");
  const auto& [rx, ry, rz] = grid.resolution;
  if (grid.occupancy.size() != static_cast<size_t>(rx) * ry * rz) {
    throw Error(ErrorCode::kShapeMismatch, "grid occupancy size does not match resolution");
  }
  const CaseTables& t = Tables();
  TriangleMesh mesh;
  std::unordered_map<uint64_t, int> vertex_of_edge;
  const auto vertex = [&](int i, int j, int k, int e) {
    const CellEdge& edge = t.edges[e];
    const Eigen::Vector3i a = Eigen::Vector3i(i, j, k) + CornerOffset(edge.a);
    const Eigen::Vector3i b = Eigen::Vector3i(i, j, k) + CornerOffset(edge.b);
    const uint64_t key = (static_cast<uint64_t>(grid.index(a[0], a[1], a[2])) << 2) |
                         static_cast<uint64_t>(edge.axis);
    if (auto it = vertex_of_edge.find(key); it != vertex_of_edge.end()) return it->second;
    const double oa = grid.at(a[0], a[1], a[2]), ob = grid.at(b[0], b[1], b[2]);
    const double s = std::clamp((iso - oa) / (ob - oa), 0.0, 1.0);
    const Vec3 pa = grid.corner(a[0], a[1], a[2]), pb = grid.corner(b[0], b[1], b[2]);
    const int id = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(pa + s * (pb - pa));
    vertex_of_edge.emplace(key, id);
    return id;
  };
  for (int k = 0; k + 1 < rz; ++k) {
    for (int j = 0; j + 1 < ry; ++j) {
      for (int i = 0; i + 1 < rx; ++i) {
        int config = 0;
        for (int c = 0; c < 8; ++c) {
          const auto o = CornerOffset(c);
          if (grid.at(i + o[0], j + o[1], k + o[2]) > iso) config |= 1 << c;
        }
        for (const auto& tri : t.triangles[config]) {
          mesh.triangles.push_back(
              {vertex(i, j, k, tri[0]), vertex(i, j, k, tri[1]), vertex(i, j, k, tri[2])});
        }
      }
    }
  }
  return mesh;
}

LabelledMesh LabelVertices(const TriangleMesh& mesh, const FieldParams& params,
                           const LabelSchema& schema, int active_classes, int level) {
  LabelledMesh out;
  out.mesh = mesh;
  const size_t n = mesh.vertices.size();
  out.colours.resize(n);
  out.labels.assign(n, -1);
  if (n == 0) return out;
  Eigen::Matrix3Xd points(3, static_cast<Eigen::Index>(n));
  for (size_t i = 0; i < n; ++i) points.col(static_cast<Eigen::Index>(i)) = mesh.vertices[i];
  MatrixX<float> features;
  EncodePositions<float>(params.encoding(), points, &features);
  FieldEval<float> eval;
  FieldForward(params, std::move(features), &eval);
  const std::vector<LabelNode> nodes = schema.tree.nodes();
  for (size_t i = 0; i < n; ++i) {
    const Eigen::VectorXd logits =
        eval.output.col(static_cast<Eigen::Index>(i)).tail(params.semantic_dim()).cast<double>();
    if (schema.mode == SemanticMode::kFlat) {
      const int classes = std::min<int>(active_classes, static_cast<int>(logits.size()));
      if (classes < 1) {
        out.colours[i] = {128, 128, 128};
        continue;
      }
      const Eigen::VectorXd probs = FlatProbs<double>(logits.head(classes));
      Eigen::Index best = 0;
      probs.maxCoeff(&best);
      out.labels[i] = static_cast<int>(best);
      out.colours[i] = schema.classes.colour(static_cast<int>(best));
    } else {
      std::vector<double> sigma(static_cast<size_t>(logits.size()));
      for (Eigen::Index j = 0; j < logits.size(); ++j) {
        sigma[static_cast<size_t>(j)] = 1.0 / (1.0 + std::exp(-logits[j]));
      }
      const BranchPath path = schema.tree.decode(sigma, level);
      out.colours[i] = schema.tree.colour(path);
      for (size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k].path == path) out.labels[i] = static_cast<int>(k);
      }
    }
  }
  return out;
}

LabelledMesh ExtractLabelledMesh(const FieldParams& params, const LabelSchema& schema,
                                 int active_classes, const Aabb& bound, int resolution,
                                 double iso, int level) {
  if (resolution < 2) throw Error(ErrorCode::kInvalidArgument, "mesh resolution must be >= 2");
  const Vec3 ext = bound.max - bound.min;
  const double spacing = ext.maxCoeff() / (resolution - 1);
  std::array<int, 3> res{};
  for (int a = 0; a < 3; ++a) {
    res[a] = std::max(2, static_cast<int>(std::lround(ext[a] / spacing)) + 1);
  }
  const DensityGrid grid = QueryGrid(params, bound, res);
  return LabelVertices(MarchingCubes(grid, iso), params, schema, active_classes, level);
}

void WritePly(std::ostream& out, const LabelledMesh& m,
              const std::optional<std::set<int>>& label_filter) {
  const size_t n = m.mesh.vertices.size();
  if (m.colours.size() != n || m.labels.size() != n) {
    throw Error(ErrorCode::kShapeMismatch, "labelled mesh attributes do not match vertices");
  }
  std::vector<int> remap(n, -1);
  int kept = 0;
  for (size_t i = 0; i < n; ++i) {
    if (!label_filter || label_filter->count(m.labels[i])) remap[i] = kept++;
  }
  std::vector<std::array<int, 3>> faces;
  for (const auto& t : m.mesh.triangles) {
    if (remap[t[0]] >= 0 && remap[t[1]] >= 0 && remap[t[2]] >= 0) {
      faces.push_back({remap[t[0]], remap[t[1]], remap[t[2]]});
    }
  }
  out << "ply\nformat ascii 1.0\n"
      << "element vertex " << kept << "\n"
      << "property float x\nproperty float y\nproperty float z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "property int label\n"
      << "element face " << faces.size() << "\n"
      << "property list uchar int vertex_indices\nend_header\n";
  char buf[160];
  for (size_t i = 0; i < n; ++i) {
    if (remap[i] < 0) continue;
    const Vec3& p = m.mesh.vertices[i];
    const Rgb8 c = m.colours[i];
    std::snprintf(buf, sizeof buf, "%.6f %.6f %.6f %d %d %d %d\n", p.x(), p.y(), p.z(), c.r, c.g,
                  c.b, m.labels[i]);
    out << buf;
  }
  for (const auto& f : faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  if (!out) throw Error(ErrorCode::kIo, "failed to write mesh");
}

void SavePly(const std::string& path, const LabelledMesh& mesh,
             const std::optional<std::set<int>>& label_filter) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path);
  WritePly(out, mesh, label_filter);
}

}  // namespace scenelabel
