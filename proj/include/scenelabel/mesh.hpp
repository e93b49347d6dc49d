#pragma once

// Occupancy grids queried from the field, marching cubes and per-vertex
// semantic labels, with ASCII PLY export.

#include <array>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "scenelabel/field.hpp"
#include "scenelabel/semantics.hpp"

namespace scenelabel {

/// Occupancy 1 - exp(-density * spacing) sampled at grid corners.
struct DensityGrid {
  Aabb box;
  std::array<int, 3> resolution{};  // corners per axis
  double spacing = 0;               // mean corner spacing (metres)
  std::vector<float> occupancy;     // x fastest, then y, then z

  size_t index(int i, int j, int k) const {
    return (static_cast<size_t>(k) * resolution[1] + j) * resolution[0] + i;
  }
  float at(int i, int j, int k) const { return occupancy[index(i, j, k)]; }
  Vec3 corner(int i, int j, int k) const;
};

/// Evaluates the field at every corner of a `resolution` grid spanning
/// `box`, which must lie inside the field's scene bound.
DensityGrid QueryGrid(const FieldParams& params, const Aabb& box,
                      std::array<int, 3> resolution);

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;

  bool empty() const { return triangles.empty(); }
};

/// Isosurface at occupancy `iso` in (0, 1), corners above iso counting as
/// inside. Vertices are shared between neighbouring cells and triangles wind
/// counter-clockwise seen from the low-occupancy side.
TriangleMesh MarchingCubes(const DensityGrid& grid, double iso = 0.5);

struct LabelledMesh {
  TriangleMesh mesh;
  std::vector<Rgb8> colours;
  /// Flat: class id (-1 before any class exists). Hierarchical: index of the
  /// decoded node in LabelTree::nodes() (-1 for the root).
  std::vector<int> labels;
};

/// Point-queries the field at every vertex and decodes its semantics. In
/// hierarchical mode `level` truncates the decoded path (-1 = full depth).
LabelledMesh LabelVertices(const TriangleMesh& mesh, const FieldParams& params,
                           const LabelSchema& schema, int active_classes, int level = -1);

/// Whole-scene export: occupancy grid over `bound` with `resolution`
/// corners along its longest axis (equal spacing on the others), isosurface,
/// then per-vertex labels.
LabelledMesh ExtractLabelledMesh(const FieldParams& params, const LabelSchema& schema,
                                 int active_classes, const Aabb& bound, int resolution,
                                 double iso = 0.5, int level = -1);

/// ASCII PLY with x y z, red green blue and an integer `label` per vertex.
/// With a filter, only vertices carrying one of the labels (and triangles
/// made of them) are written.
void WritePly(std::ostream& out, const LabelledMesh& mesh,
              const std::optional<std::set<int>>& label_filter = std::nullopt);
void SavePly(const std::string& path, const LabelledMesh& mesh,
             const std::optional<std::set<int>>& label_filter = std::nullopt);

}  // namespace scenelabel
