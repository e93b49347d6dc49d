#pragma once

// Hands-free labelling: per-pixel semantic uncertainty, frame-level totals
// and proposals of the next pixel to ask the user about.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "scenelabel/frame.hpp"
#include "scenelabel/render.hpp"
#include "scenelabel/semantics.hpp"

namespace scenelabel {

enum class UncertaintyMeasure { kEntropy, kLeastConfidence, kMargin };

std::string_view MeasureName(UncertaintyMeasure measure);
UncertaintyMeasure ParseMeasure(std::string_view name);

/// Uncertainty of a probability vector: entropy (nats), 1 - max p, or
/// 1 - (p_(1) - p_(2)).
double PixelUncertainty(const Eigen::Ref<const Eigen::VectorXd>& probs,
                        UncertaintyMeasure measure);

/// Mean binary entropy of sigmoid(logits) over all levels.
double HierarchicalUncertainty(const Eigen::Ref<const Eigen::VectorXd>& logits);

struct UncertaintyMap {
  int keyframe = 0;
  int width = 0;   // grid width: ceil(image width / stride)
  int height = 0;
  int stride = 1;
  UncertaintyMeasure measure = UncertaintyMeasure::kEntropy;
  std::vector<float> values;  // row-major grid
  double frame_total = 0;
  uint64_t snapshot = 0;

  float at(int gx, int gy) const { return values[static_cast<size_t>(gy) * width + gx]; }
  bool empty() const { return values.empty(); }
};

struct QueryProposal {
  int keyframe = 0;
  int u = 0;
  int v = 0;
  double value = 0;
  uint64_t snapshot = 0;
};

struct QueryConfig {
  UncertaintyMeasure measure = UncertaintyMeasure::kEntropy;
  double k_fraction = 0.05;
  /// Pixels within this radius of an existing annotation are never proposed.
  double exclusion_radius = 5.0;
  int stride = 4;
  int samples_per_ray = 16;
  /// Optimiser steps between map refreshes.
  int refresh_every = 20;
};

/// Evaluates the measure on each pixel of a strided semantic render. In flat
/// mode the softmax runs over the first `active_classes` logits.
UncertaintyMap MapFromRender(const RenderedFrame& render, int keyframe,
                             SemanticMode mode, int active_classes,
                             UncertaintyMeasure measure, uint64_t snapshot = 0);

/// Renders every keyframe (depth-guided, deterministic) and builds its map.
std::vector<UncertaintyMap> RefreshMaps(const FieldParams& params,
                                        std::span<const Keyframe> keyframes,
                                        SemanticMode mode, int active_classes,
                                        const QueryConfig& cfg,
                                        const SamplingConfig& sampling,
                                        uint64_t snapshot = 0);

/// Draws a keyframe with probability proportional to its frame total (uniform
/// when all totals vanish), then a pixel uniformly from its top-K pool with
/// K = ceil(k_fraction * grid pixels). Pixels near `annotations` are removed
/// from the pool; ties in the ranking are broken at random. Throws kNotFound
/// when no frame has an eligible pixel.
QueryProposal SelectQuery(std::span<const UncertaintyMap> maps, double k_fraction,
                          std::span<const Annotation> annotations,
                          double exclusion_radius, std::mt19937_64* rng);

}  // namespace scenelabel
