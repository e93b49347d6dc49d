#include "scenelabel/active_query.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace scenelabel {

std::string_view MeasureName(UncertaintyMeasure measure) {
  switch (measure) {
    case UncertaintyMeasure::kEntropy: return "entropy";
    case UncertaintyMeasure::kLeastConfidence: return "least_confidence";
    case UncertaintyMeasure::kMargin: return "margin";
  }
  return "entropy";
}

UncertaintyMeasure ParseMeasure(std::string_view name) {
  if (name == "entropy") return UncertaintyMeasure::kEntropy;
  if (name == "least_confidence" || name == "least_conf") {
    return UncertaintyMeasure::kLeastConfidence;
  }
  if (name == "margin") return UncertaintyMeasure::kMargin;
  throw Error(ErrorCode::kParse, "unknown uncertainty measure '" + std::string(name) + "'");
}

double PixelUncertainty(const Eigen::Ref<const Eigen::VectorXd>& probs,
                        UncertaintyMeasure measure) {
  if (probs.size() == 0) return 0.0;
  switch (measure) {
    case UncertaintyMeasure::kEntropy: {
      double h = 0;
      for (Eigen::Index i = 0; i < probs.size(); ++i) {
        if (probs[i] > 0) h -= probs[i] * std::log(probs[i]);
      }
      return std::max(0.0, h);
    }
    case UncertaintyMeasure::kLeastConfidence:
      return 1.0 - probs.maxCoeff();
    case UncertaintyMeasure::kMargin: {
      if (probs.size() < 2) return 0.0;
      double first = -1, second = -1;
      for (Eigen::Index i = 0; i < probs.size(); ++i) {
        if (probs[i] > first) {
          second = first;
          first = probs[i];
        } else if (probs[i] > second) {
          second = probs[i];
        }
      }
      return 1.0 - (first - second);
    }
  }
  return 0.0;
}

double HierarchicalUncertainty(const Eigen::Ref<const Eigen::VectorXd>& logits) {
  if (logits.size() == 0) return 0.0;
  double sum = 0;
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    sum += BinaryEntropy(1.0 / (1.0 + std::exp(-logits[j])));
  }
  return sum / static_cast<double>(logits.size());
}

UncertaintyMap MapFromRender(const RenderedFrame& render, int keyframe,
                             SemanticMode mode, int active_classes,
                             UncertaintyMeasure measure, uint64_t snapshot) {
  UncertaintyMap map;
  map.keyframe = keyframe;
  map.width = render.width;
  map.height = render.height;
  map.stride = render.stride;
  map.measure = measure;
  map.snapshot = snapshot;
  const Eigen::Index n = static_cast<Eigen::Index>(render.width) * render.height;
  map.values.assign(static_cast<size_t>(n), 0.0f);
  const int classes =
      std::clamp<int>(active_classes, 0, static_cast<int>(render.logits.rows()));
  for (Eigen::Index p = 0; p < n; ++p) {
    double value = 0;
    if (mode == SemanticMode::kHierarchical) {
      value = HierarchicalUncertainty(render.logits.col(p).cast<double>());
    } else if (classes >= 1) {
      const Eigen::VectorXd logits = render.logits.col(p).head(classes).cast<double>();
      value = PixelUncertainty(FlatProbs<double>(logits), measure);
    }
    map.values[static_cast<size_t>(p)] = static_cast<float>(value);
    map.frame_total += value;
  }
  return map;
}

std::vector<UncertaintyMap> RefreshMaps(const FieldParams& params,
                                        std::span<const Keyframe> keyframes,
                                        SemanticMode mode, int active_classes,
                                        const QueryConfig& cfg,
                                        const SamplingConfig& sampling,
                                        uint64_t snapshot) {
  std::vector<UncertaintyMap> maps;
  maps.reserve(keyframes.size());
  for (const Keyframe& kf : keyframes) {
    const RenderedFrame r =
        RenderFrame(params, kf.frame.intrinsics, kf.frame.world_from_camera,
                    cfg.samples_per_ray, sampling, cfg.stride, &kf.frame.depth);
    maps.push_back(MapFromRender(r, kf.id, mode, active_classes, cfg.measure, snapshot));
  }
  return maps;
}

namespace {

struct Candidate {
  float value;
  uint64_t tie;
  int index;
};

// Top-K pool of one map after exclusion; empty when nothing is eligible.
std::vector<int> TopPool(const UncertaintyMap& map, double k_fraction,
                         std::span<const Annotation> annotations, double radius,
                         std::mt19937_64* rng) {
  std::vector<std::pair<int, int>> clicks;
  for (const Annotation& a : annotations) {
    if (a.keyframe == map.keyframe) clicks.emplace_back(a.u, a.v);
  }
  const double r2 = radius * radius;
  std::vector<Candidate> cands;
  cands.reserve(map.values.size());
  for (int gy = 0; gy < map.height; ++gy) {
    for (int gx = 0; gx < map.width; ++gx) {
      const int u = gx * map.stride, v = gy * map.stride;
      bool excluded = false;
      for (const auto& [cu, cv] : clicks) {
        const double du = u - cu, dv = v - cv;
        if (du * du + dv * dv <= r2) {
          excluded = true;
          break;
        }
      }
      if (excluded) continue;
      cands.push_back({map.at(gx, gy), (*rng)(), gy * map.width + gx});
    }
  }
  if (cands.empty()) return {};
  const size_t total = map.values.size();
  const size_t k = std::clamp<size_t>(
      static_cast<size_t>(std::ceil(k_fraction * static_cast<double>(total))), 1,
      cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k),
                    cands.end(), [](const Candidate& a, const Candidate& b) {
                      if (a.value != b.value) return a.value > b.value;
                      return a.tie < b.tie;
                    });
  std::vector<int> pool(k);
  for (size_t i = 0; i < k; ++i) pool[i] = cands[i].index;
  return pool;
}

}  // namespace

QueryProposal SelectQuery(std::span<const UncertaintyMap> maps, double k_fraction,
                          std::span<const Annotation> annotations,
                          double exclusion_radius, std::mt19937_64* rng) {
  if (!(k_fraction > 0 && k_fraction <= 1)) {
    throw Error(ErrorCode::kInvalidArgument, "k_fraction must be in (0, 1]");
  }
  std::vector<double> weights(maps.size(), 0.0);
  bool any_total = false;
  for (size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].empty()) continue;
    weights[i] = std::max(0.0, maps[i].frame_total);
    any_total |= weights[i] > 0;
  }
  if (!any_total) {
    for (size_t i = 0; i < maps.size(); ++i) weights[i] = maps[i].empty() ? 0.0 : 1.0;
  }
  while (std::any_of(weights.begin(), weights.end(), [](double w) { return w > 0; })) {
    std::discrete_distribution<int> pick(weights.begin(), weights.end());
    const int f = pick(*rng);
    const UncertaintyMap& map = maps[f];
    const auto pool = TopPool(map, k_fraction, annotations, exclusion_radius, rng);
    if (pool.empty()) {
      weights[f] = 0;
      continue;
    }
    std::uniform_int_distribution<size_t> choose(0, pool.size() - 1);
    const int idx = pool[choose(*rng)];
    QueryProposal q;
    q.keyframe = map.keyframe;
    q.u = (idx % map.width) * map.stride;
    q.v = (idx / map.width) * map.stride;
    q.value = map.values[static_cast<size_t>(idx)];
    q.snapshot = map.snapshot;
    return q;
  }
  throw Error(ErrorCode::kNotFound, "no uncertainty map has an eligible pixel");
}

}  // namespace scenelabel
