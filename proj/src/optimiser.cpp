#include "scenelabel/optimiser.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

namespace scenelabel {

template <typename Scalar>
void AdamUpdate(AdamStateT<Scalar>* adam, VectorX<Scalar>* params,
                const VectorX<Scalar>& grads) {
  if (grads.size() != params->size()) {
    throw Error(ErrorCode::kShapeMismatch, "gradient/parameter size mismatch");
  }
  if (adam->first_moment.size() != params->size()) {
    adam->first_moment = VectorX<Scalar>::Zero(params->size());
    adam->second_moment = VectorX<Scalar>::Zero(params->size());
  }
  const AdamConfig& c = adam->config;
  ++adam->step;
  const auto b1 = static_cast<Scalar>(c.beta1);
  const auto b2 = static_cast<Scalar>(c.beta2);
  adam->first_moment = b1 * adam->first_moment + (Scalar(1) - b1) * grads;
  adam->second_moment =
      b2 * adam->second_moment + (Scalar(1) - b2) * grads.cwiseAbs2();
  const double t = static_cast<double>(adam->step);
  const auto corr1 = static_cast<Scalar>(1.0 - std::pow(c.beta1, t));
  const auto corr2 = static_cast<Scalar>(1.0 - std::pow(c.beta2, t));
  const auto lr = static_cast<Scalar>(c.learning_rate);
  const auto eps = static_cast<Scalar>(c.epsilon);
  params->array() -=
      lr * (adam->first_moment.array() / corr1) /
      ((adam->second_moment.array() / corr2).sqrt() + eps);
}

namespace {

template <typename Scalar>
Scalar Sign(Scalar x) {
  return x > 0 ? Scalar(1) : (x < 0 ? Scalar(-1) : Scalar(0));
}

}  // namespace

template <typename Scalar>
PixelLossTermsT<LossScalar<Scalar>> PixelLosses(
    const RayCompositeT<Scalar>& c, const PixelTarget& target,
    const LossWeights& weights, SemanticMode mode, int active_classes,
    CompositeCotangent<Scalar>* cot, std::optional<double> fixed_depth_sd) {
  using Real = LossScalar<Scalar>;
  if (!std::isfinite(static_cast<double>(c.depth)) ||
      !std::isfinite(static_cast<double>(c.depth_variance)) ||
      !c.colour.allFinite() || !c.semantic_logits.allFinite()) {
    throw Error(ErrorCode::kNonFinite, "non-finite rendered values");
  }
  if (weights.alpha_p < 0 || weights.alpha_s < 0) {
    throw Error(ErrorCode::kInvalidArgument, "loss weights must be >= 0");
  }
  PixelLossTermsT<Real> terms;
  if (cot != nullptr) *cot = CompositeCotangent<Scalar>{};

  if (target.range > 0) {
    const Real var = static_cast<Real>(c.depth_variance);
    const Real sd = fixed_depth_sd
                        ? static_cast<Real>(*fixed_depth_sd)
                        : std::sqrt(std::max(var, static_cast<Real>(kDepthVarianceFloor)));
    const Real diff = static_cast<Real>(c.depth) - static_cast<Real>(target.range);
    terms.geometric = std::abs(diff) / sd;
    terms.depth_sd = sd;
    if (cot != nullptr) {
      cot->depth = static_cast<Scalar>(Sign(diff) / sd);
      if (weights.variance_gradient && !fixed_depth_sd && var > kDepthVarianceFloor) {
        cot->depth_variance = static_cast<Scalar>(Real(-0.5) * terms.geometric / var);
      }
    }
  }

  if (weights.colour_enabled) {
    for (int ch = 0; ch < 3; ++ch) {
      const Real diff =
          static_cast<Real>(c.colour[ch]) - static_cast<Real>(target.colour[ch]);
      terms.photometric += std::abs(diff);
      if (cot != nullptr) {
        cot->colour[ch] = static_cast<Scalar>(weights.alpha_p * Sign(diff));
      }
    }
  }

  if (target.semantic) {
    VectorX<Scalar> grad;
    if (const auto* flat = std::get_if<FlatLabel>(&*target.semantic)) {
      if (mode != SemanticMode::kFlat) {
        throw Error(ErrorCode::kModeMismatch, "flat label in hierarchical mode");
      }
      if (active_classes < 1 || active_classes > c.semantic_logits.size()) {
        throw Error(ErrorCode::kOutOfRange, "active class count out of range");
      }
      terms.semantic = static_cast<Real>(FlatLossFromLogits<Scalar>(
          c.semantic_logits.head(active_classes), flat->class_id,
          cot ? &grad : nullptr));
      if (cot != nullptr) {
        cot->semantic_logits = VectorX<Scalar>::Zero(c.semantic_logits.size());
        cot->semantic_logits.head(active_classes) =
            static_cast<Scalar>(weights.alpha_s) * grad;
      }
    } else {
      if (mode != SemanticMode::kHierarchical) {
        throw Error(ErrorCode::kModeMismatch, "hierarchical label in flat mode");
      }
      const auto& hier = std::get<HierLabel>(*target.semantic);
      terms.semantic = static_cast<Real>(HierLossFromLogits<Scalar>(
          c.semantic_logits, hier, cot ? &grad : nullptr));
      if (cot != nullptr) {
        cot->semantic_logits = static_cast<Scalar>(weights.alpha_s) * grad;
      }
    }
  }
  terms.total = terms.geometric +
                static_cast<Real>(weights.colour_enabled ? weights.alpha_p : 0.0) *
                    terms.photometric +
                static_cast<Real>(weights.alpha_s) * terms.semantic;
  return terms;
}

PixelBatch SamplePixelBatch(std::span<const Keyframe> keyframes,
                            std::span<const FrameLossStats> stats,
                            std::span<const Annotation> annotations,
                            const BatchSamplingConfig& cfg,
                            std::mt19937_64* rng) {
  if (keyframes.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "no keyframes to sample from");
  }
  PixelBatch batch;
  batch.entries.reserve(cfg.batch_pixels + annotations.size());
  std::vector<double> frame_weights(keyframes.size());
  for (size_t f = 0; f < keyframes.size(); ++f) {
    const double stat = f < stats.size() ? stats[f].mean_loss : 1.0;
    frame_weights[f] = cfg.frame_epsilon + std::max(0.0, stat);
  }
  std::discrete_distribution<int> pick_frame(frame_weights.begin(),
                                             frame_weights.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int cells = std::max(1, cfg.grid_cells);
  for (int b = 0; b < cfg.batch_pixels; ++b) {
    const int f = pick_frame(*rng);
    const Keyframe& kf = keyframes[f];
    const int w = kf.width(), h = kf.height();
    int u0 = 0, v0 = 0, u1 = w, v1 = h;
    const bool use_cells = f < static_cast<int>(stats.size()) &&
                           stats[f].observed &&
                           static_cast<int>(stats[f].cell_loss.size()) == cells * cells &&
                           unit(*rng) < cfg.cell_fraction;
    if (use_cells) {
      std::vector<double> cw(stats[f].cell_loss.size());
      for (size_t i = 0; i < cw.size(); ++i) {
        cw[i] = cfg.frame_epsilon + std::max(0.0, stats[f].cell_loss[i]);
      }
      std::discrete_distribution<int> pick_cell(cw.begin(), cw.end());
      const int cell = pick_cell(*rng);
      const int cx = cell % cells, cy = cell / cells;
      u0 = cx * w / cells;
      u1 = std::max(u0 + 1, (cx + 1) * w / cells);
      v0 = cy * h / cells;
      v1 = std::max(v0 + 1, (cy + 1) * h / cells);
    }
    std::uniform_int_distribution<int> pick_u(u0, u1 - 1);
    std::uniform_int_distribution<int> pick_v(v0, v1 - 1);
    BatchEntry e;
    e.keyframe = kf.id;
    e.u = pick_u(*rng);
    e.v = pick_v(*rng);
    batch.entries.push_back(e);
  }
  for (size_t a = 0; a < annotations.size(); ++a) {
    BatchEntry e;
    e.keyframe = annotations[a].keyframe;
    e.u = annotations[a].u;
    e.v = annotations[a].v;
    e.kind = EntryKind::kAnnotation;
    e.annotation = static_cast<int>(a);
    batch.entries.push_back(e);
  }
  return batch;
}

RayBatch BuildRayBatch(const PixelBatch& batch,
                       std::span<const Keyframe> keyframes,
                       std::span<const Annotation> annotations,
                       int samples_per_ray, const SamplingConfig& sampling,
                       std::mt19937_64* rng) {
  RayBatch out;
  const int n_rays = static_cast<int>(batch.entries.size());
  out.samples_per_ray = samples_per_ray;
  out.entries = batch.entries;
  out.targets.resize(n_rays);
  out.last_delta.resize(n_rays);
  out.depths.resize(samples_per_ray, n_rays);
  out.points.resize(3, static_cast<Eigen::Index>(samples_per_ray) * n_rays);
  for (int r = 0; r < n_rays; ++r) {
    const BatchEntry& e = batch.entries[r];
    if (e.keyframe < 0 || e.keyframe >= static_cast<int>(keyframes.size())) {
      throw Error(ErrorCode::kUnknownFrame, "batch references unknown keyframe");
    }
    const Frame& f = keyframes[e.keyframe].frame;
    const Ray ray = PixelToRay(e.u, e.v, f.intrinsics, f.world_from_camera,
                               sampling.near, sampling.far);
    PixelTarget& t = out.targets[r];
    for (int c = 0; c < 3; ++c) t.colour[c] = f.colour.at(e.u, e.v, c);
    const double d = f.depth.at(e.u, e.v);
    t.range = d > 0 ? d * ray.range_per_depth : 0.0;
    if (e.kind == EntryKind::kAnnotation) {
      if (e.annotation < 0 || e.annotation >= static_cast<int>(annotations.size())) {
        throw Error(ErrorCode::kOutOfRange, "batch references unknown annotation");
      }
      t.semantic = annotations[e.annotation].payload;
    }
    std::optional<double> guide;
    if (t.range > 0) guide = t.range;
    const auto depths = StratifiedSamples(ray, samples_per_ray, guide, sampling,
                                          SampleMode::kJittered, rng);
    out.last_delta[r] = (ray.far - ray.near) / samples_per_ray;
    for (int i = 0; i < samples_per_ray; ++i) {
      out.depths(i, r) = depths[i];
      out.points.col(static_cast<Eigen::Index>(r) * samples_per_ray + i) =
          ray.origin + depths[i] * ray.direction;
    }
  }
  return out;
}

template <typename Scalar>
BatchLossT<LossScalar<Scalar>> EvaluateBatch(const FieldParamsT<Scalar>& params,
                        const RayBatch& batch, const LossWeights& weights,
                        SemanticMode mode, int active_classes,
                        VectorX<Scalar>* grad,
                        std::span<const double> frozen_depth_sd) {
  using Real = LossScalar<Scalar>;
  BatchLossT<Real> result;
  const int n_rays = batch.size();
  if (n_rays == 0) throw Error(ErrorCode::kInvalidArgument, "empty batch");
  const int n = batch.samples_per_ray;
  MatrixX<Scalar> features;
  EncodePositions<Scalar>(params.encoding(), batch.points, &features);
  FieldEval<Scalar> eval;
  FieldForward(params, std::move(features), &eval);

  MatrixX<Scalar> out_cot;
  if (grad != nullptr) out_cot.resize(params.output_dim(), eval.num_points());
  const Scalar inv_rays = Scalar(1) / static_cast<Scalar>(n_rays);
  result.per_entry.resize(n_rays);
  result.depth_sd.resize(n_rays);
  if (!frozen_depth_sd.empty() && static_cast<int>(frozen_depth_sd.size()) != n_rays) {
    throw Error(ErrorCode::kShapeMismatch, "frozen normaliser count mismatch");
  }
  Real total = 0;
  for (int r = 0; r < n_rays; ++r) {
    const VectorX<Scalar> depths = batch.depths.col(r).template cast<Scalar>();
    const auto last_delta = static_cast<Scalar>(batch.last_delta[r]);
    const auto values = eval.output.middleCols(static_cast<Eigen::Index>(r) * n, n);
    const RayCompositeT<Scalar> comp = Composite<Scalar>(depths, last_delta, values);
    CompositeCotangent<Scalar> cot;
    const auto terms = PixelLosses<Scalar>(
        comp, batch.targets[r], weights, mode, active_classes,
        grad ? &cot : nullptr,
        frozen_depth_sd.empty() ? std::nullopt
                                : std::optional<double>(frozen_depth_sd[r]));
    result.per_entry[r] = terms.total;
    result.depth_sd[r] = terms.depth_sd;
    total += terms.total;
    if (grad != nullptr) {
      cot.depth *= inv_rays;
      cot.depth_variance *= inv_rays;
      cot.colour *= inv_rays;
      cot.semantic_logits *= inv_rays;
      CompositeBackward<Scalar>(
          depths, last_delta, values, comp, cot,
          out_cot.middleCols(static_cast<Eigen::Index>(r) * n, n));
    }
  }
  result.mean = total / n_rays;
  if (grad != nullptr) {
    grad->setZero(params.size());
    FieldBackward(params, eval, out_cot, grad);
  }
  return result;
}

StepResult MappingStep(FieldParams* params, AdamState* adam,
                       const RayBatch& batch, const MappingConfig& cfg,
                       SemanticMode mode, int active_classes,
                       std::span<const Keyframe> keyframes,
                       std::vector<FrameLossStats>* stats) {
  StepResult result;
  result.batch_size = batch.size();
  VectorX<float> grad;
  const BatchLoss loss = EvaluateBatch<float>(*params, batch, cfg.weights, mode,
                                              active_classes, &grad);
  result.loss = loss.mean;
  if (!std::isfinite(loss.mean) || !grad.allFinite()) {
    spdlog::warn("mapping step skipped: non-finite loss or gradient");
    return result;
  }
  adam->config = cfg.adam;
  AdamUpdate(adam, &params->values(), grad);
  result.applied = true;

  if (stats != nullptr) {
    const int cells = std::max(1, cfg.batch.grid_cells);
    stats->resize(keyframes.size());
    std::vector<double> frame_sum(keyframes.size(), 0.0);
    std::vector<int> frame_count(keyframes.size(), 0);
    std::vector<std::map<int, std::pair<double, int>>> cell_acc(keyframes.size());
    for (int r = 0; r < batch.size(); ++r) {
      const BatchEntry& e = batch.entries[r];
      frame_sum[e.keyframe] += loss.per_entry[r];
      ++frame_count[e.keyframe];
      const Keyframe& kf = keyframes[e.keyframe];
      const int cell = (e.v * cells / kf.height()) * cells + e.u * cells / kf.width();
      auto& acc = cell_acc[e.keyframe][cell];
      acc.first += loss.per_entry[r];
      ++acc.second;
    }
    const double decay = cfg.stats_decay;
    for (size_t f = 0; f < keyframes.size(); ++f) {
      if (frame_count[f] == 0) continue;
      FrameLossStats& s = (*stats)[f];
      const double mean = frame_sum[f] / frame_count[f];
      if (!s.observed) {
        s.mean_loss = mean;
        s.cell_loss.assign(static_cast<size_t>(cells) * cells, mean);
        s.observed = true;
      } else {
        s.mean_loss = decay * s.mean_loss + (1 - decay) * mean;
      }
      for (const auto& [cell, acc] : cell_acc[f]) {
        s.cell_loss[cell] =
            decay * s.cell_loss[cell] + (1 - decay) * acc.first / acc.second;
      }
    }
  }
  return result;
}

#define SCENELABEL_INSTANTIATE(S)                                              \
  template void AdamUpdate<S>(AdamStateT<S>*, VectorX<S>*, const VectorX<S>&); \
  template PixelLossTermsT<LossScalar<S>> PixelLosses<S>(                     \
      const RayCompositeT<S>&,                                                 \
                                         const PixelTarget&, const LossWeights&, \
                                         SemanticMode, int, CompositeCotangent<S>*, \
                                         std::optional<double>);               \
  template BatchLossT<LossScalar<S>> EvaluateBatch<S>(const FieldParamsT<S>&, const RayBatch&, \
                                      const LossWeights&, SemanticMode, int,   \
                                      VectorX<S>*, std::span<const double>);

SCENELABEL_INSTANTIATE(float)
SCENELABEL_INSTANTIATE(double)
SCENELABEL_INSTANTIATE(long double)
#undef SCENELABEL_INSTANTIATE

}  // namespace scenelabel
