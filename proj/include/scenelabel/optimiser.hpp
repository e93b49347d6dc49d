#pragma once

// The mapping objective: per-pixel geometric, photometric and semantic
// losses, information-guided pixel sampling, and ADAM updates of the field.

#include <map>
#include <optional>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

#include "scenelabel/field.hpp"
#include "scenelabel/frame.hpp"
#include "scenelabel/render.hpp"
#include "scenelabel/semantics.hpp"

namespace scenelabel {

struct LossWeights {
  double alpha_p = 5.0;
  double alpha_s = 8.0;
  bool colour_enabled = true;
  /// Backpropagate through the depth-variance normaliser of the geometric
  /// term. Off by default: the normaliser acts as a fixed per-ray weight.
  bool variance_gradient = false;
};

/// Floor on the rendered depth variance in the geometric-loss normaliser (m^2).
inline constexpr double kDepthVarianceFloor = 1e-6;

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
struct AdamStateT {
  AdamConfig config;
  VectorX<Scalar> first_moment;
  VectorX<Scalar> second_moment;
  int64_t step = 0;
};
using AdamState = AdamStateT<float>;

/// Bias-corrected ADAM step; moments are lazily sized to the parameters.
template <typename Scalar>
void AdamUpdate(AdamStateT<Scalar>* adam, VectorX<Scalar>* params,
                const VectorX<Scalar>& grads);

/// Supervision available at one pixel.
struct PixelTarget {
  Eigen::Vector3d colour = Eigen::Vector3d::Zero();
  /// Measured range along the ray (metres); <= 0 when depth is invalid.
  double range = 0.0;
  std::optional<SemanticPayload> semantic;
};

/// Loss accumulation type: at least double, wider for extended precision.
template <typename Scalar>
using LossScalar =
    std::conditional_t<(sizeof(Scalar) > sizeof(double)), Scalar, double>;

template <typename Real>
struct PixelLossTermsT {
  Real geometric = 0;
  Real photometric = 0;
  Real semantic = 0;
  Real total = 0;
  /// Normaliser used by the geometric term (0 when it is absent).
  Real depth_sd = 0;
};
using PixelLossTerms = PixelLossTermsT<double>;

/// Evaluates e_g + alpha_p e_p + alpha_s e_s at one pixel and, when `cot`
/// is non-null, the cotangent of the total w.r.t. the composite. In flat
/// mode only the first `active_classes` logits take part. `fixed_depth_sd`
/// replaces the rendered normaliser, e.g. to difference the loss with the
/// normaliser held at its base-point value.
template <typename Scalar>
PixelLossTermsT<LossScalar<Scalar>> PixelLosses(
    const RayCompositeT<Scalar>& composite, const PixelTarget& target,
    const LossWeights& weights, SemanticMode mode, int active_classes,
    CompositeCotangent<Scalar>* cot,
    std::optional<double> fixed_depth_sd = std::nullopt);

enum class EntryKind { kSample, kAnnotation };

struct BatchEntry {
  int keyframe = 0;
  int u = 0;
  int v = 0;
  EntryKind kind = EntryKind::kSample;
  /// Index into the annotation list for kAnnotation entries.
  int annotation = -1;
};

struct PixelBatch {
  std::vector<BatchEntry> entries;
};

/// Running loss statistics of one keyframe: overall and per grid cell.
struct FrameLossStats {
  double mean_loss = 1.0;
  std::vector<double> cell_loss;  // grid_cells^2, row-major
  bool observed = false;
};

struct BatchSamplingConfig {
  int batch_pixels = 200;
  int grid_cells = 8;
  /// Fraction of sampled pixels drawn from cells in proportion to cell loss.
  double cell_fraction = 0.5;
  /// Added to frame statistics when splitting the budget.
  double frame_epsilon = 0.01;
};

PixelBatch SamplePixelBatch(std::span<const Keyframe> keyframes,
                            std::span<const FrameLossStats> stats,
                            std::span<const Annotation> annotations,
                            const BatchSamplingConfig& cfg,
                            std::mt19937_64* rng);

/// Rays, sample depths and targets for a batch; fixed once drawn so that the
/// loss is a deterministic function of the field parameters.
struct RayBatch {
  std::vector<BatchEntry> entries;
  std::vector<PixelTarget> targets;
  std::vector<double> last_delta;
  Eigen::MatrixXd depths;  // samples_per_ray x rays
  Eigen::Matrix3Xd points; // 3 x (samples_per_ray * rays)
  int samples_per_ray = 0;

  int size() const { return static_cast<int>(entries.size()); }
};

RayBatch BuildRayBatch(const PixelBatch& batch,
                       std::span<const Keyframe> keyframes,
                       std::span<const Annotation> annotations,
                       int samples_per_ray, const SamplingConfig& sampling,
                       std::mt19937_64* rng);

template <typename Real>
struct BatchLossT {
  Real mean = 0;
  std::vector<Real> per_entry;
  std::vector<Real> depth_sd;
};
using BatchLoss = BatchLossT<double>;

/// Mean loss over the batch; writes d(mean)/d(params) into *grad when
/// non-null (resized and zeroed first). A non-empty `frozen_depth_sd` fixes
/// the per-ray geometric normalisers.
template <typename Scalar>
BatchLossT<LossScalar<Scalar>> EvaluateBatch(
    const FieldParamsT<Scalar>& params, const RayBatch& batch,
    const LossWeights& weights, SemanticMode mode, int active_classes,
    VectorX<Scalar>* grad, std::span<const double> frozen_depth_sd = {});

struct MappingConfig {
  int samples_per_ray = 32;
  BatchSamplingConfig batch;
  SamplingConfig sampling;
  LossWeights weights;
  AdamConfig adam;
  /// Parsed for completeness; poses are fixed so it is never used.
  double pose_learning_rate = 0.003;
  /// Decay of the per-frame loss statistics.
  double stats_decay = 0.9;
};

struct StepResult {
  double loss = 0;
  bool applied = false;
  int batch_size = 0;
};

/// One optimisation step on a pre-drawn batch: loss, backprop through
/// compositing and field, ADAM update, and refreshed loss statistics.
StepResult MappingStep(FieldParams* params, AdamState* adam,
                       const RayBatch& batch, const MappingConfig& cfg,
                       SemanticMode mode, int active_classes,
                       std::span<const Keyframe> keyframes,
                       std::vector<FrameLossStats>* stats);

}  // namespace scenelabel
