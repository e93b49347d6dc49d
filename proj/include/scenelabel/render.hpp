#pragma once

// Ray generation, depth sampling and volumetric compositing of field
// samples into per-pixel depth, depth variance, colour and semantic logits.

#include <optional>
#include <random>

#include "scenelabel/common.hpp"
#include "scenelabel/field.hpp"

namespace scenelabel {

struct CameraIntrinsics {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const;
  /// Intrinsics of the same camera resampled by `scale` (pixel-centre
  /// convention: centres sit at integer coordinates).
  CameraIntrinsics scaled(double scale) const;
  bool operator==(const CameraIntrinsics&) const = default;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double near = 0.0;
  double far = 1.0;
  /// Range along the unit ray per metre of camera z-depth for this pixel.
  double range_per_depth = 1.0;
};

/// Ray through pixel (u, v) (column, row; centres at integer coordinates) of
/// a right-handed camera with +z forward, expressed in the world frame.
Ray PixelToRay(double u, double v, const CameraIntrinsics& intrinsics,
               const Pose& world_from_camera, double near, double far);

struct SamplingConfig {
  double near = 0.1;
  double far = 5.0;
  /// Fraction of samples concentrated around a depth measurement.
  double guided_fraction = 0.5;
  /// Standard deviation of guided samples (metres along the ray).
  double guided_sigma = 0.1;
  /// Guided samples are truncated to +- this many sigmas.
  double guided_band_sigmas = 6.0;
};

enum class SampleMode {
  kJittered,  // one uniform draw per stratum, Gaussian guided samples
  kMidpoint,  // stratum midpoints, guided samples at Gaussian quantiles
};

/// Ascending sample depths along `ray` (range units). With a measurement
/// (range along the ray), round(guided_fraction * n) samples are drawn from
/// the truncated Gaussian band around it and the rest stratify [near, far].
std::vector<double> StratifiedSamples(const Ray& ray, int n,
                                      std::optional<double> measured_range,
                                      const SamplingConfig& cfg,
                                      SampleMode mode,
                                      std::mt19937_64* rng = nullptr);

/// Samples along one ray in field-output layout: `values` is (4 + n) x N
/// with rows colour (3), density (1), logits (n).
template <typename Scalar>
struct SampleSetT {
  VectorX<Scalar> depths;
  /// Spacing used for the last sample; d_{i+1} - d_i for the rest.
  Scalar last_delta = 0;
  MatrixX<Scalar> values;

  Eigen::Index size() const { return depths.size(); }
  void validate() const;
};
using SampleSet = SampleSetT<double>;

template <typename Scalar>
struct RayCompositeT {
  Scalar depth = 0;
  Scalar depth_variance = 0;
  Vector3<Scalar> colour = Vector3<Scalar>::Zero();
  VectorX<Scalar> semantic_logits;
  VectorX<Scalar> weights;
  VectorX<Scalar> occupancies;
  /// prod_i (1 - o_i); sum(weights) + transmittance == 1.
  Scalar transmittance = 1;
};
using RayComposite = RayCompositeT<double>;
using RayCompositeF = RayCompositeT<float>;

template <typename Scalar>
struct CompositeCotangent {
  Scalar depth = 0;
  Scalar depth_variance = 0;
  Vector3<Scalar> colour = Vector3<Scalar>::Zero();
  VectorX<Scalar> semantic_logits;  // empty = zero
};

template <typename Scalar>
RayCompositeT<Scalar> Composite(const Eigen::Ref<const VectorX<Scalar>>& depths,
                                Scalar last_delta,
                                const Eigen::Ref<const MatrixX<Scalar>>& values);

template <typename Scalar>
RayCompositeT<Scalar> Composite(const SampleSetT<Scalar>& samples) {
  samples.validate();
  return Composite<Scalar>(samples.depths, samples.last_delta, samples.values);
}

/// Gradient of <cotangent, composite> w.r.t. the sample values; written into
/// `values_grad` ((4 + n) x N), overwriting it.
template <typename Scalar>
void CompositeBackward(const Eigen::Ref<const VectorX<Scalar>>& depths,
                       Scalar last_delta,
                       const Eigen::Ref<const MatrixX<Scalar>>& values,
                       const RayCompositeT<Scalar>& composite,
                       const CompositeCotangent<Scalar>& cotangent,
                       Eigen::Ref<MatrixX<Scalar>> values_grad);

/// Evaluates the field at the given depths along `ray`.
template <typename Scalar>
SampleSetT<Scalar> SampleField(const FieldParamsT<Scalar>& params,
                               const Ray& ray,
                               const std::vector<double>& depths);

/// Composite of the field sampled along the ray through pixel (u, v).
template <typename Scalar>
RayCompositeT<Scalar> RenderPixel(const FieldParamsT<Scalar>& params,
                                  const CameraIntrinsics& intrinsics,
                                  const Pose& world_from_camera, double u,
                                  double v, int num_samples,
                                  std::optional<double> measured_depth,
                                  const SamplingConfig& cfg, SampleMode mode,
                                  std::mt19937_64* rng = nullptr);

/// Dense render on a strided pixel grid of ceil(w/stride) x ceil(h/stride);
/// grid cell (i, j) is pixel (i * stride, j * stride).
struct RenderedFrame {
  int width = 0;
  int height = 0;
  int stride = 1;
  DepthImage depth;        // camera z-depth (metres)
  DepthImage variance;     // along-ray variance (metres^2)
  ColourImage colour;
  MatrixX<float> logits;   // n x (width * height), row-major pixel order
};

/// Deterministic (midpoint-mode) render. When `guide_depth` is given, its
/// valid pixels steer guided samples.
RenderedFrame RenderFrame(const FieldParams& params,
                          const CameraIntrinsics& intrinsics,
                          const Pose& world_from_camera, int num_samples,
                          const SamplingConfig& cfg, int stride = 1,
                          const DepthImage* guide_depth = nullptr);

}  // namespace scenelabel
