#include "scenelabel/render.hpp"

#include <algorithm>
#include <cmath>

namespace scenelabel {

void CameraIntrinsics::validate() const {
  if (!(fx > 0 && fy > 0)) {
    throw Error(ErrorCode::kInvalidArgument, "focal lengths must be > 0");
  }
  if (width <= 0 || height <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "image size must be positive");
  }
  if (!(cx >= 0 && cx < width && cy >= 0 && cy < height)) {
    throw Error(ErrorCode::kInvalidArgument,
                "principal point must lie inside the image");
  }
}

CameraIntrinsics CameraIntrinsics::scaled(double scale) const {
  CameraIntrinsics out;
  out.fx = fx * scale;
  out.fy = fy * scale;
  out.cx = (cx + 0.5) * scale - 0.5;
  out.cy = (cy + 0.5) * scale - 0.5;
  out.width = std::max(1, static_cast<int>(std::lround(width * scale)));
  out.height = std::max(1, static_cast<int>(std::lround(height * scale)));
  out.cx = std::clamp(out.cx, 0.0, out.width - 1e-6);
  out.cy = std::clamp(out.cy, 0.0, out.height - 1e-6);
  return out;
}

Ray PixelToRay(double u, double v, const CameraIntrinsics& k,
               const Pose& world_from_camera, double near, double far) {
  if (!(u >= 0 && v >= 0 && u <= k.width - 1 && v <= k.height - 1)) {
    throw Error(ErrorCode::kOutOfRange, "pixel outside image bounds");
  }
  const Vec3 d_cam((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
  Ray ray;
  ray.range_per_depth = d_cam.norm();
  ray.origin = world_from_camera.translation();
  ray.direction = (world_from_camera.linear() * d_cam).normalized();
  ray.near = near;
  ray.far = far;
  return ray;
}

namespace {

double NormalCdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Quantile of the standard normal truncated to [-limit, limit].
double TruncatedNormalQuantile(double q, double limit) {
  const double lo_p = NormalCdf(-limit);
  const double target = lo_p + q * (NormalCdf(limit) - lo_p);
  double lo = -limit, hi = limit;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (NormalCdf(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

std::vector<double> StratifiedSamples(const Ray& ray, int n,
                                      std::optional<double> measured_range,
                                      const SamplingConfig& cfg,
                                      SampleMode mode, std::mt19937_64* rng) {
  if (n < 2) throw Error(ErrorCode::kInvalidArgument, "need >= 2 samples");
  if (!(ray.near >= 0 && ray.near < ray.far)) {
    throw Error(ErrorCode::kInvalidArgument, "ray requires 0 <= near < far");
  }
  if (mode == SampleMode::kJittered && rng == nullptr) {
    throw Error(ErrorCode::kInvalidArgument, "jittered sampling needs an rng");
  }
  const bool guided = measured_range.has_value() &&
                      std::isfinite(*measured_range) && *measured_range > 0;
  int n_guided = 0;
  if (guided) {
    n_guided = static_cast<int>(std::lround(cfg.guided_fraction * n));
    n_guided = std::clamp(n_guided, 0, n - 1);
  }
  const int n_strat = n - n_guided;

  std::vector<double> depths;
  depths.reserve(n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double span = ray.far - ray.near;
  for (int i = 0; i < n_strat; ++i) {
    const double offset = mode == SampleMode::kMidpoint ? 0.5 : unit(*rng);
    depths.push_back(ray.near + span * (i + offset) / n_strat);
  }
  if (n_guided > 0) {
    const double limit = cfg.guided_band_sigmas;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int i = 0; i < n_guided; ++i) {
      double z;
      if (mode == SampleMode::kMidpoint) {
        z = TruncatedNormalQuantile((i + 0.5) / n_guided, limit);
      } else {
        do {
          z = normal(*rng);
        } while (std::abs(z) > limit);
      }
      const double t = *measured_range + cfg.guided_sigma * z;
      depths.push_back(std::clamp(t, ray.near, ray.far));
    }
  }
  std::sort(depths.begin(), depths.end());
  // Keep depths strictly ascending (clamping or coincident draws can tie).
  const double eps = 1e-9 * std::max(1.0, ray.far);
  for (size_t i = 1; i < depths.size(); ++i) {
    if (depths[i] <= depths[i - 1]) depths[i] = depths[i - 1] + eps;
  }
  return depths;
}

template <typename Scalar>
void SampleSetT<Scalar>::validate() const {
  if (depths.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "sample set needs N >= 2");
  }
  if (values.cols() != depths.size() || values.rows() < kLogitRow) {
    throw Error(ErrorCode::kShapeMismatch, "sample values shape mismatch");
  }
  for (Eigen::Index i = 1; i < depths.size(); ++i) {
    if (!(depths[i] > depths[i - 1])) {
      throw Error(ErrorCode::kInvalidArgument,
                  "sample depths must be strictly ascending");
    }
  }
  if (!(last_delta > 0)) {
    throw Error(ErrorCode::kInvalidArgument, "last_delta must be > 0");
  }
}

template <typename Scalar>
RayCompositeT<Scalar> Composite(const Eigen::Ref<const VectorX<Scalar>>& depths,
                                Scalar last_delta,
                                const Eigen::Ref<const MatrixX<Scalar>>& values) {
  const Eigen::Index n = depths.size();
  const Eigen::Index n_logits = values.rows() - kLogitRow;
  RayCompositeT<Scalar> out;
  out.weights.resize(n);
  out.occupancies.resize(n);
  out.semantic_logits = VectorX<Scalar>::Zero(n_logits);
  Scalar trans = 1;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar delta = i + 1 < n ? depths[i + 1] - depths[i] : last_delta;
    // 1 - exp(-x) without cancellation for small x.
    const Scalar occ = -std::expm1(-values(kDensityRow, i) * delta);
    const Scalar w = occ * trans;
    out.occupancies[i] = occ;
    out.weights[i] = w;
    trans *= Scalar(1) - occ;
    out.depth += w * depths[i];
    out.colour += w * values.col(i).template head<3>();
    out.semantic_logits += w * values.col(i).tail(n_logits);
  }
  out.transmittance = trans;
  Scalar var = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar r = out.depth - depths[i];
    var += out.weights[i] * r * r;
  }
  out.depth_variance = var;
  return out;
}

template <typename Scalar>
void CompositeBackward(const Eigen::Ref<const VectorX<Scalar>>& depths,
                       Scalar last_delta,
                       const Eigen::Ref<const MatrixX<Scalar>>& values,
                       const RayCompositeT<Scalar>& composite,
                       const CompositeCotangent<Scalar>& cot,
                       Eigen::Ref<MatrixX<Scalar>> values_grad) {
  const Eigen::Index n = depths.size();
  const Eigen::Index n_logits = values.rows() - kLogitRow;
  const bool has_logits = cot.semantic_logits.size() > 0;
  if (has_logits && cot.semantic_logits.size() != n_logits) {
    throw Error(ErrorCode::kShapeMismatch, "logit cotangent length mismatch");
  }
  const Scalar weight_sum = composite.weights.sum();
  const Scalar d_hat = composite.depth;

  // q_i = d<cot, composite>/dw_i, including the variance's dependence on D.
  VectorX<Scalar> q(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Scalar qi = cot.depth * depths[i] +
                cot.colour.dot(values.col(i).template head<3>());
    if (has_logits) qi += cot.semantic_logits.dot(values.col(i).tail(n_logits));
    if (cot.depth_variance != Scalar(0)) {
      const Scalar r = d_hat - depths[i];
      qi += cot.depth_variance *
            (r * r + Scalar(2) * depths[i] * d_hat * (weight_sum - Scalar(1)));
    }
    q[i] = qi;
  }

  // dw_i/drho_k = delta_k T_{k+1} [i == k] - delta_k w_i [i > k].
  VectorX<Scalar> trans(n + 1);
  trans[0] = 1;
  for (Eigen::Index i = 0; i < n; ++i) {
    trans[i + 1] = trans[i] * (Scalar(1) - composite.occupancies[i]);
  }
  Scalar suffix = 0;  // sum_{i > k} w_i q_i
  for (Eigen::Index k = n - 1; k >= 0; --k) {
    const Scalar delta = k + 1 < n ? depths[k + 1] - depths[k] : last_delta;
    values_grad(kDensityRow, k) = delta * (trans[k + 1] * q[k] - suffix);
    suffix += composite.weights[k] * q[k];
    values_grad.col(k).template head<3>() = composite.weights[k] * cot.colour;
    if (has_logits) {
      values_grad.col(k).tail(n_logits) =
          composite.weights[k] * cot.semantic_logits;
    } else {
      values_grad.col(k).tail(n_logits).setZero();
    }
  }
}

template <typename Scalar>
SampleSetT<Scalar> SampleField(const FieldParamsT<Scalar>& params,
                               const Ray& ray,
                               const std::vector<double>& depths) {
  const auto n = static_cast<Eigen::Index>(depths.size());
  Eigen::Matrix3Xd points(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    points.col(i) = ray.origin + depths[i] * ray.direction;
  }
  MatrixX<Scalar> features;
  EncodePositions<Scalar>(params.encoding(), points, &features);
  FieldEval<Scalar> eval;
  FieldForward(params, std::move(features), &eval);
  SampleSetT<Scalar> samples;
  samples.depths = Eigen::Map<const VectorX<double>>(depths.data(), n)
                       .template cast<Scalar>();
  samples.last_delta = static_cast<Scalar>((ray.far - ray.near) / n);
  samples.values = std::move(eval.output);
  return samples;
}

template <typename Scalar>
RayCompositeT<Scalar> RenderPixel(const FieldParamsT<Scalar>& params,
                                  const CameraIntrinsics& intrinsics,
                                  const Pose& world_from_camera, double u,
                                  double v, int num_samples,
                                  std::optional<double> measured_depth,
                                  const SamplingConfig& cfg, SampleMode mode,
                                  std::mt19937_64* rng) {
  const Ray ray =
      PixelToRay(u, v, intrinsics, world_from_camera, cfg.near, cfg.far);
  std::optional<double> range;
  if (measured_depth && *measured_depth > 0) {
    range = *measured_depth * ray.range_per_depth;
  }
  const auto depths = StratifiedSamples(ray, num_samples, range, cfg, mode, rng);
  return Composite(SampleField(params, ray, depths));
}

RenderedFrame RenderFrame(const FieldParams& params,
                          const CameraIntrinsics& intrinsics,
                          const Pose& world_from_camera, int num_samples,
                          const SamplingConfig& cfg, int stride,
                          const DepthImage* guide_depth) {
  if (stride < 1) throw Error(ErrorCode::kInvalidArgument, "stride must be >= 1");
  RenderedFrame frame;
  frame.stride = stride;
  frame.width = (intrinsics.width + stride - 1) / stride;
  frame.height = (intrinsics.height + stride - 1) / stride;
  const int n_pix = frame.width * frame.height;
  const int n_logits = params.semantic_dim();
  frame.depth = DepthImage(frame.width, frame.height, 1);
  frame.variance = DepthImage(frame.width, frame.height, 1);
  frame.colour = ColourImage(frame.width, frame.height, 3);
  frame.logits.resize(n_logits, n_pix);

  const int rays_per_chunk = std::max(1, 8192 / num_samples);
  FieldEval<float> eval;
  std::vector<Ray> rays;
  std::vector<std::vector<double>> ray_depths;
  for (int start = 0; start < n_pix; start += rays_per_chunk) {
    const int count = std::min(rays_per_chunk, n_pix - start);
    rays.clear();
    ray_depths.clear();
    Eigen::Matrix3Xd points(3, static_cast<Eigen::Index>(count) * num_samples);
    for (int r = 0; r < count; ++r) {
      const int idx = start + r;
      const int u = (idx % frame.width) * stride;
      const int v = (idx / frame.width) * stride;
      Ray ray = PixelToRay(u, v, intrinsics, world_from_camera, cfg.near,
                           cfg.far);
      std::optional<double> range;
      if (guide_depth != nullptr && guide_depth->at(u, v) > 0) {
        range = guide_depth->at(u, v) * ray.range_per_depth;
      }
      auto depths = StratifiedSamples(ray, num_samples, range, cfg,
                                      SampleMode::kMidpoint);
      for (int i = 0; i < num_samples; ++i) {
        points.col(r * num_samples + i) = ray.origin + depths[i] * ray.direction;
      }
      rays.push_back(ray);
      ray_depths.push_back(std::move(depths));
    }
    MatrixX<float> features;
    EncodePositions<float>(params.encoding(), points, &features);
    FieldForward(params, std::move(features), &eval);
    for (int r = 0; r < count; ++r) {
      const int idx = start + r;
      const VectorX<float> depths =
          Eigen::Map<const VectorX<double>>(ray_depths[r].data(), num_samples)
              .cast<float>();
      const auto last_delta =
          static_cast<float>((rays[r].far - rays[r].near) / num_samples);
      const RayCompositeF c = Composite<float>(
          depths, last_delta, eval.output.middleCols(r * num_samples, num_samples));
      const int px = idx % frame.width, py = idx / frame.width;
      frame.depth.at(px, py) =
          static_cast<float>(c.depth / rays[r].range_per_depth);
      frame.variance.at(px, py) = c.depth_variance;
      for (int ch = 0; ch < 3; ++ch) frame.colour.at(px, py, ch) = c.colour[ch];
      frame.logits.col(idx) = c.semantic_logits;
    }
  }
  return frame;
}

#define SCENELABEL_INSTANTIATE(S)                                              \
  template struct SampleSetT<S>;                                               \
  template RayCompositeT<S> Composite<S>(const Eigen::Ref<const VectorX<S>>&,  \
                                         S,                                    \
                                         const Eigen::Ref<const MatrixX<S>>&); \
  template void CompositeBackward<S>(                                          \
      const Eigen::Ref<const VectorX<S>>&, S,                                  \
      const Eigen::Ref<const MatrixX<S>>&, const RayCompositeT<S>&,            \
      const CompositeCotangent<S>&, Eigen::Ref<MatrixX<S>>);                   \
  template SampleSetT<S> SampleField<S>(const FieldParamsT<S>&, const Ray&,    \
                                        const std::vector<double>&);           \
  template RayCompositeT<S> RenderPixel<S>(                                    \
      const FieldParamsT<S>&, const CameraIntrinsics&, const Pose&, double,    \
      double, int, std::optional<double>, const SamplingConfig&, SampleMode,   \
      std::mt19937_64*);

SCENELABEL_INSTANTIATE(float)
SCENELABEL_INSTANTIATE(double)
SCENELABEL_INSTANTIATE(long double)
#undef SCENELABEL_INSTANTIATE

}  // namespace scenelabel
