#pragma once

// Scene field: sinusoidal position encoding feeding a 4-hidden-layer MLP
// with colour, density and semantic-logit heads.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>

#include "scenelabel/common.hpp"

namespace scenelabel {

struct Aabb {
  Vec3 min = Vec3::Constant(-1.0);
  Vec3 max = Vec3::Constant(1.0);

  Vec3 extent() const { return max - min; }
  Vec3 centre() const { return 0.5 * (min + max); }
  bool contains(const Vec3& p, double pad = 0.0) const {
    return (p.array() >= min.array() - pad).all() &&
           (p.array() <= max.array() + pad).all();
  }
};

struct EncodingConfig {
  int num_frequency_bands = 10;
  /// Frequency of the lowest band, in cycles per unit of normalised
  /// coordinate; band k uses pi * base_frequency * 2^k.
  double base_frequency = 1.0;
  bool include_raw_coords = true;
  Aabb scene_bound;

  int feature_dim() const {
    return (include_raw_coords ? 3 : 0) + 6 * num_frequency_bands;
  }
  void validate() const;
  bool operator==(const EncodingConfig& o) const {
    return num_frequency_bands == o.num_frequency_bands &&
           base_frequency == o.base_frequency &&
           include_raw_coords == o.include_raw_coords &&
           scene_bound.min == o.scene_bound.min &&
           scene_bound.max == o.scene_bound.max;
  }
};

/// Encodes one point. Layout: [x y z] (optional), then for each band k
/// [sin x, sin y, sin z, cos x, cos y, cos z] of the scaled coordinates.
VectorX<double> EncodePosition(const Vec3& p, const EncodingConfig& cfg);

/// Encodes the columns of `points` into `features` (feature_dim x P).
template <typename Scalar>
void EncodePositions(const EncodingConfig& cfg,
                     const Eigen::Ref<const Eigen::Matrix3Xd>& points,
                     MatrixX<Scalar>* features);

inline constexpr int kHiddenLayers = 4;
inline constexpr int kDefaultHiddenWidth = 256;
/// Output rows: colour (3), density (1), semantic logits (n).
inline constexpr int kColourRow = 0;
inline constexpr int kDensityRow = 3;
inline constexpr int kLogitRow = 4;

/// Hidden nonlinearity: softplus with sharpness beta.
inline constexpr double kHiddenSoftplusBeta = 10.0;

/// All learnable weights, stored contiguously so optimiser state and
/// checkpoints operate on one flat vector. Linear layers 0..3 are the hidden
/// layers; layer 4 stacks the three heads.
template <typename Scalar>
class FieldParamsT {
 public:
  static constexpr int kNumLinear = kHiddenLayers + 1;

  FieldParamsT() = default;
  FieldParamsT(const EncodingConfig& encoding, int semantic_dim,
               int hidden_width = kDefaultHiddenWidth);

  const EncodingConfig& encoding() const { return encoding_; }
  int semantic_dim() const { return semantic_dim_; }
  int hidden_width() const { return hidden_width_; }
  int input_dim() const { return encoding_.feature_dim(); }
  int output_dim() const { return kLogitRow + semantic_dim_; }

  int rows(int layer) const;
  int cols(int layer) const;
  Eigen::Index weight_offset(int layer) const { return weight_offset_[layer]; }
  Eigen::Index bias_offset(int layer) const { return bias_offset_[layer]; }

  Eigen::Map<MatrixX<Scalar>> weight(int layer) {
    return {values_.data() + weight_offset_[layer], rows(layer), cols(layer)};
  }
  Eigen::Map<const MatrixX<Scalar>> weight(int layer) const {
    return {values_.data() + weight_offset_[layer], rows(layer), cols(layer)};
  }
  Eigen::Map<VectorX<Scalar>> bias(int layer) {
    return {values_.data() + bias_offset_[layer], rows(layer)};
  }
  Eigen::Map<const VectorX<Scalar>> bias(int layer) const {
    return {values_.data() + bias_offset_[layer], rows(layer)};
  }

  VectorX<Scalar>& values() { return values_; }
  const VectorX<Scalar>& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }

  bool all_finite() const { return values_.allFinite(); }

  template <typename Other>
  FieldParamsT<Other> cast() const {
    FieldParamsT<Other> out(encoding_, semantic_dim_, hidden_width_);
    out.values() = values_.template cast<Other>();
    return out;
  }

  bool operator==(const FieldParamsT& o) const {
    return encoding_ == o.encoding_ && semantic_dim_ == o.semantic_dim_ &&
           hidden_width_ == o.hidden_width_ && values_ == o.values_;
  }

 private:
  EncodingConfig encoding_;
  int semantic_dim_ = 0;
  int hidden_width_ = 0;
  std::array<Eigen::Index, kNumLinear> weight_offset_{};
  std::array<Eigen::Index, kNumLinear> bias_offset_{};
  VectorX<Scalar> values_;
};

using FieldParams = FieldParamsT<float>;
using FieldParamsD = FieldParamsT<double>;

template <typename Scalar>
struct FieldOutputT {
  Vector3<Scalar> colour;
  Scalar density = 0;
  VectorX<Scalar> semantic_logits;
};

/// Batched forward result; keeps the activations needed by the backward pass.
template <typename Scalar>
struct FieldEval {
  MatrixX<Scalar> input;                              // F x P
  std::array<MatrixX<Scalar>, kHiddenLayers> hidden;  // H x P, post-activation
  MatrixX<Scalar> output;                             // (4 + n) x P, activated

  Eigen::Index num_points() const { return input.cols(); }
};

/// Runs the MLP on the columns of `features` (moved into eval->input).
template <typename Scalar>
void FieldForward(const FieldParamsT<Scalar>& params, MatrixX<Scalar> features,
                  FieldEval<Scalar>* eval);

/// Backpropagates `output_cotangent` ((4 + n) x P, w.r.t. activated
/// outputs). Parameter gradients are accumulated into *param_grad; the input
/// gradient is written to *input_grad when non-null.
template <typename Scalar>
void FieldBackward(const FieldParamsT<Scalar>& params,
                   const FieldEval<Scalar>& eval,
                   const MatrixX<Scalar>& output_cotangent,
                   VectorX<Scalar>* param_grad,
                   MatrixX<Scalar>* input_grad = nullptr);

template <typename Scalar>
FieldOutputT<Scalar> FieldForwardPoint(const FieldParamsT<Scalar>& params,
                                       const VectorX<Scalar>& features);

template <typename Scalar>
struct FieldGradient {
  VectorX<Scalar> params;
  VectorX<Scalar> input;
};

template <typename Scalar>
FieldGradient<Scalar> FieldBackwardPoint(const FieldParamsT<Scalar>& params,
                                         const VectorX<Scalar>& features,
                                         const FieldOutputT<Scalar>& cotangent);

/// Fan-in scaled Gaussian weights, zero biases. Deterministic in `seed`.
FieldParams InitParams(uint64_t seed, int semantic_dim,
                       const EncodingConfig& encoding,
                       int hidden_width = kDefaultHiddenWidth);

/// Evaluates density only (used for grid queries).
template <typename Scalar>
VectorX<Scalar> QueryDensity(const FieldParamsT<Scalar>& params,
                             const Eigen::Ref<const Eigen::Matrix3Xd>& points);

// Checkpoint blob: "SLFP", u32 version, encoding, semantic_dim, width,
// scalar size, count, then little-endian values.
inline constexpr uint32_t kCheckpointVersion = 1;
void WriteCheckpoint(std::ostream& out, const FieldParams& params);
FieldParams ReadCheckpoint(std::istream& in);
void SaveCheckpoint(const std::string& path, const FieldParams& params);
FieldParams LoadCheckpoint(const std::string& path);

}  // namespace scenelabel
