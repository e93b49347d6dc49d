#include "scenelabel/field.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

namespace scenelabel {

std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kUnknownFrame: return "unknown_frame";
    case ErrorCode::kModeMismatch: return "mode_mismatch";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kBusy: return "busy";
    case ErrorCode::kLimit: return "limit_exceeded";
  }
  return "unknown";
}

void ValidatePose(const Pose& pose, double tol) {
  const Mat3 r = pose.linear();
  if (!r.allFinite() || !pose.translation().allFinite()) {
    throw Error(ErrorCode::kInvalidArgument, "pose has non-finite entries");
  }
  if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > tol ||
      std::abs(r.determinant() - 1.0) > tol) {
    throw Error(ErrorCode::kInvalidArgument,
                "pose rotation is not orthonormal with det +1");
  }
}

void EncodingConfig::validate() const {
  if (num_frequency_bands < 0) {
    throw Error(ErrorCode::kInvalidArgument, "num_frequency_bands < 0");
  }
  if (!(scene_bound.extent().array() > 0.0).all()) {
    throw Error(ErrorCode::kInvalidArgument,
                "scene_bound must have positive extent on every axis");
  }
  if (!std::isfinite(base_frequency) || base_frequency <= 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "base_frequency must be > 0");
  }
}

VectorX<double> EncodePosition(const Vec3& p, const EncodingConfig& cfg) {
  MatrixX<double> f;
  EncodePositions<double>(cfg, p, &f);
  return f.col(0);
}

template <typename Scalar>
void EncodePositions(const EncodingConfig& cfg,
                     const Eigen::Ref<const Eigen::Matrix3Xd>& points,
                     MatrixX<Scalar>* features) {
  if (!points.allFinite()) {
    throw Error(ErrorCode::kNonFinite, "non-finite point coordinates");
  }
  const Eigen::Index n = points.cols();
  features->resize(cfg.feature_dim(), n);
  const Vec3 centre = cfg.scene_bound.centre();
  const Vec3 half_inv = (0.5 * cfg.scene_bound.extent()).cwiseInverse();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 x = (points.col(i) - centre).cwiseProduct(half_inv);
    Scalar* out = features->col(i).data();
    int row = 0;
    if (cfg.include_raw_coords) {
      for (int a = 0; a < 3; ++a) out[row++] = static_cast<Scalar>(x[a]);
    }
    double freq = std::numbers::pi * cfg.base_frequency;
    for (int k = 0; k < cfg.num_frequency_bands; ++k, freq *= 2.0) {
      for (int a = 0; a < 3; ++a) {
        out[row + a] = static_cast<Scalar>(std::sin(freq * x[a]));
        out[row + 3 + a] = static_cast<Scalar>(std::cos(freq * x[a]));
      }
      row += 6;
    }
  }
}

template <typename Scalar>
FieldParamsT<Scalar>::FieldParamsT(const EncodingConfig& encoding,
                                   int semantic_dim, int hidden_width)
    : encoding_(encoding), semantic_dim_(semantic_dim),
      hidden_width_(hidden_width) {
  encoding_.validate();
  if (semantic_dim < 1) {
    throw Error(ErrorCode::kInvalidArgument, "semantic_dim must be >= 1");
  }
  if (hidden_width < 1) {
    throw Error(ErrorCode::kInvalidArgument, "hidden_width must be >= 1");
  }
  Eigen::Index offset = 0;
  for (int l = 0; l < kNumLinear; ++l) {
    weight_offset_[l] = offset;
    offset += static_cast<Eigen::Index>(rows(l)) * cols(l);
    bias_offset_[l] = offset;
    offset += rows(l);
  }
  values_ = VectorX<Scalar>::Zero(offset);
}

template <typename Scalar>
int FieldParamsT<Scalar>::rows(int layer) const {
  return layer < kHiddenLayers ? hidden_width_ : output_dim();
}

template <typename Scalar>
int FieldParamsT<Scalar>::cols(int layer) const {
  return layer == 0 ? input_dim() : hidden_width_;
}

namespace {

template <typename Derived>
void SoftplusInPlace(Eigen::ArrayBase<Derived>& z, double beta) {
  using Scalar = typename Derived::Scalar;
  const auto b = static_cast<Scalar>(beta);
  z = ((b * z).max(Scalar(0)) + (Scalar(1) + (-(b * z).abs()).exp()).log()) / b;
}

template <typename Scalar>
void CheckShape(const FieldParamsT<Scalar>& params, Eigen::Index rows,
                const char* what) {
  if (rows != params.input_dim()) {
    throw Error(ErrorCode::kShapeMismatch,
                std::string(what) + ": feature length " + std::to_string(rows) +
                    " does not match input layer " +
                    std::to_string(params.input_dim()));
  }
}

}  // namespace

template <typename Scalar>
void FieldForward(const FieldParamsT<Scalar>& params, MatrixX<Scalar> features,
                  FieldEval<Scalar>* eval) {
  CheckShape(params, features.rows(), "FieldForward");
  eval->input = std::move(features);
  const MatrixX<Scalar>* prev = &eval->input;
  for (int l = 0; l < kHiddenLayers; ++l) {
    MatrixX<Scalar>& h = eval->hidden[l];
    h.noalias() = params.weight(l) * (*prev);
    h.colwise() += params.bias(l);
    auto arr = h.array();
    SoftplusInPlace(arr, kHiddenSoftplusBeta);
    prev = &h;
  }
  MatrixX<Scalar>& out = eval->output;
  out.noalias() = params.weight(kHiddenLayers) * (*prev);
  out.colwise() += params.bias(kHiddenLayers);
  auto colour = out.template topRows<3>().array();
  colour = Scalar(1) / (Scalar(1) + (-colour).exp());
  auto density = out.row(kDensityRow).array();
  SoftplusInPlace(density, 1.0);
}

template <typename Scalar>
void FieldBackward(const FieldParamsT<Scalar>& params,
                   const FieldEval<Scalar>& eval,
                   const MatrixX<Scalar>& output_cotangent,
                   VectorX<Scalar>* param_grad, MatrixX<Scalar>* input_grad) {
  const Eigen::Index n_pts = eval.num_points();
  if (output_cotangent.rows() != params.output_dim() ||
      output_cotangent.cols() != n_pts) {
    throw Error(ErrorCode::kShapeMismatch,
                "FieldBackward: cotangent shape does not match outputs");
  }
  if (param_grad->size() != params.size()) {
    param_grad->setZero(params.size());
  }
  auto weight_grad = [&](int l) {
    return Eigen::Map<MatrixX<Scalar>>(
        param_grad->data() + params.weight_offset(l), params.rows(l),
        params.cols(l));
  };
  auto bias_grad = [&](int l) {
    return Eigen::Map<VectorX<Scalar>>(
        param_grad->data() + params.bias_offset(l), params.rows(l));
  };

  // Cotangent w.r.t. pre-activation outputs.
  MatrixX<Scalar> delta = output_cotangent;
  {
    const auto c = eval.output.template topRows<3>().array();
    delta.template topRows<3>().array() *= c * (Scalar(1) - c);
    const auto rho = eval.output.row(kDensityRow).array();
    delta.row(kDensityRow).array() *= Scalar(1) - (-rho).exp();
  }

  const auto beta = static_cast<Scalar>(kHiddenSoftplusBeta);
  for (int l = kHiddenLayers; l >= 0; --l) {
    const MatrixX<Scalar>& layer_in = l == 0 ? eval.input : eval.hidden[l - 1];
    weight_grad(l).noalias() += delta * layer_in.transpose();
    bias_grad(l) += delta.rowwise().sum();
    if (l == 0) {
      if (input_grad != nullptr) {
        input_grad->noalias() = params.weight(0).transpose() * delta;
      }
      break;
    }
    MatrixX<Scalar> next = params.weight(l).transpose() * delta;
    next.array() *= Scalar(1) - (-beta * layer_in.array()).exp();
    delta = std::move(next);
  }
}

template <typename Scalar>
FieldOutputT<Scalar> FieldForwardPoint(const FieldParamsT<Scalar>& params,
                                       const VectorX<Scalar>& features) {
  FieldEval<Scalar> eval;
  FieldForward(params, MatrixX<Scalar>(features), &eval);
  FieldOutputT<Scalar> out;
  out.colour = eval.output.col(0).template head<3>();
  out.density = eval.output(kDensityRow, 0);
  out.semantic_logits = eval.output.col(0).tail(params.semantic_dim());
  return out;
}

template <typename Scalar>
FieldGradient<Scalar> FieldBackwardPoint(
    const FieldParamsT<Scalar>& params, const VectorX<Scalar>& features,
    const FieldOutputT<Scalar>& cotangent) {
  if (cotangent.semantic_logits.size() != params.semantic_dim()) {
    throw Error(ErrorCode::kShapeMismatch,
                "FieldBackwardPoint: cotangent logits length mismatch");
  }
  FieldEval<Scalar> eval;
  FieldForward(params, MatrixX<Scalar>(features), &eval);
  MatrixX<Scalar> cot(params.output_dim(), 1);
  cot.template topRows<3>() = cotangent.colour;
  cot(kDensityRow, 0) = cotangent.density;
  cot.bottomRows(params.semantic_dim()) = cotangent.semantic_logits;
  FieldGradient<Scalar> grad;
  grad.params = VectorX<Scalar>::Zero(params.size());
  MatrixX<Scalar> input_grad;
  FieldBackward(params, eval, cot, &grad.params, &input_grad);
  grad.input = input_grad.col(0);
  return grad;
}

FieldParams InitParams(uint64_t seed, int semantic_dim,
                       const EncodingConfig& encoding, int hidden_width) {
  FieldParams params(encoding, semantic_dim, hidden_width);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int l = 0; l < FieldParams::kNumLinear; ++l) {
    auto w = params.weight(l);
    const double fan_in = static_cast<double>(params.cols(l));
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        double gain = std::sqrt(2.0);
        if (l == kHiddenLayers) gain = i >= kLogitRow ? 0.1 : 1.0;
        w(i, j) = static_cast<float>(gain * normal(rng) / std::sqrt(fan_in));
      }
    }
  }
  return params;
}

template <typename Scalar>
VectorX<Scalar> QueryDensity(const FieldParamsT<Scalar>& params,
                             const Eigen::Ref<const Eigen::Matrix3Xd>& points) {
  constexpr Eigen::Index kChunk = 8192;
  VectorX<Scalar> out(points.cols());
  FieldEval<Scalar> eval;
  for (Eigen::Index start = 0; start < points.cols(); start += kChunk) {
    const Eigen::Index len = std::min(kChunk, points.cols() - start);
    MatrixX<Scalar> features;
    EncodePositions<Scalar>(params.encoding(),
                            points.middleCols(start, len), &features);
    FieldForward(params, std::move(features), &eval);
    out.segment(start, len) = eval.output.row(kDensityRow).transpose();
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'S', 'L', 'F', 'P'};

template <typename T>
void WriteLe(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T ReadLe(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw Error(ErrorCode::kParse, "checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void WriteCheckpoint(std::ostream& out, const FieldParams& params) {
  out.write(kMagic, 4);
  WriteLe<uint32_t>(out, kCheckpointVersion);
  const EncodingConfig& enc = params.encoding();
  WriteLe<int32_t>(out, enc.num_frequency_bands);
  WriteLe<double>(out, enc.base_frequency);
  WriteLe<uint8_t>(out, enc.include_raw_coords ? 1 : 0);
  for (int a = 0; a < 3; ++a) WriteLe<double>(out, enc.scene_bound.min[a]);
  for (int a = 0; a < 3; ++a) WriteLe<double>(out, enc.scene_bound.max[a]);
  WriteLe<int32_t>(out, params.semantic_dim());
  WriteLe<int32_t>(out, params.hidden_width());
  WriteLe<int32_t>(out, kHiddenLayers);
  WriteLe<uint8_t>(out, sizeof(float));
  WriteLe<uint64_t>(out, static_cast<uint64_t>(params.size()));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    WriteLe<float>(out, params.values()[i]);
  }
  if (!out) throw Error(ErrorCode::kIo, "failed writing checkpoint");
}

FieldParams ReadCheckpoint(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorCode::kParse, "not a field checkpoint (bad magic)");
  }
  const auto version = ReadLe<uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kParse,
                "unsupported checkpoint version " + std::to_string(version));
  }
  EncodingConfig enc;
  enc.num_frequency_bands = ReadLe<int32_t>(in);
  enc.base_frequency = ReadLe<double>(in);
  enc.include_raw_coords = ReadLe<uint8_t>(in) != 0;
  for (int a = 0; a < 3; ++a) enc.scene_bound.min[a] = ReadLe<double>(in);
  for (int a = 0; a < 3; ++a) enc.scene_bound.max[a] = ReadLe<double>(in);
  const int semantic_dim = ReadLe<int32_t>(in);
  const int width = ReadLe<int32_t>(in);
  const int layers = ReadLe<int32_t>(in);
  const int scalar_size = ReadLe<uint8_t>(in);
  if (layers != kHiddenLayers || scalar_size != sizeof(float)) {
    throw Error(ErrorCode::kParse, "checkpoint architecture mismatch");
  }
  FieldParams params(enc, semantic_dim, width);
  const auto count = ReadLe<uint64_t>(in);
  if (count != static_cast<uint64_t>(params.size())) {
    throw Error(ErrorCode::kParse, "checkpoint parameter count mismatch");
  }
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    params.values()[i] = ReadLe<float>(in);
  }
  if (!params.all_finite()) {
    throw Error(ErrorCode::kNonFinite, "checkpoint contains non-finite values");
  }
  return params;
}

void SaveCheckpoint(const std::string& path, const FieldParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path);
  WriteCheckpoint(out, params);
}

FieldParams LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  return ReadCheckpoint(in);
}

#define SCENELABEL_INSTANTIATE(S)                                             \
  template class FieldParamsT<S>;                                             \
  template void EncodePositions<S>(const EncodingConfig&,                     \
                                   const Eigen::Ref<const Eigen::Matrix3Xd>&, \
                                   MatrixX<S>*);                              \
  template void FieldForward<S>(const FieldParamsT<S>&, MatrixX<S>,           \
                                FieldEval<S>*);                               \
  template void FieldBackward<S>(const FieldParamsT<S>&, const FieldEval<S>&, \
                                 const MatrixX<S>&, VectorX<S>*,              \
                                 MatrixX<S>*);                                \
  template FieldOutputT<S> FieldForwardPoint<S>(const FieldParamsT<S>&,       \
                                                const VectorX<S>&);           \
  template FieldGradient<S> FieldBackwardPoint<S>(                            \
      const FieldParamsT<S>&, const VectorX<S>&, const FieldOutputT<S>&);     \
  template VectorX<S> QueryDensity<S>(const FieldParamsT<S>&,                 \
                                      const Eigen::Ref<const Eigen::Matrix3Xd>&);

SCENELABEL_INSTANTIATE(float)
SCENELABEL_INSTANTIATE(double)
SCENELABEL_INSTANTIATE(long double)
#undef SCENELABEL_INSTANTIATE

}  // namespace scenelabel
