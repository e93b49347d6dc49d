#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace scenelabel {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
/// World-from-camera rigid transform.
using Pose = Eigen::Isometry3d;

enum class ErrorCode {
  kInvalidArgument,
  kOutOfRange,
  kShapeMismatch,
  kNonFinite,
  kUnknownFrame,
  kModeMismatch,
  kNotFound,
  kIo,
  kParse,
  kBusy,
  kLimit,
};

std::string_view ErrorCodeName(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

/// Row-major interleaved image; (u, v) = (column, row), origin top-left.
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c, T fill = T{})
      : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, fill) {}

  bool empty() const { return data.empty(); }
  size_t index(int u, int v, int c = 0) const {
    return (static_cast<size_t>(v) * width + u) * channels + c;
  }
  T& at(int u, int v, int c = 0) { return data[index(u, v, c)]; }
  const T& at(int u, int v, int c = 0) const { return data[index(u, v, c)]; }
  bool contains(int u, int v) const {
    return u >= 0 && v >= 0 && u < width && v < height;
  }
};

using ColourImage = Image<float>;   // 3 channels in [0,1]
using DepthImage = Image<float>;    // metres, 0 = invalid
using LabelImage = Image<int32_t>;  // -1 = unlabelled / ignore
using Rgb8Image = Image<uint8_t>;

struct Rgb8 {
  uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb8&) const = default;
};

/// Throws kInvalidArgument unless R is orthonormal with det +1 within tol.
void ValidatePose(const Pose& pose, double tol = 1e-6);

}  // namespace scenelabel
