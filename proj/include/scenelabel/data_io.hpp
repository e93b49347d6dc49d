#pragma once

// Posed RGB-D sequences on disk, class remapping tables and the scripted
// click policies that stand in for a human annotator.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scenelabel/frame.hpp"

namespace scenelabel {

/// Manifest text file, one directive per line ('#' starts a comment):
///
///   intrinsics <fx> <fy> <cx> <cy> <width> <height>
///   depth_scale <metres per raw unit>
///   poses <file>              one pose per line, 12 or 16 numbers row-major
///   frame <colour> <depth>    one per frame, paths relative to the manifest
///
/// Colour images are 8-bit RGB, depth images 16-bit single channel with 0
/// marking invalid depth.
struct SequenceManifest {
  struct Record {
    std::string colour_path;
    std::string depth_path;
    Pose pose = Pose::Identity();
  };
  std::string directory;
  CameraIntrinsics intrinsics;
  double depth_scale = 0.001;
  std::vector<Record> records;
};

/// Parses "12 or 16 numbers" into a rigid pose (kParse on a bad count or a
/// bad last row, kInvalidArgument when the rotation is not orthonormal within
/// `tol`). Accepted rotations are projected onto SO(3).
Pose ParsePose(std::span<const double> values, double tol = 1e-4);
/// 12 row-major numbers at full round-trip precision.
std::string FormatPose(const Pose& pose);

SequenceManifest ReadManifest(const std::string& path);

/// Yields frames in manifest order, reading images on demand.
class SequenceReader {
 public:
  explicit SequenceReader(SequenceManifest manifest);
  explicit SequenceReader(const std::string& manifest_path)
      : SequenceReader(ReadManifest(manifest_path)) {}

  size_t size() const { return manifest_.records.size(); }
  const SequenceManifest& manifest() const { return manifest_; }
  /// Loads record `index` (kIo on a missing file, kShapeMismatch when image
  /// sizes disagree with the intrinsics).
  Frame load(size_t index) const;
  /// Next frame in order, or std::nullopt at the end.
  std::optional<Frame> next();

 private:
  SequenceManifest manifest_;
  size_t cursor_ = 0;
};

/// Writes frames as PNGs plus manifest.txt and poses.txt under `directory`.
/// Returns the manifest path.
std::string WriteSequence(const std::string& directory, std::span<const Frame> frames,
                          double depth_scale = 0.001);

/// Plain-text "source target" pairs, one per line; '#' comments.
std::map<int, int> LoadClassRemap(const std::string& path);
/// Applies the table; labels absent from it become `unmapped`.
LabelImage RemapLabels(const LabelImage& labels, const std::map<int, int>& table,
                       int unmapped = -1);

// ---------------------------------------------------------- scripted clicks

enum class ClickPolicy { kCentroid, kErrorGuided };

std::string_view ClickPolicyName(ClickPolicy policy);
ClickPolicy ParseClickPolicy(std::string_view name);

struct ScriptedClick {
  int keyframe = 0;
  int u = 0;
  int v = 0;
  int class_id = 0;
  bool operator==(const ScriptedClick&) const = default;
};

/// Radius (pixels) around earlier clicks that later clicks avoid.
inline constexpr double kClickSpacing = 8.0;

/// Centroid policy: classes are visited round-robin; each visit clicks the
/// interior-most pixel (maximum distance to the region boundary) of the
/// largest connected GT region of that class over all keyframes, with the
/// neighbourhood of earlier clicks removed. Labels outside [0, num_classes)
/// are never clicked. Ties are broken by `rng`.
std::vector<ScriptedClick> CentroidClicks(std::span<const LabelImage> gt, int num_classes,
                                          int budget, std::mt19937_64* rng,
                                          std::span<const ScriptedClick> previous = {});

/// Current predictions on a strided grid: grid cell (i, j) is pixel
/// (i * stride, j * stride).
struct PredictionView {
  int stride = 1;
  LabelImage labels;
  Image<float> confidence;  // probability of the predicted label
  Image<float> margin;      // p_(1) - p_(2)
};

/// Error-guided policy: the GT-labelled grid pixel that is misclassified with
/// the highest confidence; when nothing is misclassified, the correct pixel
/// with the lowest margin. Pixels near earlier clicks are skipped. Returns
/// std::nullopt when no pixel is eligible.
std::optional<ScriptedClick> ErrorGuidedClick(std::span<const LabelImage> gt,
                                              std::span<const PredictionView> predictions,
                                              int num_classes,
                                              std::span<const ScriptedClick> previous,
                                              std::mt19937_64* rng);

}  // namespace scenelabel
