#pragma once

#include <string>
#include <variant>

#include "scenelabel/common.hpp"
#include "scenelabel/render.hpp"
#include "scenelabel/semantics.hpp"

namespace scenelabel {

/// One posed RGB-D observation.
struct Frame {
  ColourImage colour;  // w x h x 3 in [0,1]
  DepthImage depth;    // metres, 0 = invalid
  Pose world_from_camera = Pose::Identity();
  CameraIntrinsics intrinsics;

  /// Throws kInvalidArgument when images are missing or inconsistent.
  void validate() const;
};

struct Keyframe {
  int id = 0;
  Frame frame;

  int width() const { return frame.intrinsics.width; }
  int height() const { return frame.intrinsics.height; }
};

using SemanticPayload = std::variant<FlatLabel, HierLabel>;

enum class AnnotationSource { kClick, kQueryAnswer };

std::string_view AnnotationSourceName(AnnotationSource source);
AnnotationSource ParseAnnotationSource(std::string_view name);

struct Annotation {
  int keyframe = 0;
  int u = 0;
  int v = 0;
  SemanticPayload payload;
  double timestamp = 0;
  AnnotationSource source = AnnotationSource::kClick;

  bool operator==(const Annotation&) const = default;
};

/// Nearest-neighbour / box-filter downscale of a frame by `scale` in (0, 1].
Frame ScaleFrame(const Frame& frame, double scale);

}  // namespace scenelabel
