#include "scenelabel/frame.hpp"

#include <cmath>

namespace scenelabel {

void Frame::validate() const {
  intrinsics.validate();
  const int w = intrinsics.width, h = intrinsics.height;
  if (colour.empty() || colour.channels != 3) {
    throw Error(ErrorCode::kInvalidArgument, "frame is missing a colour image");
  }
  if (depth.empty() || depth.channels != 1) {
    throw Error(ErrorCode::kInvalidArgument, "frame is missing a depth image");
  }
  if (colour.width != w || colour.height != h || depth.width != w ||
      depth.height != h) {
    throw Error(ErrorCode::kShapeMismatch,
                "colour/depth dimensions do not match intrinsics");
  }
  ValidatePose(world_from_camera);
}

std::string_view AnnotationSourceName(AnnotationSource source) {
  return source == AnnotationSource::kClick ? "click" : "query_answer";
}

AnnotationSource ParseAnnotationSource(std::string_view name) {
  if (name == "click") return AnnotationSource::kClick;
  if (name == "query_answer") return AnnotationSource::kQueryAnswer;
  throw Error(ErrorCode::kParse, "unknown annotation source");
}

Frame ScaleFrame(const Frame& frame, double scale) {
  if (!(scale > 0 && scale <= 1)) {
    throw Error(ErrorCode::kInvalidArgument, "scale must be in (0, 1]");
  }
  if (scale == 1.0) return frame;
  Frame out;
  out.world_from_camera = frame.world_from_camera;
  out.intrinsics = frame.intrinsics.scaled(scale);
  const int w = out.intrinsics.width, h = out.intrinsics.height;
  const int src_w = frame.intrinsics.width, src_h = frame.intrinsics.height;
  out.colour = ColourImage(w, h, 3);
  out.depth = DepthImage(w, h, 1);
  std::vector<int> count(static_cast<size_t>(w) * h, 0);
  for (int y = 0; y < src_h; ++y) {
    const int oy = std::min(h - 1, static_cast<int>(y * scale));
    for (int x = 0; x < src_w; ++x) {
      const int ox = std::min(w - 1, static_cast<int>(x * scale));
      for (int c = 0; c < 3; ++c) out.colour.at(ox, oy, c) += frame.colour.at(x, y, c);
      ++count[static_cast<size_t>(oy) * w + ox];
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int n = std::max(1, count[static_cast<size_t>(y) * w + x]);
      for (int c = 0; c < 3; ++c) out.colour.at(x, y, c) /= static_cast<float>(n);
      // Depth takes the source pixel nearest the output pixel centre.
      const int sx = std::min(src_w - 1, static_cast<int>((x + 0.5) / scale));
      const int sy = std::min(src_h - 1, static_cast<int>((y + 0.5) / scale));
      out.depth.at(x, y) = frame.depth.at(sx, sy);
    }
  }
  return out;
}

}  // namespace scenelabel
