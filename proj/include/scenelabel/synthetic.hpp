#pragma once

// Analytic scenes of planes, spheres and boxes rendered with exact depth,
// Lambertian colour and per-pixel ground-truth classes.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scenelabel/field.hpp"
#include "scenelabel/frame.hpp"
#include "scenelabel/render.hpp"

namespace scenelabel {

enum class PrimitiveKind { kPlane, kSphere, kBox };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kPlane;
  std::string name;
  int class_id = 0;
  Vec3 colour = Vec3::Constant(0.5);
  /// World-from-local. Planes are local z = 0 with normal +z; spheres and
  /// boxes are centred on the local origin.
  Pose pose = Pose::Identity();
  /// Plane: half extents in local x, y (0 = unbounded). Sphere: radius in x.
  /// Box: half extents.
  Vec3 size = Vec3::Zero();
};

struct RayHit {
  double range = 0;
  int primitive = -1;
  Vec3 normal = Vec3::Zero();  // world frame, facing the ray origin
};

/// Nearest hit with range in (near, far], or std::nullopt.
std::optional<RayHit> IntersectPrimitive(const Primitive& prim, const Vec3& origin,
                                         const Vec3& direction, double near, double far);

struct SyntheticScene {
  std::vector<std::string> class_names;
  std::vector<Primitive> primitives;
  CameraIntrinsics intrinsics;
  std::vector<Pose> trajectory;
  /// Indices into the trajectory used as keyframes; others are held out.
  std::vector<int> keyframe_indices;
  Aabb bound;
  Vec3 light_direction = Vec3(0.3, -0.5, 1.0).normalized();
  double ambient = 0.35;
  double depth_noise_sigma = 0.0;
  double max_range = 10.0;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  /// GT label of pixels that hit nothing.
  int background_class() const { return num_classes(); }
  /// Throws kInvalidArgument unless classes are dense and the trajectory is
  /// nonempty.
  void validate() const;
};

struct SyntheticView {
  Frame frame;
  LabelImage labels;  // class per pixel, background_class() for misses
};

std::optional<RayHit> IntersectScene(const SyntheticScene& scene, const Vec3& origin,
                                     const Vec3& direction);

SyntheticView RenderSynthetic(const SyntheticScene& scene, int trajectory_index,
                              uint64_t noise_seed = 0);

/// Camera at `eye` looking at `target`, world up +z; image x right, y down.
Pose LookAt(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ());

/// Floor, box and sphere seen from six keyframes on a ring (160x120).
SyntheticScene ToyScene();

/// Floor, wall, box and sphere; keyframes plus held-out views (160x120).
SyntheticScene DeskScene();

SyntheticScene SceneFromJson(const nlohmann::json& j);
nlohmann::json SceneToJson(const SyntheticScene& scene);
SyntheticScene LoadScene(const std::string& path);
/// Built-in name ("toy", "desk") or a path to a scene file.
SyntheticScene ResolveScene(const std::string& name_or_path);

/// Signed distance of a point to the primitive surface (negative inside
/// spheres and boxes; signed by the normal for planes).
double PrimitiveSignedDistance(const Primitive& prim, const Vec3& p);

}  // namespace scenelabel
