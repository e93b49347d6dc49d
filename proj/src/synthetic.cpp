#include "scenelabel/synthetic.hpp"

#include <cmath>
#include <fstream>
#include <random>

namespace scenelabel {

namespace {

constexpr double kPi = 3.14159265358979323846;

Vec3 FaceRay(Vec3 n, const Vec3& direction) {
  if (n.dot(direction) > 0) n = -n;
  return n;
}

}  // namespace

std::optional<RayHit> IntersectPrimitive(const Primitive& prim, const Vec3& origin,
                                         const Vec3& direction, double near,
                                         double far) {
  const Mat3 r = prim.pose.linear();
  const Vec3 o = r.transpose() * (origin - prim.pose.translation());
  const Vec3 d = r.transpose() * direction;
  RayHit hit;
  switch (prim.kind) {
    case PrimitiveKind::kPlane: {
      if (std::abs(d.z()) < 1e-12) return std::nullopt;
      const double t = -o.z() / d.z();
      if (!(t > near && t <= far)) return std::nullopt;
      const Vec3 p = o + t * d;
      if (prim.size.x() > 0 && std::abs(p.x()) > prim.size.x()) return std::nullopt;
      if (prim.size.y() > 0 && std::abs(p.y()) > prim.size.y()) return std::nullopt;
      hit.range = t;
      hit.normal = FaceRay(r.col(2), direction);
      return hit;
    }
    case PrimitiveKind::kSphere: {
      const double radius = prim.size.x();
      const double b = o.dot(d);
      const double c = o.squaredNorm() - radius * radius;
      const double disc = b * b - c;
      if (disc < 0) return std::nullopt;
      const double s = std::sqrt(disc);
      double t = -b - s;
      if (!(t > near)) t = -b + s;
      if (!(t > near && t <= far)) return std::nullopt;
      hit.range = t;
      hit.normal = FaceRay(r * (o + t * d).normalized(), direction);
      return hit;
    }
    case PrimitiveKind::kBox: {
      double t_enter = -INFINITY, t_exit = INFINITY;
      int axis_enter = 0, axis_exit = 0;
      for (int a = 0; a < 3; ++a) {
        const double h = prim.size[a];
        if (std::abs(d[a]) < 1e-15) {
          if (std::abs(o[a]) > h) return std::nullopt;
          continue;
        }
        double t0 = (-h - o[a]) / d[a], t1 = (h - o[a]) / d[a];
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > t_enter) {
          t_enter = t0;
          axis_enter = a;
        }
        if (t1 < t_exit) {
          t_exit = t1;
          axis_exit = a;
        }
      }
      if (t_enter > t_exit) return std::nullopt;
      double t = t_enter;
      int axis = axis_enter;
      if (!(t > near)) {
        t = t_exit;
        axis = axis_exit;
      }
      if (!(t > near && t <= far)) return std::nullopt;
      hit.range = t;
      hit.normal = FaceRay(r.col(axis), direction);
      return hit;
    }
  }
  return std::nullopt;
}

double PrimitiveSignedDistance(const Primitive& prim, const Vec3& p_world) {
  const Vec3 p = prim.pose.inverse() * p_world;
  switch (prim.kind) {
    case PrimitiveKind::kPlane: {
      const double dx = prim.size.x() > 0 ? std::max(std::abs(p.x()) - prim.size.x(), 0.0) : 0.0;
      const double dy = prim.size.y() > 0 ? std::max(std::abs(p.y()) - prim.size.y(), 0.0) : 0.0;
      const double dist = std::sqrt(dx * dx + dy * dy + p.z() * p.z());
      return p.z() < 0 ? -dist : dist;
    }
    case PrimitiveKind::kSphere:
      return p.norm() - prim.size.x();
    case PrimitiveKind::kBox: {
      const Vec3 q = p.cwiseAbs() - prim.size;
      return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
  }
  return INFINITY;
}

void SyntheticScene::validate() const {
  intrinsics.validate();
  if (trajectory.empty()) throw Error(ErrorCode::kInvalidArgument, "empty trajectory");
  std::vector<bool> used(class_names.size(), false);
  for (const Primitive& p : primitives) {
    if (p.class_id < 0 || p.class_id >= num_classes()) {
      throw Error(ErrorCode::kInvalidArgument, "primitive class out of range");
    }
    used[p.class_id] = true;
    ValidatePose(p.pose);
  }
  for (bool u : used) {
    if (!u) throw Error(ErrorCode::kInvalidArgument, "primitive classes are not dense");
  }
  for (int k : keyframe_indices) {
    if (k < 0 || k >= static_cast<int>(trajectory.size())) {
      throw Error(ErrorCode::kOutOfRange, "keyframe index outside trajectory");
    }
  }
  for (const Pose& pose : trajectory) ValidatePose(pose);
}

std::optional<RayHit> IntersectScene(const SyntheticScene& scene, const Vec3& origin,
                                     const Vec3& direction) {
  std::optional<RayHit> best;
  for (size_t i = 0; i < scene.primitives.size(); ++i) {
    const double far = best ? best->range : scene.max_range;
    auto hit = IntersectPrimitive(scene.primitives[i], origin, direction, 0.0, far);
    if (hit && (!best || hit->range < best->range)) {
      best = hit;
      best->primitive = static_cast<int>(i);
    }
  }
  return best;
}

SyntheticView RenderSynthetic(const SyntheticScene& scene, int index,
                              uint64_t noise_seed) {
  if (index < 0 || index >= static_cast<int>(scene.trajectory.size())) {
    throw Error(ErrorCode::kOutOfRange, "trajectory index out of range");
  }
  const CameraIntrinsics& k = scene.intrinsics;
  SyntheticView view;
  view.frame.intrinsics = k;
  view.frame.world_from_camera = scene.trajectory[index];
  view.frame.colour = ColourImage(k.width, k.height, 3);
  view.frame.depth = DepthImage(k.width, k.height, 1);
  view.labels = LabelImage(k.width, k.height, 1, scene.background_class());
  std::mt19937_64 rng(noise_seed * 0x9E3779B97F4A7C15ull + static_cast<uint64_t>(index));
  std::normal_distribution<double> noise(0.0, scene.depth_noise_sigma);
  const Vec3 light = scene.light_direction.normalized();
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      const Ray ray = PixelToRay(u, v, k, view.frame.world_from_camera, 0.0, scene.max_range);
      const auto hit = IntersectScene(scene, ray.origin, ray.direction);
      if (!hit) continue;
      const Primitive& prim = scene.primitives[hit->primitive];
      double depth = hit->range / ray.range_per_depth;
      if (scene.depth_noise_sigma > 0) depth = std::max(0.0, depth + noise(rng));
      view.frame.depth.at(u, v) = static_cast<float>(depth);
      const double shade =
          scene.ambient + (1.0 - scene.ambient) * std::max(0.0, hit->normal.dot(light));
      for (int c = 0; c < 3; ++c) {
        view.frame.colour.at(u, v, c) =
            static_cast<float>(std::clamp(prim.colour[c] * shade, 0.0, 1.0));
      }
      view.labels.at(u, v) = prim.class_id;
    }
  }
  return view;
}

Pose LookAt(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) throw Error(ErrorCode::kInvalidArgument, "look-at is parallel to up");
  x.normalize();
  const Vec3 y = z.cross(x);
  Pose pose = Pose::Identity();
  pose.linear().col(0) = x;
  pose.linear().col(1) = y;
  pose.linear().col(2) = z;
  pose.translation() = eye;
  return pose;
}

namespace {

Primitive MakePrimitive(PrimitiveKind kind, std::string name, int cls, Vec3 colour,
                        Vec3 position, Vec3 size, double yaw = 0.0,
                        Mat3 rotation = Mat3::Identity()) {
  Primitive p;
  p.kind = kind;
  p.name = std::move(name);
  p.class_id = cls;
  p.colour = colour;
  p.pose = Pose::Identity();
  p.pose.linear() = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix() * rotation;
  p.pose.translation() = position;
  p.size = size;
  return p;
}

}  // namespace

SyntheticScene ToyScene() {
  SyntheticScene s;
  s.class_names = {"floor", "box", "sphere"};
  s.primitives = {
      MakePrimitive(PrimitiveKind::kPlane, "floor", 0, Vec3(0.62, 0.6, 0.55),
                    Vec3::Zero(), Vec3(3.0, 3.0, 0.0)),
      MakePrimitive(PrimitiveKind::kBox, "box", 1, Vec3(0.8, 0.25, 0.2),
                    Vec3(-0.35, -0.05, 0.2), Vec3(0.18, 0.18, 0.2), 0.35),
      MakePrimitive(PrimitiveKind::kSphere, "sphere", 2, Vec3(0.2, 0.35, 0.8),
                    Vec3(0.35, 0.1, 0.22), Vec3(0.22, 0.0, 0.0)),
  };
  s.intrinsics = {140.0, 140.0, 79.5, 59.5, 160, 120};
  const Vec3 target(0.0, 0.0, 0.12);
  for (int i = 0; i < 6; ++i) {
    const double a = 2.0 * kPi * i / 6.0 + 0.3;
    const double height = i % 2 ? 1.25 : 1.4;
    s.trajectory.push_back(LookAt(Vec3(1.05 * std::cos(a), 1.05 * std::sin(a), height), target));
    s.keyframe_indices.push_back(i);
  }
  s.bound.min = Vec3(-2.5, -2.5, -0.5);
  s.bound.max = Vec3(2.5, 2.5, 2.0);
  return s;
}

SyntheticScene DeskScene() {
  SyntheticScene s;
  s.class_names = {"floor", "wall", "box", "sphere"};
  const Mat3 wall_rot = Eigen::AngleAxisd(kPi / 2, Vec3::UnitX()).toRotationMatrix();
  s.primitives = {
      MakePrimitive(PrimitiveKind::kPlane, "floor", 0, Vec3(0.55, 0.45, 0.35),
                    Vec3::Zero(), Vec3::Zero()),
      // Local +z of the wall points along -y, towards the cameras.
      MakePrimitive(PrimitiveKind::kPlane, "wall", 1, Vec3(0.85, 0.84, 0.78),
                    Vec3(0.0, 0.9, 0.0), Vec3::Zero(), 0.0, wall_rot),
      MakePrimitive(PrimitiveKind::kBox, "box", 2, Vec3(0.8, 0.25, 0.2),
                    Vec3(-0.3, 0.3, 0.18), Vec3(0.16, 0.16, 0.18), 0.45),
      MakePrimitive(PrimitiveKind::kSphere, "sphere", 3, Vec3(0.2, 0.35, 0.8),
                    Vec3(0.32, 0.2, 0.2), Vec3(0.2, 0.0, 0.0)),
  };
  s.intrinsics = {140.0, 140.0, 79.5, 59.5, 160, 120};
  const Vec3 centre(0.0, 0.3, 0.0);
  const Vec3 target(0.0, 0.35, 0.25);
  const int views = 12;
  for (int i = 0; i < views; ++i) {
    const double a = (-30.0 + 60.0 * i / (views - 1)) * kPi / 180.0;
    const double height = i % 2 ? 0.95 : 0.8;
    const Vec3 eye = centre + Vec3(1.3 * std::sin(a), -1.3 * std::cos(a), height);
    s.trajectory.push_back(LookAt(eye, target));
    if (i % 2 == 0) s.keyframe_indices.push_back(i);
  }
  s.bound.min = Vec3(-3.0, -1.5, -0.3);
  s.bound.max = Vec3(3.0, 1.1, 2.5);
  return s;
}

namespace {

nlohmann::json VecJson(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

Vec3 JsonVec(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::kParse, "expected 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

nlohmann::json PoseJson(const Pose& p) {
  nlohmann::json out = nlohmann::json::array();
  const Eigen::Matrix4d m = p.matrix();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) out.push_back(m(r, c));
  }
  return out;
}

Pose JsonPose(const nlohmann::json& j) {
  if (!j.is_array() || (j.size() != 12 && j.size() != 16)) {
    throw Error(ErrorCode::kParse, "pose needs 12 or 16 numbers");
  }
  Pose p = Pose::Identity();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) p.matrix()(r, c) = j[r * 4 + c].get<double>();
  }
  ValidatePose(p);
  return p;
}

std::string_view KindName(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::kPlane: return "plane";
    case PrimitiveKind::kSphere: return "sphere";
    case PrimitiveKind::kBox: return "box";
  }
  return "plane";
}

PrimitiveKind ParseKind(const std::string& s) {
  if (s == "plane") return PrimitiveKind::kPlane;
  if (s == "sphere") return PrimitiveKind::kSphere;
  if (s == "box") return PrimitiveKind::kBox;
  throw Error(ErrorCode::kParse, "unknown primitive kind '" + s + "'");
}

}  // namespace

nlohmann::json SceneToJson(const SyntheticScene& s) {
  nlohmann::json j;
  j["classes"] = s.class_names;
  const auto& k = s.intrinsics;
  j["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx},
                     {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
  j["bound"] = {{"min", VecJson(s.bound.min)}, {"max", VecJson(s.bound.max)}};
  j["light"] = VecJson(s.light_direction);
  j["ambient"] = s.ambient;
  j["depth_noise"] = s.depth_noise_sigma;
  j["max_range"] = s.max_range;
  j["primitives"] = nlohmann::json::array();
  for (const Primitive& p : s.primitives) {
    j["primitives"].push_back({{"kind", KindName(p.kind)},
                               {"name", p.name},
                               {"class", p.class_id},
                               {"colour", VecJson(p.colour)},
                               {"pose", PoseJson(p.pose)},
                               {"size", VecJson(p.size)}});
  }
  j["trajectory"] = nlohmann::json::array();
  for (const Pose& p : s.trajectory) j["trajectory"].push_back({{"pose", PoseJson(p)}});
  j["keyframes"] = s.keyframe_indices;
  return j;
}

SyntheticScene SceneFromJson(const nlohmann::json& j) {
  try {
    SyntheticScene s;
    s.class_names = j.at("classes").get<std::vector<std::string>>();
    const auto& k = j.at("intrinsics");
    s.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(),
                    k.at("cx").get<double>(), k.at("cy").get<double>(),
                    k.at("width").get<int>(),  k.at("height").get<int>()};
    s.bound.min = JsonVec(j.at("bound").at("min"));
    s.bound.max = JsonVec(j.at("bound").at("max"));
    if (j.contains("light")) s.light_direction = JsonVec(j["light"]).normalized();
    s.ambient = j.value("ambient", s.ambient);
    s.depth_noise_sigma = j.value("depth_noise", 0.0);
    s.max_range = j.value("max_range", s.max_range);
    for (const auto& p : j.at("primitives")) {
      Primitive prim;
      prim.kind = ParseKind(p.at("kind").get<std::string>());
      prim.name = p.value("name", std::string(KindName(prim.kind)));
      prim.class_id = p.at("class").get<int>();
      prim.colour = JsonVec(p.at("colour"));
      if (p.contains("pose")) {
        prim.pose = JsonPose(p["pose"]);
      } else {
        prim.pose = Pose::Identity();
        if (p.contains("position")) prim.pose.translation() = JsonVec(p["position"]);
        if (p.contains("yaw_degrees")) {
          prim.pose.linear() = Eigen::AngleAxisd(p["yaw_degrees"].get<double>() * kPi / 180.0,
                                                 Vec3::UnitZ()).toRotationMatrix();
        }
      }
      prim.size = JsonVec(p.at("size"));
      s.primitives.push_back(prim);
    }
    for (const auto& t : j.at("trajectory")) {
      if (t.contains("pose")) {
        s.trajectory.push_back(JsonPose(t["pose"]));
      } else {
        s.trajectory.push_back(LookAt(JsonVec(t.at("eye")), JsonVec(t.at("target"))));
      }
    }
    if (j.contains("keyframes")) {
      s.keyframe_indices = j["keyframes"].get<std::vector<int>>();
    } else {
      for (size_t i = 0; i < s.trajectory.size(); ++i) {
        s.keyframe_indices.push_back(static_cast<int>(i));
      }
    }
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("scene file: ") + e.what());
  }
}

SyntheticScene LoadScene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open scene file " + path);
  try {
    return SceneFromJson(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("scene file: ") + e.what());
  }
}

SyntheticScene ResolveScene(const std::string& name_or_path) {
  if (name_or_path == "toy") return ToyScene();
  if (name_or_path == "desk") return DeskScene();
  return LoadScene(name_or_path);
}

}  // namespace scenelabel
