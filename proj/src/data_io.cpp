#include "scenelabel/data_io.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <Eigen/SVD>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace scenelabel {

namespace fs = std::filesystem;

Pose ParsePose(std::span<const double> values, double tol) {
  if (values.size() != 12 && values.size() != 16) {
    throw Error(ErrorCode::kParse, "pose needs 12 or 16 numbers, got " +
                                       std::to_string(values.size()));
  }
  for (double x : values) {
    if (!std::isfinite(x)) throw Error(ErrorCode::kParse, "non-finite pose entry");
  }
  if (values.size() == 16) {
    const double last[4] = {0, 0, 0, 1};
    for (int c = 0; c < 4; ++c) {
      if (std::abs(values[12 + c] - last[c]) > tol) {
        throw Error(ErrorCode::kParse, "pose last row must be 0 0 0 1");
      }
    }
  }
  Pose pose = Pose::Identity();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) pose.matrix()(r, c) = values[r * 4 + c];
  }
  ValidatePose(pose, tol);
  const Mat3 r = pose.linear();
  if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > 0) {
    Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
    pose.linear() = svd.matrixU() * svd.matrixV().transpose();
  }
  return pose;
}

std::string FormatPose(const Pose& pose) {
  std::string out;
  char buf[32];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", pose.matrix()(r, c));
      if (!out.empty()) out += ' ';
      out += buf;
    }
  }
  return out;
}

namespace {

std::vector<double> ReadNumbers(std::istringstream& in) {
  std::vector<double> values;
  std::string tok;
  while (in >> tok) {
    try {
      size_t used = 0;
      values.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kParse, "bad number '" + tok + "'");
    }
  }
  return values;
}

std::string StripComment(const std::string& line) {
  const auto hash = line.find('#');
  return hash == std::string::npos ? line : line.substr(0, hash);
}

}  // namespace

SequenceManifest ReadManifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path);
  SequenceManifest m;
  m.directory = fs::path(path).parent_path().string();
  std::vector<std::pair<std::string, std::string>> images;
  std::vector<Pose> poses;
  bool have_intrinsics = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(StripComment(line));
    std::string key;
    if (!(ls >> key)) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    if (key == "intrinsics") {
      const auto v = ReadNumbers(ls);
      if (v.size() != 6) throw Error(ErrorCode::kParse, where + ": intrinsics needs 6 values");
      m.intrinsics = {v[0], v[1], v[2], v[3], static_cast<int>(v[4]), static_cast<int>(v[5])};
      m.intrinsics.validate();
      have_intrinsics = true;
    } else if (key == "depth_scale") {
      const auto v = ReadNumbers(ls);
      if (v.size() != 1 || !(v[0] > 0)) {
        throw Error(ErrorCode::kParse, where + ": depth_scale must be one positive value");
      }
      m.depth_scale = v[0];
    } else if (key == "poses") {
      std::string file;
      ls >> file;
      std::ifstream ps((fs::path(m.directory) / file).string());
      if (!ps) throw Error(ErrorCode::kIo, where + ": cannot open pose file " + file);
      std::string pl;
      while (std::getline(ps, pl)) {
        std::istringstream pls(StripComment(pl));
        const auto v = ReadNumbers(pls);
        if (v.empty()) continue;
        poses.push_back(ParsePose(v));
      }
    } else if (key == "frame") {
      std::string colour, depth;
      if (!(ls >> colour >> depth)) {
        throw Error(ErrorCode::kParse, where + ": frame needs colour and depth paths");
      }
      images.emplace_back(colour, depth);
    } else {
      throw Error(ErrorCode::kParse, where + ": unknown directive '" + key + "'");
    }
  }
  if (!have_intrinsics) throw Error(ErrorCode::kParse, path + ": missing intrinsics");
  if (images.size() != poses.size()) {
    throw Error(ErrorCode::kParse, path + ": " + std::to_string(images.size()) +
                                       " frames but " + std::to_string(poses.size()) +
                                       " poses");
  }
  for (size_t i = 0; i < images.size(); ++i) {
    m.records.push_back({images[i].first, images[i].second, poses[i]});
  }
  return m;
}

SequenceReader::SequenceReader(SequenceManifest manifest) : manifest_(std::move(manifest)) {}

Frame SequenceReader::load(size_t index) const {
  if (index >= manifest_.records.size()) {
    throw Error(ErrorCode::kOutOfRange, "sequence index out of range");
  }
  const auto& rec = manifest_.records[index];
  const auto resolve = [&](const std::string& p) {
    return (fs::path(manifest_.directory) / p).string();
  };
  const std::string colour_path = resolve(rec.colour_path);
  const std::string depth_path = resolve(rec.depth_path);
  cv::Mat colour = cv::imread(colour_path, cv::IMREAD_COLOR);
  if (colour.empty()) throw Error(ErrorCode::kIo, "cannot read " + colour_path);
  cv::Mat depth = cv::imread(depth_path, cv::IMREAD_ANYDEPTH);
  if (depth.empty()) throw Error(ErrorCode::kIo, "cannot read " + depth_path);
  if (depth.type() != CV_16UC1) {
    throw Error(ErrorCode::kParse, depth_path + " is not a 16-bit single-channel image");
  }
  const CameraIntrinsics& k = manifest_.intrinsics;
  if (colour.cols != k.width || colour.rows != k.height || depth.cols != k.width ||
      depth.rows != k.height) {
    throw Error(ErrorCode::kShapeMismatch, "image size differs from intrinsics in record " +
                                               std::to_string(index));
  }
  Frame f;
  f.intrinsics = k;
  f.world_from_camera = rec.pose;
  f.colour = ColourImage(k.width, k.height, 3);
  f.depth = DepthImage(k.width, k.height, 1);
  for (int v = 0; v < k.height; ++v) {
    const auto* crow = colour.ptr<cv::Vec3b>(v);
    const auto* drow = depth.ptr<uint16_t>(v);
    for (int u = 0; u < k.width; ++u) {
      for (int c = 0; c < 3; ++c) f.colour.at(u, v, c) = crow[u][2 - c] / 255.0f;
      f.depth.at(u, v) = static_cast<float>(drow[u] * manifest_.depth_scale);
    }
  }
  return f;
}

std::optional<Frame> SequenceReader::next() {
  if (cursor_ >= manifest_.records.size()) return std::nullopt;
  return load(cursor_++);
}

std::string WriteSequence(const std::string& directory, std::span<const Frame> frames,
                          double depth_scale) {
  if (frames.empty()) throw Error(ErrorCode::kInvalidArgument, "no frames to write");
  if (!(depth_scale > 0)) throw Error(ErrorCode::kInvalidArgument, "depth scale must be > 0");
  const fs::path root(directory);
  fs::create_directories(root / "colour");
  fs::create_directories(root / "depth");
  const CameraIntrinsics& k = frames[0].intrinsics;
  std::ofstream manifest(root / "manifest.txt");
  std::ofstream poses(root / "poses.txt");
  char buf[160];
  std::snprintf(buf, sizeof buf, "intrinsics %.17g %.17g %.17g %.17g %d %d\n", k.fx, k.fy,
                k.cx, k.cy, k.width, k.height);
  manifest << buf;
  std::snprintf(buf, sizeof buf, "depth_scale %.17g\n", depth_scale);
  manifest << buf << "poses poses.txt\n";
  for (size_t i = 0; i < frames.size(); ++i) {
    const Frame& f = frames[i];
    f.validate();
    if (!(f.intrinsics == k)) {
      throw Error(ErrorCode::kShapeMismatch, "frames of one sequence must share intrinsics");
    }
    cv::Mat colour(k.height, k.width, CV_8UC3), depth(k.height, k.width, CV_16UC1);
    for (int v = 0; v < k.height; ++v) {
      for (int u = 0; u < k.width; ++u) {
        for (int c = 0; c < 3; ++c) {
          colour.at<cv::Vec3b>(v, u)[2 - c] = static_cast<uint8_t>(
              std::lround(std::clamp(f.colour.at(u, v, c), 0.0f, 1.0f) * 255.0f));
        }
        const double raw = std::round(f.depth.at(u, v) / depth_scale);
        depth.at<uint16_t>(v, u) = static_cast<uint16_t>(std::clamp(raw, 0.0, 65535.0));
      }
    }
    std::snprintf(buf, sizeof buf, "%06zu.png", i);
    const std::string name = buf;
    if (!cv::imwrite((root / "colour" / name).string(), colour) ||
        !cv::imwrite((root / "depth" / name).string(), depth)) {
      throw Error(ErrorCode::kIo, "cannot write images under " + directory);
    }
    manifest << "frame colour/" << name << " depth/" << name << "\n";
    poses << FormatPose(f.world_from_camera) << "\n";
  }
  if (!manifest || !poses) throw Error(ErrorCode::kIo, "cannot write manifest");
  return (root / "manifest.txt").string();
}

std::map<int, int> LoadClassRemap(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open remap table " + path);
  std::map<int, int> table;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(StripComment(line));
    int from = 0, to = 0;
    if (!(ls >> from)) continue;
    std::string extra;
    if (!(ls >> to) || (ls >> extra)) {
      throw Error(ErrorCode::kParse, "remap lines need exactly two integers");
    }
    if (!table.emplace(from, to).second) {
      throw Error(ErrorCode::kParse, "duplicate remap source " + std::to_string(from));
    }
  }
  return table;
}

LabelImage RemapLabels(const LabelImage& labels, const std::map<int, int>& table,
                       int unmapped) {
  LabelImage out = labels;
  for (auto& l : out.data) {
    const auto it = table.find(l);
    l = it == table.end() ? unmapped : it->second;
  }
  return out;
}

// ---------------------------------------------------------- scripted clicks

std::string_view ClickPolicyName(ClickPolicy policy) {
  return policy == ClickPolicy::kCentroid ? "centroid" : "error_guided";
}

ClickPolicy ParseClickPolicy(std::string_view name) {
  if (name == "centroid") return ClickPolicy::kCentroid;
  if (name == "error_guided") return ClickPolicy::kErrorGuided;
  throw Error(ErrorCode::kParse, "unknown click policy '" + std::string(name) + "'");
}

namespace {

bool NearClick(std::span<const ScriptedClick> clicks, int keyframe, int u, int v) {
  for (const auto& c : clicks) {
    if (c.keyframe != keyframe) continue;
    const double du = u - c.u, dv = v - c.v;
    if (du * du + dv * dv <= kClickSpacing * kClickSpacing) return true;
  }
  return false;
}

template <typename T>
const T& PickRandom(const std::vector<T>& items, std::mt19937_64* rng) {
  std::uniform_int_distribution<size_t> pick(0, items.size() - 1);
  return items[pick(*rng)];
}

std::optional<ScriptedClick> CentroidClick(std::span<const LabelImage> gt, int cls,
                                           std::span<const ScriptedClick> previous,
                                           std::mt19937_64* rng) {
  struct Region {
    int keyframe;
    int label;
    cv::Mat components;
  };
  int best_area = 0;
  std::vector<Region> best;
  for (size_t k = 0; k < gt.size(); ++k) {
    const LabelImage& img = gt[k];
    cv::Mat mask(img.height, img.width, CV_8UC1);
    for (int v = 0; v < img.height; ++v) {
      for (int u = 0; u < img.width; ++u) mask.at<uint8_t>(v, u) = img.at(u, v) == cls ? 255 : 0;
    }
    for (const auto& c : previous) {
      if (c.keyframe == static_cast<int>(k)) {
        cv::circle(mask, {c.u, c.v}, static_cast<int>(kClickSpacing), 0, cv::FILLED);
      }
    }
    cv::Mat labels, stats, centroids;
    const int n = cv::connectedComponentsWithStats(mask, labels, stats, centroids, 8, CV_32S);
    for (int l = 1; l < n; ++l) {
      const int area = stats.at<int>(l, cv::CC_STAT_AREA);
      if (area > best_area) {
        best_area = area;
        best.clear();
      }
      if (area == best_area) best.push_back({static_cast<int>(k), l, labels});
    }
  }
  if (best.empty()) return std::nullopt;
  const Region& region = PickRandom(best, rng);
  cv::Mat inside = region.components == region.label;
  // Pad with background so the image border counts as region boundary.
  cv::Mat padded, dist;
  cv::copyMakeBorder(inside, padded, 1, 1, 1, 1, cv::BORDER_CONSTANT, 0);
  cv::distanceTransform(padded, dist, cv::DIST_L2, cv::DIST_MASK_PRECISE);
  dist = dist(cv::Rect(1, 1, inside.cols, inside.rows)).clone();
  double max_dist = 0;
  cv::minMaxLoc(dist, nullptr, &max_dist);
  std::vector<std::pair<int, int>> peaks;
  for (int v = 0; v < dist.rows; ++v) {
    for (int u = 0; u < dist.cols; ++u) {
      if (dist.at<float>(v, u) >= max_dist && inside.at<uint8_t>(v, u)) peaks.emplace_back(u, v);
    }
  }
  const auto [u, v] = PickRandom(peaks, rng);
  return ScriptedClick{region.keyframe, u, v, cls};
}

}  // namespace

std::vector<ScriptedClick> CentroidClicks(std::span<const LabelImage> gt, int num_classes,
                                          int budget, std::mt19937_64* rng,
                                          std::span<const ScriptedClick> previous) {
  std::vector<ScriptedClick> all(previous.begin(), previous.end());
  std::vector<ScriptedClick> out;
  std::vector<bool> exhausted(num_classes, false);
  int cls = 0;
  while (static_cast<int>(out.size()) < budget &&
         !std::all_of(exhausted.begin(), exhausted.end(), [](bool e) { return e; })) {
    if (!exhausted[cls]) {
      if (auto click = CentroidClick(gt, cls, all, rng)) {
        all.push_back(*click);
        out.push_back(*click);
      } else {
        exhausted[cls] = true;
      }
    }
    cls = (cls + 1) % num_classes;
  }
  return out;
}

std::optional<ScriptedClick> ErrorGuidedClick(std::span<const LabelImage> gt,
                                              std::span<const PredictionView> predictions,
                                              int num_classes,
                                              std::span<const ScriptedClick> previous,
                                              std::mt19937_64* rng) {
  if (gt.size() != predictions.size()) {
    throw Error(ErrorCode::kShapeMismatch, "one prediction per GT image is required");
  }
  float best_wrong = -1, best_margin = 2;
  std::vector<ScriptedClick> wrong, weak;
  for (size_t k = 0; k < gt.size(); ++k) {
    const PredictionView& p = predictions[k];
    for (int gy = 0; gy < p.labels.height; ++gy) {
      for (int gx = 0; gx < p.labels.width; ++gx) {
        const int u = gx * p.stride, v = gy * p.stride;
        if (!gt[k].contains(u, v)) continue;
        const int label = gt[k].at(u, v);
        if (label < 0 || label >= num_classes) continue;
        if (NearClick(previous, static_cast<int>(k), u, v)) continue;
        const ScriptedClick click{static_cast<int>(k), u, v, label};
        if (p.labels.at(gx, gy) != label) {
          const float conf = p.confidence.at(gx, gy);
          if (conf > best_wrong) {
            best_wrong = conf;
            wrong.clear();
          }
          if (conf == best_wrong) wrong.push_back(click);
        } else if (wrong.empty()) {
          const float m = p.margin.at(gx, gy);
          if (m < best_margin) {
            best_margin = m;
            weak.clear();
          }
          if (m == best_margin) weak.push_back(click);
        }
      }
    }
  }
  if (!wrong.empty()) return PickRandom(wrong, rng);
  if (!weak.empty()) return PickRandom(weak, rng);
  return std::nullopt;
}

}  // namespace scenelabel
