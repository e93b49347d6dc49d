#include "scenelabel/session.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

namespace scenelabel {

namespace fs = std::filesystem;

namespace {

constexpr size_t kRecentLosses = 100;

nlohmann::json VecJson(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

Vec3 JsonVec(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::kParse, "expected 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

double WallClockSeconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace

EncodingConfig SessionConfig::encoding() const {
  EncodingConfig enc;
  enc.num_frequency_bands = frequency_bands;
  enc.scene_bound = scene_bound;
  return enc;
}

void SessionConfig::validate() const {
  const auto bad = [](const std::string& what) {
    throw Error(ErrorCode::kInvalidArgument, "config: " + what);
  };
  if (keyframe_stride < 1) bad("keyframe_stride must be >= 1");
  if (!(image_scale > 0 && image_scale <= 1)) bad("image_scale must be in (0, 1]");
  if (max_classes < 1) bad("max_classes must be >= 1");
  if (tree_depth < 1) bad("tree_depth must be >= 1");
  if (hidden_width < 1) bad("hidden_width must be >= 1");
  if (frequency_bands < 0) bad("frequency_bands must be >= 0");
  encoding().validate();
  const auto& m = mapping;
  if (m.samples_per_ray < 2) bad("samples_per_ray must be >= 2");
  if (m.batch.batch_pixels < 0) bad("batch_pixels must be >= 0");
  if (m.batch.grid_cells < 1) bad("grid_cells must be >= 1");
  if (!(m.weights.alpha_p >= 0 && m.weights.alpha_s >= 0)) bad("loss weights must be >= 0");
  if (!(m.adam.learning_rate > 0)) bad("map_lr must be > 0");
  if (!(m.sampling.near >= 0 && m.sampling.far > m.sampling.near)) bad("need 0 <= near < far");
  if (!(query.k_fraction > 0 && query.k_fraction <= 1)) bad("k_fraction must be in (0, 1]");
  if (query.stride < 1 || query.samples_per_ray < 2 || query.refresh_every < 1) {
    bad("query stride, samples and cadence must be positive");
  }
  if (preview_samples < 2) bad("preview_samples must be >= 2");
}

nlohmann::json ConfigToJson(const SessionConfig& c) {
  const auto& m = c.mapping;
  return {
      {"semantic_mode", SemanticModeName(c.mode)},
      {"colour_enabled", m.weights.colour_enabled},
      {"keyframe_stride", c.keyframe_stride},
      {"image_scale", c.image_scale},
      {"max_classes", c.max_classes},
      {"tree_depth", c.tree_depth},
      {"hidden_width", c.hidden_width},
      {"frequency_bands", c.frequency_bands},
      {"scene_bound", {{"min", VecJson(c.scene_bound.min)}, {"max", VecJson(c.scene_bound.max)}}},
      {"alpha_p", m.weights.alpha_p},
      {"alpha_s", m.weights.alpha_s},
      {"variance_gradient", m.weights.variance_gradient},
      {"map_lr", m.adam.learning_rate},
      {"pose_lr", m.pose_learning_rate},
      {"adam_beta1", m.adam.beta1},
      {"adam_beta2", m.adam.beta2},
      {"adam_epsilon", m.adam.epsilon},
      {"samples_per_ray", m.samples_per_ray},
      {"batch_pixels", m.batch.batch_pixels},
      {"grid_cells", m.batch.grid_cells},
      {"cell_fraction", m.batch.cell_fraction},
      {"frame_epsilon", m.batch.frame_epsilon},
      {"stats_decay", m.stats_decay},
      {"near", m.sampling.near},
      {"far", m.sampling.far},
      {"guided_fraction", m.sampling.guided_fraction},
      {"guided_sigma", m.sampling.guided_sigma},
      {"guided_band_sigmas", m.sampling.guided_band_sigmas},
      {"preview_samples", c.preview_samples},
      {"query_measure", MeasureName(c.query.measure)},
      {"query_k_fraction", c.query.k_fraction},
      {"query_exclusion_radius", c.query.exclusion_radius},
      {"query_stride", c.query.stride},
      {"query_samples", c.query.samples_per_ray},
      {"query_refresh_every", c.query.refresh_every},
      {"seed", c.seed},
  };
}

SessionConfig ConfigFromJson(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kParse, "config must be a JSON object");
  SessionConfig c;
  auto& m = c.mapping;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "semantic_mode") c.mode = ParseSemanticMode(v.get<std::string>());
      else if (key == "colour_enabled") m.weights.colour_enabled = v.get<bool>();
      else if (key == "keyframe_stride") c.keyframe_stride = v.get<int>();
      else if (key == "image_scale") c.image_scale = v.get<double>();
      else if (key == "max_classes") c.max_classes = v.get<int>();
      else if (key == "tree_depth") c.tree_depth = v.get<int>();
      else if (key == "hidden_width") c.hidden_width = v.get<int>();
      else if (key == "frequency_bands") c.frequency_bands = v.get<int>();
      else if (key == "scene_bound") {
        c.scene_bound.min = JsonVec(v.at("min"));
        c.scene_bound.max = JsonVec(v.at("max"));
      }
      else if (key == "alpha_p") m.weights.alpha_p = v.get<double>();
      else if (key == "alpha_s") m.weights.alpha_s = v.get<double>();
      else if (key == "variance_gradient") m.weights.variance_gradient = v.get<bool>();
      else if (key == "map_lr") m.adam.learning_rate = v.get<double>();
      else if (key == "pose_lr") m.pose_learning_rate = v.get<double>();
      else if (key == "adam_beta1") m.adam.beta1 = v.get<double>();
      else if (key == "adam_beta2") m.adam.beta2 = v.get<double>();
      else if (key == "adam_epsilon") m.adam.epsilon = v.get<double>();
      else if (key == "samples_per_ray") m.samples_per_ray = v.get<int>();
      else if (key == "batch_pixels") m.batch.batch_pixels = v.get<int>();
      else if (key == "grid_cells") m.batch.grid_cells = v.get<int>();
      else if (key == "cell_fraction") m.batch.cell_fraction = v.get<double>();
      else if (key == "frame_epsilon") m.batch.frame_epsilon = v.get<double>();
      else if (key == "stats_decay") m.stats_decay = v.get<double>();
      else if (key == "near") m.sampling.near = v.get<double>();
      else if (key == "far") m.sampling.far = v.get<double>();
      else if (key == "guided_fraction") m.sampling.guided_fraction = v.get<double>();
      else if (key == "guided_sigma") m.sampling.guided_sigma = v.get<double>();
      else if (key == "guided_band_sigmas") m.sampling.guided_band_sigmas = v.get<double>();
      else if (key == "preview_samples") c.preview_samples = v.get<int>();
      else if (key == "query_measure") c.query.measure = ParseMeasure(v.get<std::string>());
      else if (key == "query_k_fraction") c.query.k_fraction = v.get<double>();
      else if (key == "query_exclusion_radius") c.query.exclusion_radius = v.get<double>();
      else if (key == "query_stride") c.query.stride = v.get<int>();
      else if (key == "query_samples") c.query.samples_per_ray = v.get<int>();
      else if (key == "query_refresh_every") c.query.refresh_every = v.get<int>();
      else if (key == "seed") c.seed = v.get<uint64_t>();
      else throw Error(ErrorCode::kParse, "unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

SessionConfig LoadConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path);
  try {
    return ConfigFromJson(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("config: ") + e.what());
  }
}

Aabb BoundFromFrames(std::span<const Frame> frames, double margin) {
  Vec3 lo = Vec3::Constant(INFINITY), hi = Vec3::Constant(-INFINITY);
  for (const Frame& f : frames) {
    const auto& k = f.intrinsics;
    lo = lo.cwiseMin(f.world_from_camera.translation());
    hi = hi.cwiseMax(f.world_from_camera.translation());
    for (int v = 0; v < k.height; v += 4) {
      for (int u = 0; u < k.width; u += 4) {
        const double d = f.depth.at(u, v);
        if (!(d > 0)) continue;
        const Vec3 p = f.world_from_camera *
                       Vec3(d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d);
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
    }
  }
  if (!lo.allFinite()) throw Error(ErrorCode::kInvalidArgument, "no frames to bound");
  return {lo - Vec3::Constant(margin), hi + Vec3::Constant(margin)};
}

std::string_view PreviewKindName(PreviewKind kind) {
  switch (kind) {
    case PreviewKind::kColour: return "colour";
    case PreviewKind::kDepth: return "depth";
    case PreviewKind::kSemantics: return "semantics";
    case PreviewKind::kUncertainty: return "uncertainty";
    case PreviewKind::kOverlay: return "overlay";
  }
  return "colour";
}

PreviewKind ParsePreviewKind(std::string_view name) {
  for (auto k : {PreviewKind::kColour, PreviewKind::kDepth, PreviewKind::kSemantics,
                 PreviewKind::kUncertainty, PreviewKind::kOverlay}) {
    if (PreviewKindName(k) == name) return k;
  }
  if (name == "color") return PreviewKind::kColour;
  throw Error(ErrorCode::kParse, "unknown preview kind '" + std::string(name) + "'");
}

std::string_view SessionStatusName(SessionStatus status) {
  switch (status) {
    case SessionStatus::kIngesting: return "ingesting";
    case SessionStatus::kOptimising: return "optimising";
    case SessionStatus::kPaused: return "paused";
  }
  return "paused";
}

// ------------------------------------------------------------------ Session

Session::Session(SessionConfig config)
    : config_(std::move(config)),
      started_(std::chrono::steady_clock::now()),
      schema_{config_.mode, ClassRegistry(config_.max_classes), LabelTree(config_.tree_depth)},
      params_(InitParams(config_.seed, config_.semantic_dim(), config_.encoding(),
                         config_.hidden_width)),
      rng_(config_.seed),
      query_rng_(config_.seed ^ 0x5851F42D4C957F2Dull) {
  config_.validate();
  adam_.config = config_.mapping.adam;
  std::lock_guard lock(step_mutex_);
  publish_locked();
}

Session::~Session() { stop(); }

std::optional<int> Session::ingest_frame(const Frame& frame) {
  frame.validate();
  Frame scaled = ScaleFrame(frame, config_.image_scale);
  std::unique_lock lock(keyframe_mutex_);
  const int64_t index = frames_seen_++;
  if (index % config_.keyframe_stride != 0) return std::nullopt;
  const int id = static_cast<int>(keyframes_.size());
  keyframes_.push_back({id, std::move(scaled)});
  return id;
}

size_t Session::num_keyframes() const {
  std::shared_lock lock(keyframe_mutex_);
  return keyframes_.size();
}

Keyframe Session::keyframe(int id) const {
  std::shared_lock lock(keyframe_mutex_);
  if (id < 0 || id >= static_cast<int>(keyframes_.size())) {
    throw Error(ErrorCode::kUnknownFrame, "unknown keyframe " + std::to_string(id));
  }
  return keyframes_[id];
}

int Session::active_classes_locked() const {
  return config_.mode == SemanticMode::kFlat ? schema_.classes.size() : config_.tree_depth;
}

void Session::validate_payload_locked(const SemanticPayload& payload) const {
  if (config_.mode == SemanticMode::kFlat) {
    const auto* flat = std::get_if<FlatLabel>(&payload);
    if (flat == nullptr) {
      throw Error(ErrorCode::kModeMismatch, "hierarchical label in a flat session");
    }
    if (flat->class_id < 0 || flat->class_id >= schema_.classes.size()) {
      throw Error(ErrorCode::kOutOfRange, "unknown class id " + std::to_string(flat->class_id));
    }
  } else {
    const auto* hier = std::get_if<HierLabel>(&payload);
    if (hier == nullptr) {
      throw Error(ErrorCode::kModeMismatch, "flat label in a hierarchical session");
    }
    if (hier->bits.empty() || !schema_.tree.contains(hier->bits)) {
      throw Error(ErrorCode::kNotFound, "label node '" + PathToString(hier->bits) +
                                            "' is not in the tree");
    }
  }
}

size_t Session::annotate(int keyframe, int u, int v, SemanticPayload payload,
                         AnnotationSource source, std::optional<std::string> class_name) {
  std::shared_lock kf_lock(keyframe_mutex_);
  if (keyframe < 0 || keyframe >= static_cast<int>(keyframes_.size())) {
    throw Error(ErrorCode::kUnknownFrame, "unknown keyframe " + std::to_string(keyframe));
  }
  const Keyframe& kf = keyframes_[keyframe];
  if (u < 0 || v < 0 || u >= kf.width() || v >= kf.height()) {
    throw Error(ErrorCode::kOutOfRange, "pixel outside keyframe");
  }
  kf_lock.unlock();
  std::lock_guard lock(edit_mutex_);
  if (class_name) {
    if (config_.mode != SemanticMode::kFlat) {
      throw Error(ErrorCode::kModeMismatch, "class names apply to flat sessions only");
    }
    if (!std::holds_alternative<FlatLabel>(payload)) {
      throw Error(ErrorCode::kModeMismatch, "hierarchical label in a flat session");
    }
    std::get<FlatLabel>(payload).class_id = schema_.classes.add(*class_name);
  }
  validate_payload_locked(payload);
  Annotation a{keyframe, u, v, std::move(payload), WallClockSeconds(), source};
  for (Annotation& existing : annotations_) {
    if (existing.keyframe == keyframe && existing.u == u && existing.v == v) {
      existing = std::move(a);
      return annotations_.size();
    }
  }
  annotations_.push_back(std::move(a));
  return annotations_.size();
}

bool Session::remove_annotation(int keyframe, int u, int v) {
  std::lock_guard lock(edit_mutex_);
  const auto it = std::find_if(annotations_.begin(), annotations_.end(), [&](const Annotation& a) {
    return a.keyframe == keyframe && a.u == u && a.v == v;
  });
  if (it == annotations_.end()) return false;
  annotations_.erase(it);
  return true;
}

std::vector<Annotation> Session::annotations() const {
  std::lock_guard lock(edit_mutex_);
  return annotations_;
}

size_t Session::num_annotations() const {
  std::lock_guard lock(edit_mutex_);
  return annotations_.size();
}

LabelSchema Session::schema() const {
  std::lock_guard lock(edit_mutex_);
  return schema_;
}

void Session::set_schema(const LabelSchema& schema) {
  if (schema.mode != config_.mode) {
    throw Error(ErrorCode::kModeMismatch, "schema mode differs from the session mode");
  }
  if (schema.classes.max_classes() != config_.max_classes ||
      schema.tree.depth() != config_.tree_depth) {
    throw Error(ErrorCode::kInvalidArgument, "schema limits differ from the session config");
  }
  schema.tree.validate();
  std::lock_guard lock(edit_mutex_);
  LabelSchema previous = std::move(schema_);
  schema_ = schema;
  try {
    for (const Annotation& a : annotations_) validate_payload_locked(a.payload);
  } catch (...) {
    schema_ = std::move(previous);
    throw;
  }
}

int Session::add_class(const std::string& name) {
  if (config_.mode != SemanticMode::kFlat) {
    throw Error(ErrorCode::kModeMismatch, "classes apply to flat sessions only");
  }
  std::lock_guard lock(edit_mutex_);
  return schema_.classes.add(name);
}

void Session::publish_locked() {
  auto snap = std::make_shared<SessionSnapshot>();
  snap->version = version_;
  snap->params = std::make_shared<const FieldParams>(params_);
  {
    std::shared_lock kf_lock(keyframe_mutex_);
    snap->num_keyframes = keyframes_.size();
  }
  {
    std::lock_guard lock(edit_mutex_);
    snap->schema = schema_;
    snap->active_classes = active_classes_locked();
    snap->num_annotations = annotations_.size();
  }
  {
    std::lock_guard lock(snapshot_mutex_);
    snapshot_ = std::move(snap);
  }
  snapshot_cv_.notify_all();
}

StepResult Session::step() {
  std::lock_guard step_lock(step_mutex_);
  StepResult result;
  {
    std::shared_lock kf_lock(keyframe_mutex_);
    if (keyframes_.empty()) return result;
    std::vector<Annotation> annotations;
    int active = 0;
    {
      std::lock_guard lock(edit_mutex_);
      annotations = annotations_;
      active = active_classes_locked();
    }
    loss_stats_.resize(keyframes_.size());
    const MappingConfig& m = config_.mapping;
    const PixelBatch batch =
        SamplePixelBatch(keyframes_, loss_stats_, annotations, m.batch, &rng_);
    const RayBatch rays =
        BuildRayBatch(batch, keyframes_, annotations, m.samples_per_ray, m.sampling, &rng_);
    result = MappingStep(&params_, &adam_, rays, m, config_.mode, active, keyframes_,
                         &loss_stats_);
  }
  ++version_;
  if (!result.applied) ++skipped_;
  recent_losses_.push_back(result.loss);
  if (recent_losses_.size() > kRecentLosses) recent_losses_.pop_front();
  publish_locked();
  return result;
}

void Session::run(int steps) {
  for (int i = 0; i < steps; ++i) step();
}

void Session::worker_loop(std::stop_token stop) {
  uint64_t last_refresh = 0;
  while (!stop.stop_requested()) {
    if (num_keyframes() == 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
      continue;
    }
    try {
      step();
      const uint64_t v = snapshot()->version;
      if (hands_free_ && v - last_refresh >= static_cast<uint64_t>(config_.query.refresh_every)) {
        refresh_maps();
        last_refresh = v;
      }
    } catch (const Error& e) {
      spdlog::error("optimiser step failed: {}", e.what());
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  }
}

void Session::start() {
  std::lock_guard lock(worker_mutex_);
  if (running_) return;
  running_ = true;
  worker_ = std::jthread([this](std::stop_token st) { worker_loop(st); });
}

void Session::stop() {
  std::lock_guard lock(worker_mutex_);
  if (!running_) return;
  worker_.request_stop();
  worker_.join();
  worker_ = std::jthread();
  running_ = false;
}

std::shared_ptr<const SessionSnapshot> Session::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_;
}

uint64_t Session::wait_for_update(uint64_t seen, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(snapshot_mutex_);
  snapshot_cv_.wait_for(lock, timeout, [&] { return snapshot_->version > seen; });
  return snapshot_->version;
}

namespace {

Rgb8 Grey(double x) {
  const auto g = static_cast<uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
  return {g, g, g};
}

void Put(Rgb8Image* img, int x, int y, Rgb8 c) {
  img->at(x, y, 0) = c.r;
  img->at(x, y, 1) = c.g;
  img->at(x, y, 2) = c.b;
}

Rgb8 SemanticColour(const SessionSnapshot& snap, const Eigen::VectorXf& logits, int level) {
  if (snap.schema.mode == SemanticMode::kFlat) {
    if (snap.active_classes < 1) return {128, 128, 128};
    Eigen::Index best = 0;
    logits.head(snap.active_classes).maxCoeff(&best);
    return snap.schema.classes.colour(static_cast<int>(best));
  }
  std::vector<double> sigma(static_cast<size_t>(logits.size()));
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    sigma[static_cast<size_t>(j)] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[j])));
  }
  return snap.schema.tree.colour(snap.schema.tree.decode(sigma, level));
}

}  // namespace

Preview Session::render_preview(int keyframe_id, const PreviewRequest& request) const {
  if (request.stride < 1) throw Error(ErrorCode::kInvalidArgument, "stride must be >= 1");
  if (!(request.opacity >= 0 && request.opacity <= 1)) {
    throw Error(ErrorCode::kInvalidArgument, "opacity must be in [0, 1]");
  }
  const Keyframe kf = keyframe(keyframe_id);
  const auto snap = snapshot();
  const RenderedFrame r =
      RenderFrame(*snap->params, kf.frame.intrinsics, kf.frame.world_from_camera,
                  config_.preview_samples, config_.mapping.sampling, request.stride,
                  &kf.frame.depth);
  Preview out;
  out.version = snap->version;
  out.image = Rgb8Image(r.width, r.height, 3);
  UncertaintyMap umap;
  double umax = 1.0;
  if (request.kind == PreviewKind::kUncertainty) {
    umap = MapFromRender(r, kf.id, snap->schema.mode, snap->active_classes,
                         config_.query.measure, snap->version);
    if (snap->schema.mode == SemanticMode::kHierarchical) {
      umax = std::log(2.0);
    } else if (config_.query.measure == UncertaintyMeasure::kEntropy) {
      umax = std::log(std::max(2, snap->active_classes));
    }
  }
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * r.width + x;
      Rgb8 colour{};
      for (int c = 0; c < 3; ++c) {
        (&colour.r)[c] = static_cast<uint8_t>(
            std::lround(std::clamp(r.colour.at(x, y, c), 0.0f, 1.0f) * 255.0f));
      }
      switch (request.kind) {
        case PreviewKind::kColour:
          Put(&out.image, x, y, colour);
          break;
        case PreviewKind::kDepth:
          Put(&out.image, x, y, Grey(r.depth.at(x, y) / config_.mapping.sampling.far));
          break;
        case PreviewKind::kSemantics:
          Put(&out.image, x, y, SemanticColour(*snap, r.logits.col(p), request.level));
          break;
        case PreviewKind::kUncertainty:
          Put(&out.image, x, y, Grey(umap.at(x, y) / umax));
          break;
        case PreviewKind::kOverlay: {
          const Rgb8 s = SemanticColour(*snap, r.logits.col(p), request.level);
          const double a = request.opacity;
          Rgb8 o;
          for (int c = 0; c < 3; ++c) {
            (&o.r)[c] = static_cast<uint8_t>(
                std::lround((1 - a) * (&colour.r)[c] + a * (&s.r)[c]));
          }
          Put(&out.image, x, y, o);
          break;
        }
      }
    }
  }
  return out;
}

void Session::refresh_maps() {
  const auto snap = snapshot();
  std::vector<UncertaintyMap> maps;
  {
    std::shared_lock lock(keyframe_mutex_);
    maps = RefreshMaps(*snap->params, keyframes_, snap->schema.mode, snap->active_classes,
                       config_.query, config_.mapping.sampling, snap->version);
  }
  std::lock_guard lock(query_mutex_);
  maps_ = std::move(maps);
  maps_version_ = snap->version;
}

std::optional<uint64_t> Session::maps_version() const {
  std::lock_guard lock(query_mutex_);
  return maps_version_;
}

QueryProposal Session::next_query() {
  hands_free_ = true;
  bool stale;
  {
    std::lock_guard lock(query_mutex_);
    stale = maps_.size() != num_keyframes();
  }
  if (stale) refresh_maps();
  const auto ann = annotations();
  std::lock_guard lock(query_mutex_);
  return SelectQuery(maps_, config_.query.k_fraction, ann, config_.query.exclusion_radius,
                     &query_rng_);
}

size_t Session::answer_query(const QueryProposal& query, SemanticPayload payload,
                             std::optional<std::string> class_name) {
  return annotate(query.keyframe, query.u, query.v, std::move(payload),
                  AnnotationSource::kQueryAnswer, std::move(class_name));
}

SessionStats Session::stats() const {
  SessionStats s;
  {
    std::lock_guard lock(step_mutex_);
    s.steps = version_;
    s.skipped_steps = skipped_;
    s.recent_losses.assign(recent_losses_.begin(), recent_losses_.end());
  }
  s.clicks = num_annotations();
  s.keyframes = num_keyframes();
  s.uptime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  s.status = running_ ? SessionStatus::kOptimising
             : s.keyframes == 0 ? SessionStatus::kIngesting
                                : SessionStatus::kPaused;
  return s;
}

void Session::set_query_config(const QueryConfig& query) {
  if (running_) throw Error(ErrorCode::kBusy, "stop the optimiser before changing queries");
  SessionConfig next = config_;
  next.query = query;
  next.validate();
  std::lock_guard lock(query_mutex_);
  config_.query = query;
  maps_.clear();
  maps_version_.reset();
}

void Session::reseed(uint64_t seed) {
  std::scoped_lock lock(step_mutex_, query_mutex_);
  rng_.seed(seed);
  query_rng_.seed(seed ^ 0x5851F42D4C957F2Dull);
}

// -------------------------------------------------------------- persistence

namespace {

constexpr char kKeyframeMagic[4] = {'S', 'L', 'K', 'F'};
constexpr char kAdamMagic[4] = {'S', 'L', 'A', 'D'};
constexpr uint32_t kStateVersion = 1;

template <typename T>
void WritePod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T ReadPod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error(ErrorCode::kParse, "truncated session file");
  return v;
}

template <typename T>
void WriteArray(std::ostream& out, const T* data, size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void ReadArray(std::istream& in, T* data, size_t n) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) throw Error(ErrorCode::kParse, "truncated session file");
}

void CheckMagic(std::istream& in, const char (&magic)[4], const std::string& what) {
  char m[4];
  in.read(m, 4);
  if (!in || std::memcmp(m, magic, 4) != 0) throw Error(ErrorCode::kParse, "bad " + what + " file");
  if (ReadPod<uint32_t>(in) != kStateVersion) {
    throw Error(ErrorCode::kParse, "unsupported " + what + " version");
  }
}

std::string RngState(const std::mt19937_64& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

void SetRngState(std::mt19937_64* rng, const std::string& state) {
  std::istringstream s(state);
  s >> *rng;
  if (!s) throw Error(ErrorCode::kParse, "bad generator state");
}

nlohmann::json AnnotationToJson(const Annotation& a) {
  nlohmann::json j{{"frame", a.keyframe}, {"u", a.u}, {"v", a.v}};
  if (const auto* flat = std::get_if<FlatLabel>(&a.payload)) {
    j["class"] = flat->class_id;
  } else {
    j["node"] = PathToString(std::get<HierLabel>(a.payload).bits);
  }
  j["timestamp"] = a.timestamp;
  j["source"] = AnnotationSourceName(a.source);
  return j;
}

Annotation AnnotationFromJson(const nlohmann::json& j) {
  Annotation a;
  a.keyframe = j.at("frame").get<int>();
  a.u = j.at("u").get<int>();
  a.v = j.at("v").get<int>();
  if (j.contains("class")) {
    a.payload = FlatLabel{j["class"].get<int>()};
  } else {
    a.payload = HierLabel{PathFromString(j.at("node").get<std::string>())};
  }
  a.timestamp = j.value("timestamp", 0.0);
  a.source = ParseAnnotationSource(j.value("source", std::string("click")));
  return a;
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

nlohmann::json ReadJson(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

}  // namespace

void Session::save(const std::string& directory) const {
  const fs::path root(directory);
  fs::create_directories(root);
  std::lock_guard step_lock(step_mutex_);
  std::shared_lock kf_lock(keyframe_mutex_);
  std::lock_guard edit_lock(edit_mutex_);

  WriteText(root / "config.json", ConfigToJson(config_).dump(2) + "\n");
  SaveCheckpoint((root / "field.ckpt").string(), params_);
  {
    std::ofstream out(root / "adam.bin", std::ios::binary);
    out.write(kAdamMagic, 4);
    WritePod(out, kStateVersion);
    WritePod<int64_t>(out, adam_.step);
    const uint64_t n = static_cast<uint64_t>(adam_.first_moment.size());
    WritePod(out, n);
    WriteArray(out, adam_.first_moment.data(), n);
    WriteArray(out, adam_.second_moment.data(), n);
    if (!out) throw Error(ErrorCode::kIo, "cannot write adam.bin");
  }
  {
    std::ofstream out(root / "keyframes.bin", std::ios::binary);
    out.write(kKeyframeMagic, 4);
    WritePod(out, kStateVersion);
    WritePod<uint64_t>(out, keyframes_.size());
    for (const Keyframe& kf : keyframes_) {
      const auto& k = kf.frame.intrinsics;
      WritePod<int32_t>(out, kf.id);
      for (double x : {k.fx, k.fy, k.cx, k.cy}) WritePod(out, x);
      WritePod<int32_t>(out, k.width);
      WritePod<int32_t>(out, k.height);
      const Eigen::Matrix4d m = kf.frame.world_from_camera.matrix();
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) WritePod(out, m(r, c));
      }
      WriteArray(out, kf.frame.colour.data.data(), kf.frame.colour.data.size());
      WriteArray(out, kf.frame.depth.data.data(), kf.frame.depth.data.size());
    }
    if (!out) throw Error(ErrorCode::kIo, "cannot write keyframes.bin");
  }
  nlohmann::json state;
  state["version"] = version_;
  state["skipped_steps"] = skipped_;
  state["frames_seen"] = frames_seen_;
  state["rng"] = RngState(rng_);
  {
    std::lock_guard qlock(query_mutex_);
    state["query_rng"] = RngState(query_rng_);
  }
  state["recent_losses"] = std::vector<double>(recent_losses_.begin(), recent_losses_.end());
  state["loss_stats"] = nlohmann::json::array();
  for (const FrameLossStats& s : loss_stats_) {
    state["loss_stats"].push_back(
        {{"mean", s.mean_loss}, {"cells", s.cell_loss}, {"observed", s.observed}});
  }
  WriteText(root / "state.json", state.dump(2) + "\n");
  std::string log;
  for (const Annotation& a : annotations_) log += AnnotationToJson(a).dump() + "\n";
  WriteText(root / "annotations.jsonl", log);
  WriteText(root / "schema.json", SchemaToJson(schema_).dump(2) + "\n");
}

std::unique_ptr<Session> Session::load(const std::string& directory) {
  const fs::path root(directory);
  auto session = std::make_unique<Session>(ConfigFromJson(ReadJson(root / "config.json")));
  Session& s = *session;
  std::lock_guard step_lock(s.step_mutex_);
  {
    FieldParams params = LoadCheckpoint((root / "field.ckpt").string());
    if (params.size() != s.params_.size() || !(params.encoding() == s.params_.encoding())) {
      throw Error(ErrorCode::kParse, "checkpoint does not match the session config");
    }
    s.params_ = std::move(params);
  }
  {
    std::ifstream in(root / "adam.bin", std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot open adam.bin");
    CheckMagic(in, kAdamMagic, "adam");
    s.adam_.step = ReadPod<int64_t>(in);
    const uint64_t n = ReadPod<uint64_t>(in);
    if (n != 0 && n != static_cast<uint64_t>(s.params_.size())) {
      throw Error(ErrorCode::kParse, "optimiser state does not match the field");
    }
    s.adam_.first_moment.resize(static_cast<Eigen::Index>(n));
    s.adam_.second_moment.resize(static_cast<Eigen::Index>(n));
    ReadArray(in, s.adam_.first_moment.data(), n);
    ReadArray(in, s.adam_.second_moment.data(), n);
  }
  {
    std::ifstream in(root / "keyframes.bin", std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot open keyframes.bin");
    CheckMagic(in, kKeyframeMagic, "keyframe");
    const uint64_t count = ReadPod<uint64_t>(in);
    std::unique_lock kf_lock(s.keyframe_mutex_);
    for (uint64_t i = 0; i < count; ++i) {
      Keyframe kf;
      kf.id = ReadPod<int32_t>(in);
      if (kf.id != static_cast<int>(i)) throw Error(ErrorCode::kParse, "keyframe ids not dense");
      auto& k = kf.frame.intrinsics;
      k.fx = ReadPod<double>(in);
      k.fy = ReadPod<double>(in);
      k.cx = ReadPod<double>(in);
      k.cy = ReadPod<double>(in);
      k.width = ReadPod<int32_t>(in);
      k.height = ReadPod<int32_t>(in);
      k.validate();
      Pose pose = Pose::Identity();
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) pose.matrix()(r, c) = ReadPod<double>(in);
      }
      kf.frame.world_from_camera = pose;
      kf.frame.colour = ColourImage(k.width, k.height, 3);
      kf.frame.depth = DepthImage(k.width, k.height, 1);
      ReadArray(in, kf.frame.colour.data.data(), kf.frame.colour.data.size());
      ReadArray(in, kf.frame.depth.data.data(), kf.frame.depth.data.size());
      kf.frame.validate();
      s.keyframes_.push_back(std::move(kf));
    }
  }
  const nlohmann::json state = ReadJson(root / "state.json");
  try {
    s.version_ = state.at("version").get<uint64_t>();
    s.skipped_ = state.at("skipped_steps").get<uint64_t>();
    s.frames_seen_ = state.at("frames_seen").get<int64_t>();
    SetRngState(&s.rng_, state.at("rng").get<std::string>());
    SetRngState(&s.query_rng_, state.at("query_rng").get<std::string>());
    for (double l : state.at("recent_losses")) s.recent_losses_.push_back(l);
    for (const auto& js : state.at("loss_stats")) {
      FrameLossStats fs;
      fs.mean_loss = js.at("mean").get<double>();
      fs.cell_loss = js.at("cells").get<std::vector<double>>();
      fs.observed = js.at("observed").get<bool>();
      s.loss_stats_.push_back(std::move(fs));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("state.json: ") + e.what());
  }
  {
    std::lock_guard edit_lock(s.edit_mutex_);
    s.schema_ = SchemaFromJson(ReadJson(root / "schema.json"));
    if (s.schema_.mode != s.config_.mode) {
      throw Error(ErrorCode::kModeMismatch, "schema mode differs from the session mode");
    }
    std::ifstream in(root / "annotations.jsonl");
    if (!in) throw Error(ErrorCode::kIo, "cannot open annotations.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      Annotation a;
      try {
        a = AnnotationFromJson(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kParse, std::string("annotations.jsonl: ") + e.what());
      }
      if (a.keyframe < 0 || a.keyframe >= static_cast<int>(s.keyframes_.size())) {
        throw Error(ErrorCode::kUnknownFrame, "annotation refers to a missing keyframe");
      }
      s.validate_payload_locked(a.payload);
      s.annotations_.push_back(std::move(a));
    }
  }
  s.publish_locked();
  return session;
}

}  // namespace scenelabel
