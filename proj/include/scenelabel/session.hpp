#pragma once

// The labelling coordinator: keyframe registry, annotation intake, label
// schema, optimiser loop, parameter snapshots, previews, hands-free queries
// and on-disk persistence.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "scenelabel/active_query.hpp"
#include "scenelabel/field.hpp"
#include "scenelabel/frame.hpp"
#include "scenelabel/optimiser.hpp"
#include "scenelabel/semantics.hpp"

namespace scenelabel {

struct SessionConfig {
  SemanticMode mode = SemanticMode::kFlat;
  int keyframe_stride = 1;
  /// Ingested frames are downscaled by this factor.
  double image_scale = 1.0;
  int max_classes = kDefaultMaxClasses;
  int tree_depth = kDefaultTreeDepth;
  int hidden_width = kDefaultHiddenWidth;
  int frequency_bands = 10;
  Aabb scene_bound;
  MappingConfig mapping;
  QueryConfig query;
  int preview_samples = 48;
  uint64_t seed = 0;

  int semantic_dim() const {
    return mode == SemanticMode::kFlat ? max_classes : tree_depth;
  }
  EncodingConfig encoding() const;
  /// Throws kInvalidArgument on out-of-range values.
  void validate() const;
};

/// Flat JSON keys (alpha_p, alpha_s, map_lr, samples_per_ray, batch_pixels,
/// colour_enabled, semantic_mode, ...). Unknown keys are rejected.
nlohmann::json ConfigToJson(const SessionConfig& cfg);
SessionConfig ConfigFromJson(const nlohmann::json& j);
SessionConfig LoadConfig(const std::string& path);

/// Axis-aligned box around the back-projected valid depth of `frames`,
/// padded by `margin` metres.
Aabb BoundFromFrames(std::span<const Frame> frames, double margin = 0.5);

/// Immutable view of the state after some number of optimiser steps.
struct SessionSnapshot {
  uint64_t version = 0;
  std::shared_ptr<const FieldParams> params;
  LabelSchema schema;
  int active_classes = 0;
  size_t num_keyframes = 0;
  size_t num_annotations = 0;
};

enum class PreviewKind { kColour, kDepth, kSemantics, kUncertainty, kOverlay };

std::string_view PreviewKindName(PreviewKind kind);
PreviewKind ParsePreviewKind(std::string_view name);

struct PreviewRequest {
  PreviewKind kind = PreviewKind::kSemantics;
  /// Render every stride-th pixel; output is ceil(w/stride) x ceil(h/stride).
  int stride = 1;
  /// Semantic weight in overlays.
  double opacity = 0.5;
  /// Hierarchical mode: deepest tree level shown (-1 = all).
  int level = -1;
};

struct Preview {
  Rgb8Image image;
  uint64_t version = 0;
};

enum class SessionStatus { kIngesting, kOptimising, kPaused };

std::string_view SessionStatusName(SessionStatus status);

struct SessionStats {
  uint64_t steps = 0;
  uint64_t skipped_steps = 0;
  std::vector<double> recent_losses;
  size_t clicks = 0;
  size_t keyframes = 0;
  double uptime_seconds = 0;
  SessionStatus status = SessionStatus::kIngesting;
};

/// One labelling session. All public methods are thread-safe. The optimiser
/// runs either on a background thread (start/stop) or synchronously through
/// step(); the synchronous path is bit-reproducible for a fixed seed.
class Session {
 public:
  explicit Session(SessionConfig config);
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const SessionConfig& config() const { return config_; }

  /// Every keyframe_stride-th ingested frame becomes a keyframe (scaled by
  /// image_scale); returns its id. Throws kInvalidArgument on a malformed
  /// frame.
  std::optional<int> ingest_frame(const Frame& frame);
  size_t num_keyframes() const;
  /// Copy of keyframe `id` (kUnknownFrame when absent).
  Keyframe keyframe(int id) const;

  /// Adds or overwrites the annotation at (keyframe, u, v) and returns the
  /// annotation count. In flat mode `class_name` names the class, creating
  /// it when new, and overrides the payload id.
  size_t annotate(int keyframe, int u, int v, SemanticPayload payload,
                  AnnotationSource source = AnnotationSource::kClick,
                  std::optional<std::string> class_name = std::nullopt);
  /// Returns whether an annotation was removed.
  bool remove_annotation(int keyframe, int u, int v);
  std::vector<Annotation> annotations() const;
  size_t num_annotations() const;

  LabelSchema schema() const;
  /// Replaces classes or tree. Every existing annotation must stay valid.
  void set_schema(const LabelSchema& schema);
  /// Flat mode: id of `name`, created when new.
  int add_class(const std::string& name);

  /// One optimiser step on the current keyframes and annotations.
  StepResult step();
  void run(int steps);
  /// Background optimiser thread; stop() joins it.
  void start();
  void stop();
  bool running() const { return running_.load(); }

  std::shared_ptr<const SessionSnapshot> snapshot() const;
  /// Blocks until the snapshot version exceeds `seen` or the timeout expires;
  /// returns the current version.
  uint64_t wait_for_update(uint64_t seen, std::chrono::milliseconds timeout) const;

  Preview render_preview(int keyframe, const PreviewRequest& request) const;

  /// Re-renders all uncertainty maps from the current snapshot.
  void refresh_maps();
  /// Version of the snapshot the current maps were rendered from.
  std::optional<uint64_t> maps_version() const;
  /// Proposal from the latest maps (refreshing them first if there are none).
  QueryProposal next_query();
  /// Records the user's answer to a proposal.
  size_t answer_query(const QueryProposal& query, SemanticPayload payload,
                      std::optional<std::string> class_name = std::nullopt);

  SessionStats stats() const;

  /// Writes config.json, field.ckpt, adam.bin, keyframes.bin, state.json,
  /// annotations.jsonl and schema.json into `directory`.
  void save(const std::string& directory) const;
  static std::unique_ptr<Session> load(const std::string& directory);

  /// Replaces the hands-free settings; kBusy while the optimiser thread runs.
  void set_query_config(const QueryConfig& query);

  /// Restarts the sampling and query generators from `seed`.
  void reseed(uint64_t seed);

 private:
  int active_classes_locked() const;
  void validate_payload_locked(const SemanticPayload& payload) const;
  void publish_locked();
  void worker_loop(std::stop_token stop);

  SessionConfig config_;
  std::chrono::steady_clock::time_point started_;

  mutable std::shared_mutex keyframe_mutex_;
  std::vector<Keyframe> keyframes_;
  int64_t frames_seen_ = 0;

  mutable std::mutex edit_mutex_;
  std::vector<Annotation> annotations_;
  LabelSchema schema_;

  // Optimiser state, guarded by step_mutex_.
  mutable std::mutex step_mutex_;
  FieldParams params_;
  AdamState adam_;
  std::vector<FrameLossStats> loss_stats_;
  std::mt19937_64 rng_;
  uint64_t version_ = 0;
  uint64_t skipped_ = 0;
  std::deque<double> recent_losses_;

  mutable std::mutex snapshot_mutex_;
  mutable std::condition_variable_any snapshot_cv_;
  std::shared_ptr<const SessionSnapshot> snapshot_;

  mutable std::mutex query_mutex_;
  std::vector<UncertaintyMap> maps_;
  std::optional<uint64_t> maps_version_;
  std::mt19937_64 query_rng_;

  std::atomic<bool> hands_free_{false};
  std::atomic<bool> running_{false};
  std::mutex worker_mutex_;
  std::jthread worker_;
};

}  // namespace scenelabel
