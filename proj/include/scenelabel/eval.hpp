#pragma once

// mIoU scoring, simulated labelling sessions on synthetic scenes and curve
// tables of mIoU against click count.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scenelabel/data_io.hpp"
#include "scenelabel/session.hpp"
#include "scenelabel/synthetic.hpp"

namespace scenelabel {

struct IoUReport {
  /// Per class; NaN for classes absent from the GT.
  std::vector<double> iou;
  /// Fraction of each class's GT pixels predicted as that class (NaN if absent).
  std::vector<double> recall;
  double miou = 0;
  int clicks = 0;
  std::string strategy;
  uint64_t seed = 0;
  double seconds = 0;
};

nlohmann::json ReportToJson(const IoUReport& r);
IoUReport ReportFromJson(const nlohmann::json& j);

/// Confusion counts over any number of images. Labels outside
/// [0, num_classes) in the GT, and `ignore_label`, are skipped; predictions
/// outside that range count as errors.
class ConfusionAccumulator {
 public:
  ConfusionAccumulator(int num_classes, int ignore_label);
  /// Throws kShapeMismatch unless the images have equal dimensions.
  void add(const LabelImage& pred, const LabelImage& gt);
  /// `pred` on a strided grid; GT is read at (i * stride, j * stride).
  void add_strided(const LabelImage& pred, int stride, const LabelImage& gt);
  IoUReport report() const;

 private:
  void count(int pred, int gt);

  int num_classes_;
  int ignore_label_;
  std::vector<int64_t> intersection_;
  std::vector<int64_t> gt_count_;
  std::vector<int64_t> pred_count_;
};

/// mIoU of one prediction against one GT map.
IoUReport ComputeMiou(const LabelImage& pred, const LabelImage& gt, int num_classes,
                      int ignore_label);

/// Flat-mode prediction (argmax over the first `active_classes` logits) on a
/// strided, depth-guided render.
PredictionView PredictLabels(const FieldParams& params, const Frame& frame,
                             int active_classes, int samples_per_ray,
                             const SamplingConfig& sampling, int stride);

enum class Strategy { kScriptedManual, kAutoEntropy, kAutoLeastConf, kAutoMargin, kAutoRandom };

std::string_view StrategyName(Strategy s);
Strategy ParseStrategy(std::string_view name);

struct EvalConfig {
  SessionConfig session;
  /// Click counts at which mIoU is measured; the last one is the budget.
  std::vector<int> checkpoints = {0, 4, 8, 12, 20, 40};
  ClickPolicy policy = ClickPolicy::kCentroid;
  /// Optimiser steps after every click (or answered query).
  int steps_per_click = 40;
  /// Geometry-only steps before the first click.
  int warmup_steps = 1500;
  /// Session directory holding the warmed-up state; created when missing.
  std::string warm_start;
  int eval_stride = 2;
  int eval_samples = 16;
  /// Also score the trajectory views that are not keyframes.
  bool score_held_out = false;
};

struct SessionCurve {
  std::string scene;
  Strategy strategy = Strategy::kScriptedManual;
  uint64_t seed = 0;
  std::vector<IoUReport> keyframe_reports;
  std::vector<IoUReport> held_out_reports;  // empty unless score_held_out
  std::vector<ScriptedClick> clicks;
};

nlohmann::json CurveToJson(const SessionCurve& c);
SessionCurve CurveFromJson(const nlohmann::json& j);

/// Session with the scene's keyframes ingested and class names registered
/// in GT order, warmed up (or restored from cfg.warm_start), then reseeded.
std::unique_ptr<Session> PrepareSession(const SyntheticScene& scene, const EvalConfig& cfg,
                                        uint64_t seed);

/// Scores the current snapshot against GT of the given trajectory views.
IoUReport ScoreViews(const Session& session, const SyntheticScene& scene,
                     std::span<const int> trajectory_indices, const EvalConfig& cfg);

/// Runs a full simulated session; auto strategies answer queries from GT.
/// When `save_to` is set, the final session, scene and curve are stored there.
SessionCurve RunSession(const SyntheticScene& scene, const std::string& scene_name,
                        Strategy strategy, uint64_t seed, const EvalConfig& cfg,
                        const std::optional<std::string>& save_to = std::nullopt);

struct CurvePoint {
  std::string strategy;
  int clicks = 0;
  double mean = 0;
  double stddev = 0;  // sample standard deviation over seeds, 0 for one seed
  int seeds = 0;
};

/// Groups by strategy and click count; keyframe reports only.
std::vector<CurvePoint> AggregateCurves(std::span<const SessionCurve> curves);

/// Writes <prefix>.csv (strategy,clicks,mean_miou,std_miou,seeds) and
/// <prefix>.dat (one whitespace block per strategy). Returns both paths.
std::vector<std::string> EmitCurves(std::span<const SessionCurve> curves,
                                    const std::string& prefix);

struct ThresholdCheck {
  std::string name;
  double value = 0;
  double bound = 0;
  bool pass = false;
};

/// Minimum mean mIoU per click count on the acceptance scene, with a cap on
/// the 0-click score and a tolerance for small drops between checkpoints.
struct ScalingThresholds {
  std::vector<std::pair<int, double>> min_miou = {{4, 0.60}, {8, 0.75}, {12, 0.80}};
  /// The 0-click score may exceed 1 / num_classes by at most this much.
  double chance_slack = 0.05;
  double monotone_slack = 0.05;
};

/// Checks one strategy's points (clicks ascending). Thresholds at click
/// counts the curve does not contain are not checked.
std::vector<ThresholdCheck> CheckScaling(std::span<const CurvePoint> points, int num_classes,
                                         const ScalingThresholds& thresholds = {});

/// mean mIoU(`better`) >= mean mIoU(`worse`) at the largest click count both
/// strategies reach; nullopt when either strategy is missing. `value` holds
/// the gap.
std::optional<ThresholdCheck> CheckOrdering(std::span<const CurvePoint> points,
                                            const std::string& better, const std::string& worse);

/// Everything `--assert` enforces for a set of curves: scaling thresholds on
/// scripted_manual and auto_entropy >= auto_random.
std::vector<ThresholdCheck> AcceptanceChecks(std::span<const SessionCurve> curves,
                                             int num_classes);

}  // namespace scenelabel
