#include "scenelabel/eval.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <spdlog/spdlog.h>

namespace scenelabel {

namespace fs = std::filesystem;

namespace {

nlohmann::json NumbersOrNull(const std::vector<double>& values) {
  nlohmann::json out = nlohmann::json::array();
  for (double v : values) {
    if (std::isfinite(v)) out.push_back(v);
    else out.push_back(nullptr);
  }
  return out;
}

std::vector<double> NumbersFromJson(const nlohmann::json& j) {
  std::vector<double> out;
  for (const auto& v : j) out.push_back(v.is_null() ? NAN : v.get<double>());
  return out;
}

}  // namespace

nlohmann::json ReportToJson(const IoUReport& r) {
  return {{"clicks", r.clicks},         {"miou", r.miou},
          {"iou", NumbersOrNull(r.iou)}, {"recall", NumbersOrNull(r.recall)},
          {"strategy", r.strategy},     {"seed", r.seed},
          {"seconds", r.seconds}};
}

IoUReport ReportFromJson(const nlohmann::json& j) {
  IoUReport r;
  r.clicks = j.at("clicks").get<int>();
  r.miou = j.at("miou").get<double>();
  r.iou = NumbersFromJson(j.at("iou"));
  r.recall = NumbersFromJson(j.at("recall"));
  r.strategy = j.at("strategy").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.seconds = j.value("seconds", 0.0);
  return r;
}

ConfusionAccumulator::ConfusionAccumulator(int num_classes, int ignore_label)
    : num_classes_(num_classes),
      ignore_label_(ignore_label),
      intersection_(num_classes, 0),
      gt_count_(num_classes, 0),
      pred_count_(num_classes, 0) {
  if (num_classes < 1) throw Error(ErrorCode::kInvalidArgument, "need at least one class");
}

void ConfusionAccumulator::count(int pred, int gt) {
  if (gt == ignore_label_ || gt < 0 || gt >= num_classes_) return;
  ++gt_count_[gt];
  if (pred >= 0 && pred < num_classes_) {
    ++pred_count_[pred];
    if (pred == gt) ++intersection_[gt];
  }
}

void ConfusionAccumulator::add(const LabelImage& pred, const LabelImage& gt) {
  if (pred.width != gt.width || pred.height != gt.height) {
    throw Error(ErrorCode::kShapeMismatch, "prediction and GT sizes differ");
  }
  for (int v = 0; v < gt.height; ++v) {
    for (int u = 0; u < gt.width; ++u) count(pred.at(u, v), gt.at(u, v));
  }
}

void ConfusionAccumulator::add_strided(const LabelImage& pred, int stride, const LabelImage& gt) {
  if (stride < 1 || pred.width != (gt.width + stride - 1) / stride ||
      pred.height != (gt.height + stride - 1) / stride) {
    throw Error(ErrorCode::kShapeMismatch, "strided prediction does not cover the GT");
  }
  for (int y = 0; y < pred.height; ++y) {
    for (int x = 0; x < pred.width; ++x) count(pred.at(x, y), gt.at(x * stride, y * stride));
  }
}

IoUReport ConfusionAccumulator::report() const {
  IoUReport r;
  r.iou.assign(num_classes_, NAN);
  r.recall.assign(num_classes_, NAN);
  double sum = 0;
  int present = 0;
  for (int c = 0; c < num_classes_; ++c) {
    if (gt_count_[c] == 0) continue;
    const double inter = static_cast<double>(intersection_[c]);
    r.iou[c] = inter / static_cast<double>(gt_count_[c] + pred_count_[c] - intersection_[c]);
    r.recall[c] = inter / static_cast<double>(gt_count_[c]);
    sum += r.iou[c];
    ++present;
  }
  r.miou = present ? sum / present : 0.0;
  return r;
}

IoUReport ComputeMiou(const LabelImage& pred, const LabelImage& gt, int num_classes,
                      int ignore_label) {
  ConfusionAccumulator acc(num_classes, ignore_label);
  acc.add(pred, gt);
  return acc.report();
}

PredictionView PredictLabels(const FieldParams& params, const Frame& frame,
                             int active_classes, int samples_per_ray,
                             const SamplingConfig& sampling, int stride) {
  const RenderedFrame r = RenderFrame(params, frame.intrinsics, frame.world_from_camera,
                                      samples_per_ray, sampling, stride, &frame.depth);
  PredictionView out;
  out.stride = stride;
  out.labels = LabelImage(r.width, r.height, 1, -1);
  out.confidence = Image<float>(r.width, r.height, 1, 0.0f);
  out.margin = Image<float>(r.width, r.height, 1, 0.0f);
  const int n = std::min<int>(active_classes, static_cast<int>(r.logits.rows()));
  if (n < 1) return out;
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * r.width + x;
      const Eigen::VectorXd logits = r.logits.col(p).head(n).cast<double>();
      const Eigen::VectorXd probs = FlatProbs<double>(logits);
      Eigen::Index best = 0;
      const double top = probs.maxCoeff(&best);
      double second = 0;
      for (Eigen::Index c = 0; c < n; ++c) {
        if (c != best) second = std::max(second, probs[c]);
      }
      out.labels.at(x, y) = static_cast<int>(best);
      out.confidence.at(x, y) = static_cast<float>(top);
      out.margin.at(x, y) = static_cast<float>(top - second);
    }
  }
  return out;
}

std::string_view StrategyName(Strategy s) {
  switch (s) {
    case Strategy::kScriptedManual: return "scripted_manual";
    case Strategy::kAutoEntropy: return "auto_entropy";
    case Strategy::kAutoLeastConf: return "auto_least_conf";
    case Strategy::kAutoMargin: return "auto_margin";
    case Strategy::kAutoRandom: return "auto_random";
  }
  return "scripted_manual";
}

Strategy ParseStrategy(std::string_view name) {
  for (auto s : {Strategy::kScriptedManual, Strategy::kAutoEntropy, Strategy::kAutoLeastConf,
                 Strategy::kAutoMargin, Strategy::kAutoRandom}) {
    if (StrategyName(s) == name) return s;
  }
  throw Error(ErrorCode::kParse, "unknown strategy '" + std::string(name) + "'");
}

nlohmann::json CurveToJson(const SessionCurve& c) {
  nlohmann::json j{{"scene", c.scene}, {"strategy", StrategyName(c.strategy)}, {"seed", c.seed}};
  j["keyframe_reports"] = nlohmann::json::array();
  for (const auto& r : c.keyframe_reports) j["keyframe_reports"].push_back(ReportToJson(r));
  j["held_out_reports"] = nlohmann::json::array();
  for (const auto& r : c.held_out_reports) j["held_out_reports"].push_back(ReportToJson(r));
  j["clicks"] = nlohmann::json::array();
  for (const auto& k : c.clicks) {
    j["clicks"].push_back({{"frame", k.keyframe}, {"u", k.u}, {"v", k.v}, {"class", k.class_id}});
  }
  return j;
}

SessionCurve CurveFromJson(const nlohmann::json& j) {
  try {
    SessionCurve c;
    c.scene = j.at("scene").get<std::string>();
    c.strategy = ParseStrategy(j.at("strategy").get<std::string>());
    c.seed = j.at("seed").get<uint64_t>();
    for (const auto& r : j.at("keyframe_reports")) c.keyframe_reports.push_back(ReportFromJson(r));
    for (const auto& r : j.at("held_out_reports")) c.held_out_reports.push_back(ReportFromJson(r));
    for (const auto& k : j.at("clicks")) {
      c.clicks.push_back({k.at("frame").get<int>(), k.at("u").get<int>(), k.at("v").get<int>(),
                          k.at("class").get<int>()});
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("curve: ") + e.what());
  }
}

namespace {

nlohmann::json ComparableConfig(const SessionConfig& c) {
  nlohmann::json j = ConfigToJson(c);
  for (auto it = j.begin(); it != j.end();) {
    if (it.key() == "seed" || it.key().rfind("query_", 0) == 0) it = j.erase(it);
    else ++it;
  }
  return j;
}

SessionConfig SceneConfig(const SyntheticScene& scene, const EvalConfig& cfg) {
  SessionConfig sc = cfg.session;
  sc.scene_bound = scene.bound;
  sc.mode = SemanticMode::kFlat;
  if (sc.image_scale != 1.0 || sc.keyframe_stride != 1) {
    throw Error(ErrorCode::kInvalidArgument,
                "simulated sessions score at native resolution with every keyframe");
  }
  if (scene.num_classes() > sc.max_classes) {
    throw Error(ErrorCode::kLimit, "scene has more classes than max_classes");
  }
  return sc;
}

}  // namespace

std::unique_ptr<Session> PrepareSession(const SyntheticScene& scene, const EvalConfig& cfg,
                                        uint64_t seed) {
  const SessionConfig sc = SceneConfig(scene, cfg);
  std::unique_ptr<Session> session;
  if (!cfg.warm_start.empty() && fs::exists(fs::path(cfg.warm_start) / "config.json")) {
    session = Session::load(cfg.warm_start);
    if (ComparableConfig(session->config()) != ComparableConfig(sc)) {
      throw Error(ErrorCode::kInvalidArgument,
                  "warm start " + cfg.warm_start + " was made with a different config");
    }
    if (session->stats().steps != static_cast<uint64_t>(cfg.warmup_steps) ||
        session->num_keyframes() != scene.keyframe_indices.size() ||
        session->num_annotations() != 0) {
      throw Error(ErrorCode::kInvalidArgument,
                  "warm start " + cfg.warm_start + " does not match the warm-up settings");
    }
    session->set_query_config(sc.query);
  } else {
    session = std::make_unique<Session>(sc);
    for (int idx : scene.keyframe_indices) session->ingest_frame(RenderSynthetic(scene, idx).frame);
    for (const auto& name : scene.class_names) session->add_class(name);
    session->run(cfg.warmup_steps);
    if (!cfg.warm_start.empty()) session->save(cfg.warm_start);
  }
  session->reseed(seed);
  return session;
}

IoUReport ScoreViews(const Session& session, const SyntheticScene& scene,
                     std::span<const int> trajectory_indices, const EvalConfig& cfg) {
  const auto snap = session.snapshot();
  ConfusionAccumulator acc(scene.num_classes(), scene.background_class());
  for (int idx : trajectory_indices) {
    const SyntheticView view = RenderSynthetic(scene, idx);
    const PredictionView pred =
        PredictLabels(*snap->params, view.frame, snap->active_classes, cfg.eval_samples,
                      session.config().mapping.sampling, cfg.eval_stride);
    acc.add_strided(pred.labels, cfg.eval_stride, view.labels);
  }
  return acc.report();
}

namespace {

std::optional<ScriptedClick> RandomClick(std::span<const LabelImage> gt, int num_classes,
                                         std::span<const Annotation> annotations,
                                         double radius, std::mt19937_64* rng) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::uniform_int_distribution<size_t> frame(0, gt.size() - 1);
    const size_t k = frame(*rng);
    std::uniform_int_distribution<int> pu(0, gt[k].width - 1), pv(0, gt[k].height - 1);
    const int u = pu(*rng), v = pv(*rng);
    bool near = false;
    for (const auto& a : annotations) {
      if (a.keyframe != static_cast<int>(k)) continue;
      const double du = a.u - u, dv = a.v - v;
      near |= du * du + dv * dv <= radius * radius;
    }
    const int label = gt[k].at(u, v);
    if (near || label < 0 || label >= num_classes) continue;
    return ScriptedClick{static_cast<int>(k), u, v, label};
  }
  return std::nullopt;
}

}  // namespace

SessionCurve RunSession(const SyntheticScene& scene, const std::string& scene_name,
                        Strategy strategy, uint64_t seed, const EvalConfig& cfg,
                        const std::optional<std::string>& save_to) {
  if (cfg.checkpoints.empty() ||
      !std::is_sorted(cfg.checkpoints.begin(), cfg.checkpoints.end()) ||
      std::adjacent_find(cfg.checkpoints.begin(), cfg.checkpoints.end()) !=
          cfg.checkpoints.end() ||
      cfg.checkpoints.front() < 0) {
    throw Error(ErrorCode::kInvalidArgument, "checkpoints must be strictly increasing and >= 0");
  }
  const auto t0 = std::chrono::steady_clock::now();
  EvalConfig run_cfg = cfg;
  switch (strategy) {
    case Strategy::kAutoEntropy: run_cfg.session.query.measure = UncertaintyMeasure::kEntropy; break;
    case Strategy::kAutoLeastConf:
      run_cfg.session.query.measure = UncertaintyMeasure::kLeastConfidence;
      break;
    case Strategy::kAutoMargin: run_cfg.session.query.measure = UncertaintyMeasure::kMargin; break;
    default: break;
  }
  auto session = PrepareSession(scene, run_cfg, seed);
  const int num_classes = scene.num_classes();
  std::vector<LabelImage> gt;
  for (int idx : scene.keyframe_indices) gt.push_back(RenderSynthetic(scene, idx).labels);
  std::vector<int> held_out;
  for (int i = 0; i < static_cast<int>(scene.trajectory.size()); ++i) {
    if (std::find(scene.keyframe_indices.begin(), scene.keyframe_indices.end(), i) ==
        scene.keyframe_indices.end()) {
      held_out.push_back(i);
    }
  }

  SessionCurve curve;
  curve.scene = scene_name;
  curve.strategy = strategy;
  curve.seed = seed;
  std::mt19937_64 click_rng(seed * 0x9E3779B97F4A7C15ull + 17);
  const int budget = cfg.checkpoints.back();
  std::vector<ScriptedClick> script;
  if (strategy == Strategy::kScriptedManual && cfg.policy == ClickPolicy::kCentroid) {
    script = CentroidClicks(gt, num_classes, budget, &click_rng);
  }

  size_t next_checkpoint = 0;
  const auto score = [&](int clicks) {
    while (next_checkpoint < cfg.checkpoints.size() && cfg.checkpoints[next_checkpoint] == clicks) {
      const double seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      IoUReport r = ScoreViews(*session, scene, scene.keyframe_indices, cfg);
      r.clicks = clicks;
      r.strategy = std::string(StrategyName(strategy));
      r.seed = seed;
      r.seconds = seconds;
      spdlog::info("{} seed {} clicks {} mIoU {:.4f}", r.strategy, seed, clicks, r.miou);
      curve.keyframe_reports.push_back(r);
      if (cfg.score_held_out && !held_out.empty()) {
        IoUReport h = ScoreViews(*session, scene, held_out, cfg);
        h.clicks = clicks;
        h.strategy = r.strategy;
        h.seed = seed;
        h.seconds = seconds;
        curve.held_out_reports.push_back(h);
      }
      ++next_checkpoint;
    }
  };

  score(0);
  const int refresh_every = run_cfg.session.query.refresh_every;
  for (int n = 1; n <= budget; ++n) {
    std::optional<ScriptedClick> click;
    switch (strategy) {
      case Strategy::kScriptedManual:
        if (cfg.policy == ClickPolicy::kCentroid) {
          if (n <= static_cast<int>(script.size())) click = script[n - 1];
        } else {
          const auto snap = session->snapshot();
          std::vector<PredictionView> preds;
          for (int idx : scene.keyframe_indices) {
            preds.push_back(PredictLabels(*snap->params, RenderSynthetic(scene, idx).frame,
                                          snap->active_classes, cfg.eval_samples,
                                          session->config().mapping.sampling,
                                          cfg.eval_stride));
          }
          click = ErrorGuidedClick(gt, preds, num_classes, curve.clicks, &click_rng);
        }
        break;
      case Strategy::kAutoRandom:
        click = RandomClick(gt, num_classes, session->annotations(),
                            run_cfg.session.query.exclusion_radius, &click_rng);
        break;
      default: {
        const auto version = session->snapshot()->version;
        const auto maps = session->maps_version();
        if (!maps || version - *maps >= static_cast<uint64_t>(refresh_every)) {
          session->refresh_maps();
        }
        for (int attempt = 0; attempt < 16 && !click; ++attempt) {
          const QueryProposal q = session->next_query();
          const int label = gt[q.keyframe].at(q.u, q.v);
          if (label >= 0 && label < num_classes) click = ScriptedClick{q.keyframe, q.u, q.v, label};
        }
        break;
      }
    }
    if (!click) {
      spdlog::warn("{} seed {}: no eligible click after {} clicks", StrategyName(strategy), seed,
                   n - 1);
      break;
    }
    const AnnotationSource source = strategy == Strategy::kScriptedManual
                                        ? AnnotationSource::kClick
                                        : AnnotationSource::kQueryAnswer;
    session->annotate(click->keyframe, click->u, click->v, FlatLabel{click->class_id}, source);
    curve.clicks.push_back(*click);
    session->run(cfg.steps_per_click);
    score(n);
  }

  if (save_to) {
    session->save(*save_to);
    std::ofstream scene_out(fs::path(*save_to) / "scene.json");
    scene_out << SceneToJson(scene).dump(2) << "\n";
    std::ofstream curve_out(fs::path(*save_to) / "curve.json");
    curve_out << CurveToJson(curve).dump(2) << "\n";
    if (!scene_out || !curve_out) throw Error(ErrorCode::kIo, "cannot write " + *save_to);
  }
  return curve;
}

std::vector<CurvePoint> AggregateCurves(std::span<const SessionCurve> curves) {
  std::map<std::pair<std::string, int>, std::vector<double>> groups;
  std::vector<std::string> order;
  for (const auto& c : curves) {
    const std::string name(StrategyName(c.strategy));
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
    for (const auto& r : c.keyframe_reports) groups[{name, r.clicks}].push_back(r.miou);
  }
  std::vector<CurvePoint> out;
  for (const auto& name : order) {
    for (const auto& [key, values] : groups) {
      if (key.first != name) continue;
      CurvePoint p;
      p.strategy = name;
      p.clicks = key.second;
      p.seeds = static_cast<int>(values.size());
      for (double v : values) p.mean += v;
      p.mean /= p.seeds;
      if (p.seeds > 1) {
        double ss = 0;
        for (double v : values) ss += (v - p.mean) * (v - p.mean);
        p.stddev = std::sqrt(ss / (p.seeds - 1));
      }
      out.push_back(p);
    }
  }
  return out;
}

std::vector<std::string> EmitCurves(std::span<const SessionCurve> curves,
                                    const std::string& prefix) {
  if (curves.empty()) throw Error(ErrorCode::kInvalidArgument, "no sessions to tabulate");
  const auto points = AggregateCurves(curves);
  const std::string csv_path = prefix + ".csv", dat_path = prefix + ".dat";
  const fs::path parent = fs::path(prefix).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream csv(csv_path), dat(dat_path);
  csv << "strategy,clicks,mean_miou,std_miou,seeds\n";
  char buf[128];
  std::string current;
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.6f,%.6f,%d\n", p.strategy.c_str(), p.clicks, p.mean,
                  p.stddev, p.seeds);
    csv << buf;
    if (p.strategy != current) {
      if (!current.empty()) dat << "\n\n";
      dat << "# " << p.strategy << "\n# clicks mean_miou std_miou\n";
      current = p.strategy;
    }
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f\n", p.clicks, p.mean, p.stddev);
    dat << buf;
  }
  if (!csv || !dat) throw Error(ErrorCode::kIo, "cannot write curve files under " + prefix);
  return {csv_path, dat_path};
}

std::vector<ThresholdCheck> CheckScaling(std::span<const CurvePoint> points, int num_classes,
                                         const ScalingThresholds& thresholds) {
  std::vector<ThresholdCheck> out;
  if (points.empty()) return out;
  const std::string& strategy = points.front().strategy;
  for (const auto& p : points) {
    if (p.clicks == 0) {
      const double bound = 1.0 / num_classes + thresholds.chance_slack;
      out.push_back({strategy + " near-chance at 0 clicks", p.mean, bound, p.mean <= bound});
    }
    for (const auto& [clicks, min_miou] : thresholds.min_miou) {
      if (p.clicks != clicks) continue;
      out.push_back({strategy + " mIoU at " + std::to_string(clicks) + " clicks", p.mean,
                     min_miou, p.mean >= min_miou});
    }
  }
  // Soft monotonicity up to the last thresholded click count.
  int last = 0;
  for (const auto& t : thresholds.min_miou) last = std::max(last, t.first);
  for (size_t i = 1; i < points.size() && points[i].clicks <= last; ++i) {
    const double bound = points[i - 1].mean - thresholds.monotone_slack;
    out.push_back({strategy + " no drop from " + std::to_string(points[i - 1].clicks) + " to " +
                       std::to_string(points[i].clicks) + " clicks",
                   points[i].mean, bound, points[i].mean >= bound});
  }
  return out;
}

std::optional<ThresholdCheck> CheckOrdering(std::span<const CurvePoint> points,
                                            const std::string& better, const std::string& worse) {
  std::map<int, double> a, b;
  for (const auto& p : points) {
    if (p.strategy == better) a[p.clicks] = p.mean;
    if (p.strategy == worse) b[p.clicks] = p.mean;
  }
  for (auto it = a.rbegin(); it != a.rend(); ++it) {
    const auto other = b.find(it->first);
    if (other == b.end()) continue;
    const double gap = it->second - other->second;
    return ThresholdCheck{better + " - " + worse + " at " + std::to_string(it->first) + " clicks",
                          gap, 0.0, gap >= 0};
  }
  return std::nullopt;
}

std::vector<ThresholdCheck> AcceptanceChecks(std::span<const SessionCurve> curves,
                                             int num_classes) {
  const auto points = AggregateCurves(curves);
  std::vector<CurvePoint> manual;
  for (const auto& p : points) {
    if (p.strategy == StrategyName(Strategy::kScriptedManual)) manual.push_back(p);
  }
  auto out = CheckScaling(manual, num_classes);
  if (auto c = CheckOrdering(points, std::string(StrategyName(Strategy::kAutoEntropy)),
                             std::string(StrategyName(Strategy::kAutoRandom)))) {
    out.push_back(*c);
  }
  return out;
}

}  // namespace scenelabel
