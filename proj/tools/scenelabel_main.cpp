// Command-line front end: simulated labelling runs, scoring, curve tables,
// mesh export, the label service and the acceptance suite.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <pthread.h>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "acceptance.hpp"
#include "scenelabel/data_io.hpp"
#include "scenelabel/eval.hpp"
#include "scenelabel/mesh.hpp"
#include "scenelabel/service.hpp"

namespace fs = std::filesystem;
using namespace scenelabel;

namespace {

struct ServeArgs {
  int port = 0;
  std::string host = "127.0.0.1";
  std::string token;
  std::string export_dir = "exports";
  bool paused = false;
};

struct SourceArgs {
  std::string scene;
  std::string dataset;
  std::string session_dir;
  std::string config;
};

SessionConfig BaseConfig(const std::string& path) {
  return path.empty() ? SessionConfig{} : LoadConfig(path);
}

bool ConfigSetsBound(const std::string& path) {
  if (path.empty()) return false;
  std::ifstream in(path);
  return nlohmann::json::parse(in, nullptr, false).contains("scene_bound");
}

std::shared_ptr<Session> OpenSession(const SourceArgs& src) {
  if (!src.session_dir.empty()) return Session::load(src.session_dir);
  SessionConfig cfg = BaseConfig(src.config);
  if (!src.dataset.empty()) {
    SequenceReader reader(src.dataset);
    std::vector<Frame> frames;
    while (auto f = reader.next()) frames.push_back(std::move(*f));
    if (frames.empty()) throw Error(ErrorCode::kInvalidArgument, "dataset has no frames");
    if (!ConfigSetsBound(src.config)) cfg.scene_bound = BoundFromFrames(frames);
    auto session = std::make_shared<Session>(cfg);
    for (const auto& f : frames) session->ingest_frame(f);
    return session;
  }
  const SyntheticScene scene = ResolveScene(src.scene.empty() ? "toy" : src.scene);
  cfg.scene_bound = scene.bound;
  auto session = std::make_shared<Session>(cfg);
  for (int idx : scene.keyframe_indices) session->ingest_frame(RenderSynthetic(scene, idx).frame);
  return session;
}

int Serve(std::shared_ptr<Session> session, const SourceArgs& src, const ServeArgs& args) {
  // Block termination signals before any thread starts so that only sigwait
  // below sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  ServiceOptions opt;
  opt.scene_ref = !src.dataset.empty() ? src.dataset
                  : !src.session_dir.empty() ? src.session_dir
                                             : (src.scene.empty() ? "toy" : src.scene);
  opt.session_id = fs::path(opt.scene_ref).stem().string();
  opt.export_dir = args.export_dir;
  opt.token = args.token;
  LabelService service(session, opt);
  const int port = service.start(args.host, args.port);
  if (!args.paused) session->start();
  std::printf("serving %s on http://%s:%d\n", opt.scene_ref.c_str(), args.host.c_str(), port);
  std::fflush(stdout);
  int sig = 0;
  sigwait(&signals, &sig);
  spdlog::info("signal {}, shutting down", sig);
  session->stop();
  service.stop();
  return 0;
}

std::vector<int> DefaultCheckpoints(int budget) {
  std::vector<int> out;
  for (int c : EvalConfig{}.checkpoints) {
    if (c < budget) out.push_back(c);
  }
  out.push_back(budget);
  return out;
}

void PrintPoints(std::span<const SessionCurve> curves) {
  std::printf("%-16s %6s %9s %9s %5s\n", "strategy", "clicks", "mean_miou", "std_miou", "seeds");
  for (const auto& p : AggregateCurves(curves)) {
    std::printf("%-16s %6d %9.4f %9.4f %5d\n", p.strategy.c_str(), p.clicks, p.mean, p.stddev,
                p.seeds);
  }
}

// Prints every check and returns the exit code.
int ReportChecks(const std::vector<ThresholdCheck>& checks) {
  bool ok = true;
  for (const auto& c : checks) {
    std::printf("%s  %s: %.4f (bound %.4f)\n", c.pass ? "PASS" : "FAIL", c.name.c_str(), c.value,
                c.bound);
    ok &= c.pass;
  }
  if (checks.empty()) std::printf("no thresholds apply to these curves\n");
  return ok ? 0 : 1;
}

std::set<int> ParseLabels(const std::vector<int>& labels) {
  return std::set<int>(labels.begin(), labels.end());
}

SessionCurve ReadCurve(const std::string& dir) {
  const fs::path path = fs::path(dir) / "curve.json";
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  try {
    return CurveFromJson(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive neural scene labelling"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  // run
  auto* run = app.add_subcommand("run", "Simulated labelling session on a synthetic scene");
  SourceArgs run_src;
  std::string strategy = "scripted_manual", policy = "centroid", out_dir;
  int budget = 40, steps_per_click = EvalConfig{}.steps_per_click,
      warmup = EvalConfig{}.warmup_steps;
  uint64_t seed = 0;
  std::vector<int> checkpoints;
  std::string warm_start;
  bool held_out = false, run_assert = false;
  int serve_port = -1;
  ServeArgs serve_args;
  run->add_option("--scene", run_src.scene, "toy, desk or a scene JSON file")->default_val("desk");
  run->add_option("--dataset", run_src.dataset, "Sequence manifest (serve or reconstruct only)");
  run->add_option("--strategy", strategy,
                  "scripted_manual, auto_entropy, auto_least_confidence, auto_margin, auto_random");
  run->add_option("--policy", policy, "Scripted click policy: centroid or error_guided");
  run->add_option("--budget", budget, "Click budget")->check(CLI::NonNegativeNumber);
  run->add_option("--checkpoints", checkpoints, "Click counts to score (overrides --budget)")
      ->delimiter(',');
  run->add_option("--seed", seed);
  run->add_option("--config", run_src.config, "Session config JSON");
  run->add_option("--steps-per-click", steps_per_click)->check(CLI::NonNegativeNumber);
  run->add_option("--warmup", warmup, "Geometry steps before the first click")
      ->check(CLI::NonNegativeNumber);
  run->add_option("--warm-start", warm_start, "Directory caching the warmed-up session");
  run->add_option("--out", out_dir, "Session directory to write");
  run->add_flag("--held-out", held_out, "Also score non-keyframe views");
  run->add_flag("--assert", run_assert, "Exit nonzero when an acceptance threshold fails");
  run->add_option("--serve", serve_port, "Serve the scene or dataset on this port instead");
  run->add_option("--token", serve_args.token);
  run->add_option("--export-dir", serve_args.export_dir);

  // eval
  auto* eval = app.add_subcommand("eval", "Score a saved session against its scene");
  std::string eval_dir, eval_out;
  EvalConfig eval_cfg;
  bool eval_held_out = false, eval_assert = false;
  eval->add_option("session", eval_dir)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--stride", eval_cfg.eval_stride)->check(CLI::PositiveNumber);
  eval->add_option("--samples", eval_cfg.eval_samples)->check(CLI::PositiveNumber);
  eval->add_flag("--held-out", eval_held_out);
  eval->add_option("--out", eval_out, "Report JSON path");
  eval->add_flag("--assert", eval_assert, "Apply acceptance thresholds to the stored curve");

  // curves
  auto* curves = app.add_subcommand("curves", "Tabulate mIoU against clicks over sessions");
  std::vector<std::string> curve_dirs;
  std::string curve_prefix = "curves";
  bool curves_assert = false;
  int curves_classes = 0;
  curves->add_option("sessions", curve_dirs)->required()->check(CLI::ExistingDirectory);
  curves->add_option("--out", curve_prefix, "Output prefix for .csv and .dat");
  curves->add_flag("--assert", curves_assert);
  curves->add_option("--classes", curves_classes,
                     "Class count for the chance bound (default: from the first session's scene)");

  // serve
  auto* serve = app.add_subcommand("serve", "Label service over HTTP");
  SourceArgs serve_src;
  serve->add_option("--scene", serve_src.scene, "toy, desk or a scene JSON file");
  serve->add_option("--dataset", serve_src.dataset, "Sequence manifest");
  serve->add_option("--session", serve_src.session_dir, "Saved session directory");
  serve->add_option("--config", serve_src.config, "Session config JSON");
  serve->add_option("--port", serve_args.port, "0 picks a free port");
  serve->add_option("--host", serve_args.host);
  serve->add_option("--token", serve_args.token);
  serve->add_option("--export-dir", serve_args.export_dir);
  serve->add_flag("--paused", serve_args.paused, "Do not start the optimiser");

  // mesh
  auto* mesh = app.add_subcommand("mesh", "Export a labelled mesh from a saved session");
  std::string mesh_dir, mesh_out = "mesh.ply";
  int resolution = 64, level = -1;
  double iso = 0.5;
  std::vector<int> labels;
  mesh->add_option("session", mesh_dir)->required()->check(CLI::ExistingDirectory);
  mesh->add_option("--resolution", resolution, "Corners along the longest axis")
      ->check(CLI::Range(2, 512));
  mesh->add_option("--iso", iso)->check(CLI::Range(0.0, 1.0));
  mesh->add_option("--level", level, "Hierarchical cut level (-1 = full depth)");
  mesh->add_option("--labels", labels, "Keep only these labels")->delimiter(',');
  mesh->add_option("--out", mesh_out);

  // accept
  auto* accept = app.add_subcommand("accept", "Run the acceptance suite");
  AcceptanceOptions accept_opt;
  accept->add_option("--cache", accept_opt.cache_dir, "Directory for warm starts and runs");
  accept->add_option("--only", accept_opt.only, "Run criteria whose name contains this");
  accept->add_flag("--reuse-cache", accept_opt.reuse_cache, "Keep warm starts from an earlier run");
  accept_opt.cli_path = fs::absolute(argv[0]).string();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*run) {
      if (serve_port >= 0) {
        serve_args.port = serve_port;
        return Serve(OpenSession(run_src), run_src, serve_args);
      }
      if (!run_src.dataset.empty()) {
        // No ground truth: reconstruct and save.
        auto session = OpenSession(run_src);
        session->reseed(seed);
        session->run(warmup);
        const std::string dir = out_dir.empty() ? "runs/dataset" : out_dir;
        session->save(dir);
        std::printf("saved %zu keyframes after %d steps to %s\n", session->num_keyframes(),
                    warmup, dir.c_str());
        return 0;
      }
      const SyntheticScene scene = ResolveScene(run_src.scene);
      EvalConfig cfg;
      cfg.session = BaseConfig(run_src.config);
      cfg.checkpoints = checkpoints.empty() ? DefaultCheckpoints(budget) : checkpoints;
      cfg.policy = ParseClickPolicy(policy);
      cfg.steps_per_click = steps_per_click;
      cfg.warmup_steps = warmup;
      cfg.warm_start = warm_start;
      cfg.score_held_out = held_out;
      const Strategy strat = ParseStrategy(strategy);
      const std::string scene_name = fs::path(run_src.scene).stem().string();
      const std::string dir = out_dir.empty() ? "runs/" + scene_name + "_" +
                                                    std::string(StrategyName(strat)) + "_s" +
                                                    std::to_string(seed)
                                              : out_dir;
      const SessionCurve curve = RunSession(scene, scene_name, strat, seed, cfg, dir);
      const std::vector<SessionCurve> one = {curve};
      EmitCurves(one, (fs::path(dir) / "curve").string());
      PrintPoints(one);
      std::printf("session saved to %s\n", dir.c_str());
      return run_assert ? ReportChecks(AcceptanceChecks(one, scene.num_classes())) : 0;
    }
    if (*eval) {
      auto session = Session::load(eval_dir);
      const SyntheticScene scene = LoadScene((fs::path(eval_dir) / "scene.json").string());
      std::vector<int> views = scene.keyframe_indices;
      if (eval_held_out) {
        views.clear();
        for (int i = 0; i < static_cast<int>(scene.trajectory.size()); ++i) {
          if (std::find(scene.keyframe_indices.begin(), scene.keyframe_indices.end(), i) ==
              scene.keyframe_indices.end()) {
            views.push_back(i);
          }
        }
      }
      IoUReport report = ScoreViews(*session, scene, views, eval_cfg);
      report.clicks = static_cast<int>(session->num_annotations());
      const std::string text = ReportToJson(report).dump(2);
      std::printf("%s\n", text.c_str());
      if (!eval_out.empty()) {
        std::ofstream out(eval_out);
        out << text << "\n";
        if (!out) throw Error(ErrorCode::kIo, "cannot write " + eval_out);
      }
      if (eval_assert) {
        const std::vector<SessionCurve> one = {ReadCurve(eval_dir)};
        return ReportChecks(AcceptanceChecks(one, scene.num_classes()));
      }
      return 0;
    }
    if (*curves) {
      std::vector<SessionCurve> all;
      for (const auto& d : curve_dirs) all.push_back(ReadCurve(d));
      const auto files = EmitCurves(all, curve_prefix);
      PrintPoints(all);
      for (const auto& f : files) std::printf("wrote %s\n", f.c_str());
      if (!curves_assert) return 0;
      int classes = curves_classes;
      if (classes <= 0) {
        classes = LoadScene((fs::path(curve_dirs.front()) / "scene.json").string()).num_classes();
      }
      return ReportChecks(AcceptanceChecks(all, classes));
    }
    if (*serve) {
      return Serve(OpenSession(serve_src), serve_src, serve_args);
    }
    if (*mesh) {
      auto session = Session::load(mesh_dir);
      const auto snap = session->snapshot();
      const LabelledMesh m =
          ExtractLabelledMesh(*snap->params, snap->schema, snap->active_classes,
                              session->config().scene_bound, resolution, iso, level);
      std::optional<std::set<int>> filter;
      if (!labels.empty()) filter = ParseLabels(labels);
      SavePly(mesh_out, m, filter);
      std::printf("%zu vertices, %zu triangles -> %s\n", m.mesh.vertices.size(),
                  m.mesh.triangles.size(), mesh_out.c_str());
      return 0;
    }
    if (*accept) {
      return RunAcceptance(accept_opt, std::cout);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", std::string(ErrorCodeName(e.code())).c_str(),
                 e.what());
    return 2;
  }
  return 0;
}
