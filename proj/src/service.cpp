#include "scenelabel/service.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <httplib.h>
#include <opencv2/imgcodecs.hpp>
#include <spdlog/spdlog.h>

#include "scenelabel/mesh.hpp"

namespace scenelabel {

namespace fs = std::filesystem;
using nlohmann::json;

int HttpStatus(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kOutOfRange:
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kNonFinite:
    case ErrorCode::kParse:
      return 400;
    case ErrorCode::kUnknownFrame:
    case ErrorCode::kNotFound:
      return 404;
    case ErrorCode::kModeMismatch:
    case ErrorCode::kBusy:
      return 409;
    case ErrorCode::kLimit:
      return 422;
    case ErrorCode::kIo:
      return 500;
  }
  return 500;
}

json ErrorBody(ErrorCode code, const std::string& message) {
  return {{"error", {{"code", ErrorCodeName(code)}, {"message", message}}}};
}

namespace {

void SendJson(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json ParseBody(const httplib::Request& req) {
  try {
    return req.body.empty() ? json::object() : json::parse(req.body);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("request body is not JSON: ") + e.what());
  }
}

int IntParam(const httplib::Request& req, const std::string& key, int fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string text = req.get_param_value(key);
  try {
    size_t used = 0;
    const int value = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kParse, "query parameter " + key + " must be an integer");
  }
}

double DoubleParam(const httplib::Request& req, const std::string& key, double fallback) {
  if (!req.has_param(key)) return fallback;
  try {
    return std::stod(req.get_param_value(key));
  } catch (const std::exception&) {
    throw Error(ErrorCode::kParse, "query parameter " + key + " must be a number");
  }
}

int RequireInt(const json& body, const char* key) {
  if (!body.contains(key) || !body[key].is_number_integer()) {
    throw Error(ErrorCode::kParse, std::string("field '") + key + "' must be an integer");
  }
  return body[key].get<int>();
}

// Label from {"class": name} or {"class_id": n} (flat) or {"node": "0110"}.
struct LabelArg {
  SemanticPayload payload;
  std::optional<std::string> class_name;
};

LabelArg ParseLabel(const json& body) {
  if (body.contains("node")) {
    if (!body["node"].is_string()) throw Error(ErrorCode::kParse, "'node' must be a bit string");
    return {HierLabel{PathFromString(body["node"].get<std::string>())}, std::nullopt};
  }
  if (body.contains("class")) {
    if (!body["class"].is_string()) throw Error(ErrorCode::kParse, "'class' must be a name");
    return {FlatLabel{0}, body["class"].get<std::string>()};
  }
  if (body.contains("class_id")) return {FlatLabel{RequireInt(body, "class_id")}, std::nullopt};
  throw Error(ErrorCode::kParse, "a label needs 'class', 'class_id' or 'node'");
}

std::vector<uint8_t> EncodePng(const Rgb8Image& image) {
  cv::Mat bgr(image.height, image.width, CV_8UC3);
  for (int v = 0; v < image.height; ++v) {
    for (int u = 0; u < image.width; ++u) {
      auto& px = bgr.at<cv::Vec3b>(v, u);
      px[0] = image.at(u, v, 2);
      px[1] = image.at(u, v, 1);
      px[2] = image.at(u, v, 0);
    }
  }
  std::vector<uint8_t> png;
  if (!cv::imencode(".png", bgr, png)) throw Error(ErrorCode::kIo, "PNG encoding failed");
  return png;
}

json ProposalToJson(const QueryProposal& q) {
  return {{"keyframe", q.keyframe}, {"u", q.u}, {"v", q.v}, {"value", q.value},
          {"snapshot", q.snapshot}};
}

json StatsToJson(const SessionStats& s) {
  return {{"steps", s.steps},
          {"skipped_steps", s.skipped_steps},
          {"recent_losses", s.recent_losses},
          {"clicks", s.clicks},
          {"keyframes", s.keyframes},
          {"uptime_seconds", s.uptime_seconds},
          {"status", SessionStatusName(s.status)}};
}

json AnnotationToJson(const Annotation& a) {
  json j = {{"keyframe", a.keyframe},
            {"u", a.u},
            {"v", a.v},
            {"timestamp", a.timestamp},
            {"source", AnnotationSourceName(a.source)}};
  if (const auto* flat = std::get_if<FlatLabel>(&a.payload)) {
    j["class_id"] = flat->class_id;
  } else {
    j["node"] = PathToString(std::get<HierLabel>(a.payload).bits);
  }
  return j;
}

struct MeshJob {
  std::string state = "pending";  // pending, running, done, failed
  std::string error;
  std::string path;
  size_t vertices = 0;
  size_t triangles = 0;
};

}  // namespace

struct LabelService::Impl {
  ServiceOptions options;
  std::shared_ptr<Session> session;
  httplib::Server server;
  std::thread thread;
  std::atomic<bool> stopping{false};

  std::mutex job_mutex;
  std::map<int, MeshJob> jobs;
  int next_job = 1;
  std::vector<std::thread> workers;

  json job_json(int id, const MeshJob& job) const {
    json j = {{"job", id}, {"state", job.state}};
    if (job.state == "failed") j["error"] = job.error;
    if (job.state == "done") {
      j["vertices"] = job.vertices;
      j["triangles"] = job.triangles;
      j["file"] = fs::path(job.path).filename().string();
      j["download"] = "/api/jobs/" + std::to_string(id) + "/mesh.ply";
    }
    return j;
  }

  void run_mesh_job(int id, int resolution, double iso, std::optional<std::set<int>> filter,
                    int level) {
    {
      std::lock_guard lock(job_mutex);
      jobs[id].state = "running";
    }
    MeshJob result;
    try {
      const auto snap = session->snapshot();
      const LabelledMesh mesh =
          ExtractLabelledMesh(*snap->params, snap->schema, snap->active_classes,
                              session->config().scene_bound, resolution, iso, level);
      fs::create_directories(options.export_dir);
      char name[96];
      std::snprintf(name, sizeof name, "%s_v%06llu_r%d.ply", options.session_id.c_str(),
                    static_cast<unsigned long long>(snap->version), resolution);
      result.path = (fs::path(options.export_dir) / name).string();
      SavePly(result.path, mesh, filter);
      result.vertices = mesh.mesh.vertices.size();
      result.triangles = mesh.mesh.triangles.size();
      result.state = "done";
    } catch (const std::exception& e) {
      result.state = "failed";
      result.error = e.what();
    }
    std::lock_guard lock(job_mutex);
    jobs[id] = result;
  }

  void routes();
};

void LabelService::Impl::routes() {
  auto& s = *session;

  server.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    if (options.token.empty()) return httplib::Server::HandlerResponse::Unhandled;
    const std::string given = req.has_header("X-Session-Token")
                                  ? req.get_header_value("X-Session-Token")
                                  : req.get_param_value("token");
    if (given == options.token) return httplib::Server::HandlerResponse::Unhandled;
    SendJson(res, ErrorBody(ErrorCode::kInvalidArgument, "missing or wrong session token"), 401);
    return httplib::Server::HandlerResponse::Handled;
  });

  server.set_exception_handler(
      [](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
          std::rethrow_exception(ep);
        } catch (const Error& e) {
          SendJson(res, ErrorBody(e.code(), e.what()), HttpStatus(e.code()));
        } catch (const std::exception& e) {
          SendJson(res, ErrorBody(ErrorCode::kIo, e.what()), 500);
        }
      });

  server.Get("/api/session", [this, &s](const httplib::Request&, httplib::Response& res) {
    SendJson(res, {{"id", options.session_id},
                   {"scene", options.scene_ref},
                   {"mode", s.config().mode == SemanticMode::kFlat ? "flat" : "hierarchical"},
                   {"status", SessionStatusName(s.stats().status)},
                   {"max_classes", s.config().max_classes},
                   {"tree_depth", s.config().tree_depth}});
  });

  server.Get("/api/keyframes", [&s](const httplib::Request&, httplib::Response& res) {
    json list = json::array();
    for (size_t i = 0; i < s.num_keyframes(); ++i) {
      const Keyframe kf = s.keyframe(static_cast<int>(i));
      const std::string base = "/api/keyframes/" + std::to_string(kf.id);
      list.push_back({{"id", kf.id},
                      {"width", kf.width()},
                      {"height", kf.height()},
                      {"thumbnail", base + "/preview?kind=colour&stride=4"}});
    }
    SendJson(res, {{"keyframes", list}});
  });

  server.Get(R"(/api/keyframes/(\d+)/preview)",
             [&s](const httplib::Request& req, httplib::Response& res) {
               const int id = std::stoi(req.matches[1]);
               PreviewRequest pr;
               pr.kind = ParsePreviewKind(req.has_param("kind") ? req.get_param_value("kind")
                                                                : "semantics");
               pr.stride = IntParam(req, "stride", 1);
               pr.opacity = DoubleParam(req, "opacity", 0.5);
               pr.level = IntParam(req, "level", -1);
               const Preview p = s.render_preview(id, pr);
               const auto png = EncodePng(p.image);
               res.set_header("X-Snapshot-Version", std::to_string(p.version));
               res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
             });

  server.Post(R"(/api/keyframes/(\d+)/clicks)",
              [&s](const httplib::Request& req, httplib::Response& res) {
                const int id = std::stoi(req.matches[1]);
                const json body = ParseBody(req);
                LabelArg label = ParseLabel(body);
                const size_t count = s.annotate(id, RequireInt(body, "u"), RequireInt(body, "v"),
                                                label.payload, AnnotationSource::kClick,
                                                label.class_name);
                SendJson(res, {{"ok", true}, {"annotations", count}});
              });

  server.Delete(R"(/api/keyframes/(\d+)/clicks)",
                [&s](const httplib::Request& req, httplib::Response& res) {
                  const int id = std::stoi(req.matches[1]);
                  const bool removed = s.remove_annotation(id, IntParam(req, "u", -1),
                                                           IntParam(req, "v", -1));
                  SendJson(res, {{"removed", removed}, {"annotations", s.num_annotations()}});
                });

  server.Get("/api/annotations", [&s](const httplib::Request&, httplib::Response& res) {
    json list = json::array();
    for (const auto& a : s.annotations()) list.push_back(AnnotationToJson(a));
    SendJson(res, {{"annotations", list}});
  });

  server.Get("/api/schema", [&s](const httplib::Request&, httplib::Response& res) {
    SendJson(res, SchemaToJson(s.schema()));
  });

  server.Put("/api/schema", [&s](const httplib::Request& req, httplib::Response& res) {
    s.set_schema(SchemaFromJson(ParseBody(req)));
    SendJson(res, SchemaToJson(s.schema()));
  });

  server.Post("/api/classes", [&s](const httplib::Request& req, httplib::Response& res) {
    const json body = ParseBody(req);
    if (!body.contains("name") || !body["name"].is_string()) {
      throw Error(ErrorCode::kParse, "field 'name' must be a string");
    }
    const int id = s.add_class(body["name"].get<std::string>());
    SendJson(res, {{"id", id}, {"classes", s.schema().classes.size()}});
  });

  server.Get("/api/query/next", [&s](const httplib::Request&, httplib::Response& res) {
    SendJson(res, ProposalToJson(s.next_query()));
  });

  server.Post("/api/query/answer", [&s](const httplib::Request& req, httplib::Response& res) {
    const json body = ParseBody(req);
    QueryProposal q;
    q.keyframe = RequireInt(body, "keyframe");
    q.u = RequireInt(body, "u");
    q.v = RequireInt(body, "v");
    LabelArg label = ParseLabel(body);
    const size_t count = s.answer_query(q, label.payload, label.class_name);
    SendJson(res, {{"ok", true}, {"annotations", count}});
  });

  server.Post("/api/optimiser/start", [&s](const httplib::Request&, httplib::Response& res) {
    s.start();
    SendJson(res, {{"status", SessionStatusName(s.stats().status)}});
  });

  server.Post("/api/optimiser/stop", [&s](const httplib::Request&, httplib::Response& res) {
    s.stop();
    SendJson(res, {{"status", SessionStatusName(s.stats().status)}});
  });

  server.Get("/api/stats", [&s](const httplib::Request&, httplib::Response& res) {
    SendJson(res, StatsToJson(s.stats()));
  });

  server.Post("/api/mesh", [this](const httplib::Request& req, httplib::Response& res) {
    const json body = ParseBody(req);
    const int resolution = body.value("resolution", 64);
    const double iso = body.value("iso", 0.5);
    const int level = body.value("level", -1);
    if (resolution < 2 || resolution > 512) {
      throw Error(ErrorCode::kOutOfRange, "resolution must be in [2, 512]");
    }
    if (!(iso > 0 && iso < 1)) throw Error(ErrorCode::kOutOfRange, "iso must be in (0, 1)");
    std::optional<std::set<int>> filter;
    if (body.contains("labels")) {
      if (!body["labels"].is_array()) throw Error(ErrorCode::kParse, "'labels' must be a list");
      filter = body["labels"].get<std::set<int>>();
    }
    int id = 0;
    {
      std::lock_guard lock(job_mutex);
      id = next_job++;
      jobs[id] = MeshJob{};
      workers.emplace_back([this, id, resolution, iso, filter, level] {
        run_mesh_job(id, resolution, iso, filter, level);
      });
    }
    SendJson(res, {{"job", id}, {"status", "/api/jobs/" + std::to_string(id)}}, 202);
  });

  server.Get(R"(/api/jobs/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
    const int id = std::stoi(req.matches[1]);
    std::lock_guard lock(job_mutex);
    const auto it = jobs.find(id);
    if (it == jobs.end()) throw Error(ErrorCode::kNotFound, "no job " + std::to_string(id));
    SendJson(res, job_json(id, it->second));
  });

  server.Get(R"(/api/jobs/(\d+)/mesh\.ply)",
             [this](const httplib::Request& req, httplib::Response& res) {
               const int id = std::stoi(req.matches[1]);
               std::string path;
               {
                 std::lock_guard lock(job_mutex);
                 const auto it = jobs.find(id);
                 if (it == jobs.end()) throw Error(ErrorCode::kNotFound, "no such job");
                 if (it->second.state != "done") {
                   throw Error(ErrorCode::kBusy, "job is " + it->second.state);
                 }
                 path = it->second.path;
               }
               std::ifstream in(path, std::ios::binary);
               if (!in) throw Error(ErrorCode::kIo, "cannot read " + path);
               std::string data((std::istreambuf_iterator<char>(in)), {});
               res.set_header("Content-Disposition",
                              "attachment; filename=\"" + fs::path(path).filename().string() + "\"");
               res.set_content(std::move(data), "application/x-ply");
             });

  // One-way stream: "snapshot" when the optimiser publishes, "query" when new
  // uncertainty maps make a fresh proposal available.
  server.Get("/api/events", [this, &s](const httplib::Request& req, httplib::Response& res) {
    const int limit = IntParam(req, "limit", -1);  // events before closing; -1 = unbounded
    struct Cursor {
      uint64_t version = 0;
      std::optional<uint64_t> maps;
      int sent = 0;
    };
    auto cursor = std::make_shared<Cursor>();
    cursor->version = IntParam(req, "since", -1) >= 0
                          ? static_cast<uint64_t>(IntParam(req, "since", 0))
                          : s.snapshot()->version;
    cursor->maps = s.maps_version();
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream", [this, &s, cursor, limit](size_t, httplib::DataSink& sink) {
          if (stopping.load()) {
            sink.done();
            return true;
          }
          const uint64_t v = s.wait_for_update(
              cursor->version, std::chrono::milliseconds(options.event_poll_ms));
          std::string out;
          if (v > cursor->version) {
            cursor->version = v;
            out += "event: snapshot\ndata: " + json{{"version", v}}.dump() + "\n\n";
            ++cursor->sent;
          }
          const auto maps = s.maps_version();
          if (maps && maps != cursor->maps) {
            cursor->maps = maps;
            out += "event: query\ndata: " + json{{"maps_version", *maps}}.dump() + "\n\n";
            ++cursor->sent;
          }
          if (out.empty()) out = ": keep-alive\n\n";
          if (!sink.write(out.data(), out.size())) return false;
          if (limit >= 0 && cursor->sent >= limit) sink.done();
          return true;
        });
  });
}

LabelService::LabelService(std::shared_ptr<Session> session, ServiceOptions options)
    : session_(std::move(session)), impl_(std::make_unique<Impl>()) {
  if (!session_) throw Error(ErrorCode::kInvalidArgument, "service needs a session");
  impl_->options = std::move(options);
  impl_->session = session_;
  impl_->routes();
}

LabelService::~LabelService() { stop(); }

int LabelService::start(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host)
                              : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound <= 0) {
    throw Error(ErrorCode::kIo, "cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  spdlog::info("label service listening on {}:{}", host, bound);
  return bound;
}

void LabelService::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void LabelService::stop() {
  if (!impl_) return;
  impl_->stopping = true;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(impl_->job_mutex);
    workers.swap(impl_->workers);
  }
  for (auto& w : workers) w.join();
}

}  // namespace scenelabel
