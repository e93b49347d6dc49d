#include <filesystem>
#include <thread>

#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>

#include "scenelabel/service.hpp"
#include "scenelabel/synthetic.hpp"

// After Eigen: resolv.h, pulled in by httplib, defines a `_res` macro.
#include <httplib.h>

namespace scenelabel {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::shared_ptr<Session> ToySession() {
  SessionConfig cfg;
  cfg.hidden_width = 32;
  cfg.frequency_bands = 4;
  cfg.max_classes = 4;
  cfg.mapping.samples_per_ray = 12;
  cfg.mapping.batch.batch_pixels = 64;
  cfg.preview_samples = 12;
  cfg.query.samples_per_ray = 8;
  cfg.query.stride = 8;
  cfg.scene_bound = ToyScene().bound;
  cfg.seed = 2;
  auto s = std::make_shared<Session>(cfg);
  const SyntheticScene scene = ToyScene();
  for (int i : scene.keyframe_indices) s->ingest_frame(RenderSynthetic(scene, i).frame);
  return s;
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    session_ = ToySession();
    ServiceOptions opt;
    opt.session_id = "toy";
    opt.scene_ref = "toy";
    opt.export_dir = (fs::temp_directory_path() / "scenelabel_service_exports").string();
    service_ = std::make_unique<LabelService>(session_, opt);
    port_ = service_->start();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(60);
  }
  void TearDown() override { service_->stop(); }

  json Json(const httplib::Result& r) { return json::parse(r->body); }
  httplib::Result PostJson(const std::string& path, const json& body) {
    return client_->Post(path, body.dump(), "application/json");
  }

  std::shared_ptr<Session> session_;
  std::unique_ptr<LabelService> service_;
  std::unique_ptr<httplib::Client> client_;
  int port_ = 0;
};

TEST_F(ServiceTest, ListsKeyframesAndSession) {
  auto r = client_->Get("/api/keyframes");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  const json list = Json(r)["keyframes"];
  ASSERT_EQ(list.size(), 6u);
  EXPECT_EQ(list[2]["id"], 2);
  EXPECT_EQ(list[2]["width"], 160);
  r = client_->Get("/api/session");
  EXPECT_EQ(Json(r)["mode"], "flat");
  EXPECT_EQ(Json(r)["status"], "paused");
}

TEST_F(ServiceTest, ClickErrorsAreStructured) {
  auto r = PostJson("/api/keyframes/0/clicks", {{"u", 10}, {"v", 10}, {"class", "floor"}});
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(Json(r)["annotations"], 1);

  r = PostJson("/api/keyframes/0/clicks", {{"u", 500}, {"v", 10}, {"class", "floor"}});
  EXPECT_EQ(r->status, 400);
  EXPECT_EQ(Json(r)["error"]["code"], "out_of_range");
  r = PostJson("/api/keyframes/9/clicks", {{"u", 1}, {"v", 1}, {"class", "floor"}});
  EXPECT_EQ(r->status, 404);
  EXPECT_EQ(Json(r)["error"]["code"], "unknown_frame");
  r = PostJson("/api/keyframes/0/clicks", {{"u", 1}, {"v", 1}, {"node", "01"}});
  EXPECT_EQ(r->status, 409);
  EXPECT_EQ(Json(r)["error"]["code"], "mode_mismatch");
  r = client_->Post("/api/keyframes/0/clicks", "{not json", "application/json");
  EXPECT_EQ(r->status, 400);
  EXPECT_EQ(Json(r)["error"]["code"], "parse_error");
  EXPECT_EQ(session_->num_annotations(), 1u);

  r = client_->Delete("/api/keyframes/0/clicks?u=10&v=10");
  EXPECT_EQ(Json(r)["removed"], true);
  EXPECT_EQ(session_->num_annotations(), 0u);
}

TEST_F(ServiceTest, PreviewShowsClickedClassAfterSettling) {
  const SyntheticScene scene = ToyScene();
  const SyntheticView view = RenderSynthetic(scene, scene.keyframe_indices[0]);
  // The user clicks into a map whose geometry has already been reconstructed.
  constexpr int kReconstructionSteps = 400;
  constexpr int kSettleSteps = 50;
  session_->run(kReconstructionSteps);
  // One click per visible object at a pixel well inside it.
  std::vector<std::pair<int, int>> clicks;
  for (int cls = 0; cls < 3; ++cls) {
    for (int v = 10; v < 110 && clicks.size() <= static_cast<size_t>(cls); v += 2) {
      for (int u = 10; u < 150; u += 2) {
        bool inside = true;
        for (int dv = -3; dv <= 3; ++dv) {
          for (int du = -3; du <= 3; ++du) inside &= view.labels.at(u + du, v + dv) == cls;
        }
        if (inside) {
          clicks.emplace_back(u, v);
          break;
        }
      }
    }
    ASSERT_EQ(clicks.size(), static_cast<size_t>(cls + 1));
    const auto [u, v] = clicks.back();
    auto r = PostJson("/api/keyframes/0/clicks",
                      {{"u", u}, {"v", v}, {"class", scene.class_names[cls]}});
    ASSERT_EQ(r->status, 200);
  }
  session_->run(kSettleSteps);
  auto r = client_->Get("/api/keyframes/0/preview?kind=semantics");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(r->get_header_value("X-Snapshot-Version"),
            std::to_string(kReconstructionSteps + kSettleSteps));
  const std::vector<uint8_t> bytes(r->body.begin(), r->body.end());
  const cv::Mat img = cv::imdecode(bytes, cv::IMREAD_COLOR);
  ASSERT_EQ(img.cols, 160);
  const LabelSchema schema = session_->schema();
  for (int cls = 0; cls < 3; ++cls) {
    const auto [u, v] = clicks[cls];
    const cv::Vec3b px = img.at<cv::Vec3b>(v, u);
    const Rgb8 want = schema.classes.colour(cls);
    EXPECT_EQ((Rgb8{px[2], px[1], px[0]}), want) << scene.class_names[cls];
  }
}

TEST_F(ServiceTest, PreviewVersionsAreMonotone) {
  session_->start();
  uint64_t last = 0;
  for (int i = 0; i < 3; ++i) {
    auto r = client_->Get("/api/keyframes/1/preview?kind=overlay&stride=8&opacity=0.3");
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200);
    const uint64_t v = std::stoull(r->get_header_value("X-Snapshot-Version"));
    EXPECT_GE(v, last);
    last = v;
  }
  session_->stop();
  auto r = client_->Get("/api/keyframes/1/preview?kind=hologram");
  EXPECT_EQ(r->status, 400);
  r = client_->Get("/api/keyframes/1/preview?stride=two");
  EXPECT_EQ(r->status, 400);
}

TEST_F(ServiceTest, SchemaEditsAreValidated) {
  PostJson("/api/classes", {{"name", "floor"}});
  auto r = PostJson("/api/classes", {{"name", "box"}});
  EXPECT_EQ(Json(r)["id"], 1);
  PostJson("/api/keyframes/0/clicks", {{"u", 3}, {"v", 3}, {"class_id", 1}});
  r = client_->Get("/api/schema");
  json schema = Json(r);
  EXPECT_EQ(schema["classes"].size(), 2u);
  // Dropping a class that is still annotated is refused.
  json dropped = schema;
  dropped["classes"].erase(1);
  r = client_->Put("/api/schema", dropped.dump(), "application/json");
  EXPECT_GE(r->status, 400);
  EXPECT_LT(r->status, 500);
  EXPECT_EQ(session_->schema().classes.size(), 2);
  r = client_->Put("/api/schema", schema.dump(), "application/json");
  EXPECT_EQ(r->status, 200);
}

TEST_F(ServiceTest, HandsFreeQueryRoundTrip) {
  PostJson("/api/classes", {{"name", "floor"}});
  PostJson("/api/keyframes/0/clicks", {{"u", 3}, {"v", 3}, {"class_id", 0}});
  session_->run(2);
  auto r = client_->Get("/api/query/next");
  ASSERT_EQ(r->status, 200);
  const json q = Json(r);
  EXPECT_EQ(q["snapshot"], 2);
  r = PostJson("/api/query/answer",
               {{"keyframe", q["keyframe"]}, {"u", q["u"]}, {"v", q["v"]}, {"class", "floor"}});
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(Json(r)["annotations"], 2);
  r = client_->Get("/api/annotations");
  EXPECT_EQ(Json(r)["annotations"][1]["source"], "query_answer");
  r = client_->Get("/api/stats");
  EXPECT_EQ(Json(r)["steps"], 2);
  EXPECT_EQ(Json(r)["clicks"], 2);
}

TEST_F(ServiceTest, MeshExportJob) {
  PostJson("/api/classes", {{"name", "floor"}});
  session_->run(1);
  auto r = PostJson("/api/mesh", {{"resolution", 24}, {"iso", 0.5}});
  ASSERT_EQ(r->status, 202);
  const int job = Json(r)["job"];
  json state;
  for (int i = 0; i < 600; ++i) {
    state = Json(client_->Get("/api/jobs/" + std::to_string(job)));
    if (state["state"] == "done" || state["state"] == "failed") break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  ASSERT_EQ(state["state"], "done") << state.dump();
  EXPECT_EQ(state["file"], "toy_v000001_r24.ply");
  r = client_->Get(state["download"].get<std::string>());
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->body.rfind("ply\n", 0), 0u);
  EXPECT_EQ(client_->Get("/api/jobs/99")->status, 404);
  EXPECT_EQ(PostJson("/api/mesh", {{"resolution", 1}})->status, 400);
}

TEST_F(ServiceTest, EventStreamAnnouncesSnapshots) {
  PostJson("/api/classes", {{"name", "floor"}});
  session_->start();
  std::string received;
  auto r = client_->Get("/api/events?limit=2&since=0",
                        [&](const char* data, size_t n) {
                          received.append(data, n);
                          return true;
                        });
  session_->stop();
  ASSERT_TRUE(r);
  EXPECT_EQ(r->get_header_value("Content-Type"), "text/event-stream");
  EXPECT_NE(received.find("event: snapshot\ndata: {\"version\":"), std::string::npos);
}

TEST(ServiceToken, RequestsNeedTheToken) {
  ServiceOptions opt;
  opt.token = "s3cret";
  LabelService service(ToySession(), opt);
  const int port = service.start();
  httplib::Client c("127.0.0.1", port);
  auto r = c.Get("/api/stats");
  EXPECT_EQ(r->status, 401);
  r = c.Get("/api/stats", {{"X-Session-Token", "s3cret"}});
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(c.Get("/api/stats?token=s3cret")->status, 200);
  service.stop();
}

TEST(ServiceErrors, StatusMapping) {
  EXPECT_EQ(HttpStatus(ErrorCode::kUnknownFrame), 404);
  EXPECT_EQ(HttpStatus(ErrorCode::kModeMismatch), 409);
  EXPECT_EQ(HttpStatus(ErrorCode::kBusy), 409);
  EXPECT_EQ(HttpStatus(ErrorCode::kOutOfRange), 400);
  EXPECT_EQ(ErrorBody(ErrorCode::kBusy, "x")["error"]["code"], "busy");
}

}  // namespace
}  // namespace scenelabel
