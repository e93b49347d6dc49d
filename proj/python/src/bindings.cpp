// Python module: sessions, synthetic scenes, scoring and mesh export.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "scenelabel/eval.hpp"
#include "scenelabel/mesh.hpp"
#include "scenelabel/session.hpp"
#include "scenelabel/synthetic.hpp"

namespace py = pybind11;
using namespace scenelabel;

namespace {

nlohmann::json ToJson(const py::object& obj) {
  if (obj.is_none()) return nlohmann::json::object();
  const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
  return nlohmann::json::parse(text);
}

py::object FromJson(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

template <typename T>
py::array_t<T> ToArray(const Image<T>& img) {
  std::vector<py::ssize_t> shape = {img.height, img.width};
  if (img.channels > 1) shape.push_back(img.channels);
  py::array_t<T> out(shape);
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

template <typename T>
Image<T> FromArray(const py::array_t<T, py::array::c_style | py::array::forcecast>& a,
                   int channels, const char* what) {
  const bool ok = channels == 1 ? a.ndim() == 2 : (a.ndim() == 3 && a.shape(2) == channels);
  if (!ok) {
    throw Error(ErrorCode::kShapeMismatch,
                std::string(what) + " must be " + (channels == 1 ? "H x W" : "H x W x 3"));
  }
  Image<T> img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), channels);
  std::copy(a.data(), a.data() + img.data.size(), img.data.begin());
  return img;
}

Pose PoseFromArray(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2 || a.shape(0) != 4 || a.shape(1) != 4) {
    throw Error(ErrorCode::kShapeMismatch, "pose must be 4 x 4");
  }
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = a.at(r, c);
  }
  Pose p;
  p.matrix() = m;
  return p;
}

py::array_t<double> PoseToArray(const Pose& p) {
  py::array_t<double> out({4, 4});
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) out.mutable_at(r, c) = p.matrix()(r, c);
  }
  return out;
}

py::dict FrameDict(const Frame& f) {
  py::dict d;
  d["colour"] = ToArray(f.colour);
  d["depth"] = ToArray(f.depth);
  d["pose"] = PoseToArray(f.world_from_camera);
  const auto& k = f.intrinsics;
  d["intrinsics"] = py::make_tuple(k.fx, k.fy, k.cx, k.cy, k.width, k.height);
  return d;
}

Frame MakeFrame(const py::array_t<float, py::array::c_style | py::array::forcecast>& colour,
                const py::array_t<float, py::array::c_style | py::array::forcecast>& depth,
                const py::array_t<double, py::array::c_style | py::array::forcecast>& pose,
                std::tuple<double, double, double, double> intrinsics) {
  Frame f;
  f.colour = FromArray<float>(colour, 3, "colour");
  f.depth = FromArray<float>(depth, 1, "depth");
  f.world_from_camera = PoseFromArray(pose);
  const auto [fx, fy, cx, cy] = intrinsics;
  f.intrinsics = {fx, fy, cx, cy, f.colour.width, f.colour.height};
  return f;
}

// Exactly one of class name, class id or tree path.
struct LabelArgs {
  SemanticPayload payload;
  std::optional<std::string> name;
};

LabelArgs ParseLabel(const std::optional<std::string>& cls, const std::optional<int>& class_id,
                     const std::optional<std::string>& node) {
  const int given = cls.has_value() + class_id.has_value() + node.has_value();
  if (given != 1) {
    throw Error(ErrorCode::kInvalidArgument, "give exactly one of cls, class_id or node");
  }
  if (node) return {HierLabel{PathFromString(*node)}, std::nullopt};
  if (class_id) return {FlatLabel{*class_id}, std::nullopt};
  return {FlatLabel{0}, *cls};
}

py::dict CurveDict(const SessionCurve& c) { return FromJson(CurveToJson(c)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Interactive neural scene labelling";

  PYBIND11_CONSTINIT static py::gil_safe_call_once_and_store<py::object> error_type;
  error_type.call_once_and_store_result([&]() {
    return py::object(py::exception<Error>(m, "ScenelabelError"));
  });
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const py::object& type = error_type.get_stored();
      py::object exc = type(py::str(e.what()));
      exc.attr("code") = std::string(ErrorCodeName(e.code()));
      PyErr_SetObject(type.ptr(), exc.ptr());
    }
  });

  py::class_<Session, std::shared_ptr<Session>>(m, "Session")
      .def(py::init([](const py::object& config) {
             return std::make_shared<Session>(ConfigFromJson(ToJson(config)));
           }),
           py::arg("config") = py::none())
      .def_static("load", [](const std::string& dir) { return std::shared_ptr<Session>(Session::load(dir)); })
      .def("save", &Session::save, py::arg("directory"))
      .def_property_readonly("config", [](const Session& s) { return FromJson(ConfigToJson(s.config())); })
      .def(
          "ingest",
          [](Session& s, py::array_t<float, py::array::c_style | py::array::forcecast> colour,
             py::array_t<float, py::array::c_style | py::array::forcecast> depth,
             py::array_t<double, py::array::c_style | py::array::forcecast> pose,
             std::tuple<double, double, double, double> intrinsics) {
            return s.ingest_frame(MakeFrame(colour, depth, pose, intrinsics));
          },
          py::arg("colour"), py::arg("depth"), py::arg("pose"), py::arg("intrinsics"),
          "Ingest an RGB-D frame; returns its keyframe id or None.")
      .def_property_readonly("num_keyframes", &Session::num_keyframes)
      .def("keyframe", [](const Session& s, int id) { return FrameDict(s.keyframe(id).frame); })
      .def(
          "annotate",
          [](Session& s, int keyframe, int u, int v, std::optional<std::string> cls,
             std::optional<int> class_id, std::optional<std::string> node) {
            auto label = ParseLabel(cls, class_id, node);
            return s.annotate(keyframe, u, v, label.payload, AnnotationSource::kClick, label.name);
          },
          py::arg("keyframe"), py::arg("u"), py::arg("v"), py::kw_only(),
          py::arg("cls") = py::none(), py::arg("class_id") = py::none(),
          py::arg("node") = py::none())
      .def("remove_annotation", &Session::remove_annotation)
      .def_property_readonly("num_annotations", &Session::num_annotations)
      .def("add_class", &Session::add_class)
      .def_property(
          "schema", [](const Session& s) { return FromJson(SchemaToJson(s.schema())); },
          [](Session& s, const py::object& doc) { s.set_schema(SchemaFromJson(ToJson(doc))); })
      .def(
          "step",
          [](Session& s) {
            const StepResult r = s.step();
            return py::make_tuple(r.loss, r.applied, r.batch_size);
          },
          "One optimiser step; returns (loss, applied, batch_size).")
      .def("run", &Session::run, py::arg("steps"), py::call_guard<py::gil_scoped_release>())
      .def("start", &Session::start)
      .def("stop", &Session::stop, py::call_guard<py::gil_scoped_release>())
      .def_property_readonly("version", [](const Session& s) { return s.snapshot()->version; })
      .def(
          "preview",
          [](const Session& s, int keyframe, const std::string& kind, int stride, double opacity,
             int level) {
            PreviewRequest req;
            req.kind = ParsePreviewKind(kind);
            req.stride = stride;
            req.opacity = opacity;
            req.level = level;
            Preview p;
            {
              py::gil_scoped_release release;
              p = s.render_preview(keyframe, req);
            }
            return py::make_tuple(ToArray(p.image), p.version);
          },
          py::arg("keyframe"), py::arg("kind") = "semantics", py::arg("stride") = 1,
          py::arg("opacity") = 0.5, py::arg("level") = -1,
          "Returns (H x W x 3 uint8 image, snapshot version).")
      .def("next_query",
           [](Session& s) {
             const QueryProposal q = s.next_query();
             py::dict d;
             d["keyframe"] = q.keyframe;
             d["u"] = q.u;
             d["v"] = q.v;
             d["value"] = q.value;
             d["snapshot"] = q.snapshot;
             return d;
           })
      .def(
          "answer_query",
          [](Session& s, int keyframe, int u, int v, std::optional<std::string> cls,
             std::optional<int> class_id, std::optional<std::string> node) {
            auto label = ParseLabel(cls, class_id, node);
            QueryProposal q;
            q.keyframe = keyframe;
            q.u = u;
            q.v = v;
            return s.answer_query(q, label.payload, label.name);
          },
          py::arg("keyframe"), py::arg("u"), py::arg("v"), py::kw_only(),
          py::arg("cls") = py::none(), py::arg("class_id") = py::none(),
          py::arg("node") = py::none())
      .def("stats", [](const Session& s) {
        const SessionStats st = s.stats();
        py::dict d;
        d["steps"] = st.steps;
        d["skipped_steps"] = st.skipped_steps;
        d["recent_losses"] = st.recent_losses;
        d["clicks"] = st.clicks;
        d["keyframes"] = st.keyframes;
        d["uptime_seconds"] = st.uptime_seconds;
        d["status"] = std::string(SessionStatusName(st.status));
        return d;
      });

  m.def(
      "render_scene",
      [](const std::string& scene, int index, uint64_t seed) {
        const SyntheticScene s = ResolveScene(scene);
        if (index < 0 || index >= static_cast<int>(s.trajectory.size())) {
          throw Error(ErrorCode::kOutOfRange, "view index out of range");
        }
        const SyntheticView view = RenderSynthetic(s, index, seed);
        py::dict d = FrameDict(view.frame);
        d["labels"] = ToArray(view.labels);
        return d;
      },
      py::arg("scene"), py::arg("index"), py::arg("seed") = 0,
      "Ground-truth RGB-D frame and labels of a built-in or JSON scene view.");
  m.def("scene_info", [](const std::string& scene) { return FromJson(SceneToJson(ResolveScene(scene))); });
  m.def(
      "session_from_scene",
      [](const std::string& scene, const py::object& config) {
        const SyntheticScene s = ResolveScene(scene);
        SessionConfig cfg = ConfigFromJson(ToJson(config));
        cfg.scene_bound = s.bound;
        auto session = std::make_shared<Session>(cfg);
        for (int idx : s.keyframe_indices) session->ingest_frame(RenderSynthetic(s, idx).frame);
        return session;
      },
      py::arg("scene"), py::arg("config") = py::none(),
      "Session with the scene's keyframes ingested.");

  m.def(
      "miou",
      [](py::array_t<int32_t, py::array::c_style | py::array::forcecast> pred,
         py::array_t<int32_t, py::array::c_style | py::array::forcecast> gt, int num_classes,
         int ignore_label) {
        return FromJson(ReportToJson(ComputeMiou(FromArray<int32_t>(pred, 1, "pred"),
                                                 FromArray<int32_t>(gt, 1, "gt"), num_classes,
                                                 ignore_label)));
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes"), py::arg("ignore_label") = -1);

  m.def(
      "run_session",
      [](const std::string& scene, const std::string& strategy, uint64_t seed,
         std::vector<int> checkpoints, int steps_per_click, int warmup_steps,
         const py::object& config, std::optional<std::string> save_to) {
        EvalConfig cfg;
        cfg.session = ConfigFromJson(ToJson(config));
        cfg.checkpoints = std::move(checkpoints);
        cfg.steps_per_click = steps_per_click;
        cfg.warmup_steps = warmup_steps;
        SessionCurve c;
        {
          py::gil_scoped_release release;
          c = RunSession(ResolveScene(scene), scene, ParseStrategy(strategy), seed, cfg, save_to);
        }
        return CurveDict(c);
      },
      py::arg("scene"), py::arg("strategy") = "scripted_manual", py::arg("seed") = 0,
      py::arg("checkpoints") = std::vector<int>{0, 4, 8, 12, 20, 40},
      py::arg("steps_per_click") = EvalConfig{}.steps_per_click,
      py::arg("warmup_steps") = EvalConfig{}.warmup_steps, py::arg("config") = py::none(),
      py::arg("save_to") = py::none(), "Simulated labelling session; returns the curve.");

  m.def(
      "extract_mesh",
      [](const Session& s, int resolution, double iso, int level) {
        const auto snap = s.snapshot();
        LabelledMesh mesh;
        {
          py::gil_scoped_release release;
          mesh = ExtractLabelledMesh(*snap->params, snap->schema, snap->active_classes,
                                     s.config().scene_bound, resolution, iso, level);
        }
        const auto nv = static_cast<py::ssize_t>(mesh.mesh.vertices.size());
        const auto nt = static_cast<py::ssize_t>(mesh.mesh.triangles.size());
        py::array_t<double> vertices({nv, py::ssize_t{3}});
        py::array_t<int32_t> triangles({nt, py::ssize_t{3}});
        py::array_t<uint8_t> colours({nv, py::ssize_t{3}});
        py::array_t<int32_t> labels(nv);
        for (py::ssize_t i = 0; i < nv; ++i) {
          for (int a = 0; a < 3; ++a) vertices.mutable_at(i, a) = mesh.mesh.vertices[i][a];
          const Rgb8 c = mesh.colours[i];
          colours.mutable_at(i, 0) = c.r;
          colours.mutable_at(i, 1) = c.g;
          colours.mutable_at(i, 2) = c.b;
          labels.mutable_at(i) = mesh.labels[i];
        }
        for (py::ssize_t i = 0; i < nt; ++i) {
          for (int a = 0; a < 3; ++a) triangles.mutable_at(i, a) = mesh.mesh.triangles[i][a];
        }
        py::dict d;
        d["vertices"] = vertices;
        d["triangles"] = triangles;
        d["colours"] = colours;
        d["labels"] = labels;
        return d;
      },
      py::arg("session"), py::arg("resolution") = 64, py::arg("iso") = 0.5,
      py::arg("level") = -1);
}
