#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "segvec3d/clustering.hpp"
#include "segvec3d/data.hpp"
#include "segvec3d/error.hpp"
#include "segvec3d/gradcheck.hpp"
#include "segvec3d/io.hpp"
#include "segvec3d/multimodal.hpp"
#include "segvec3d/trainer.hpp"

namespace py = pybind11;
using namespace segvec3d;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

nn::Matrix to_matrix(const Array& a) {
  require(a.ndim() == 2, ErrorKind::kInvalidArgument, "expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return nn::Matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array from_matrix(const nn::Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

std::vector<geometry::Vec3> to_vec3(const Array& a) {
  require(a.ndim() == 2 && a.shape(1) == 3, ErrorKind::kInvalidArgument, "expected an N x 3 array");
  std::vector<geometry::Vec3> out(static_cast<std::size_t>(a.shape(0)));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t d = 0; d < 3; ++d) out[i][d] = a.data()[3 * i + d];
  return out;
}

Array from_vec3(const std::vector<geometry::Vec3>& v) {
  Array out({v.size(), std::size_t{3}});
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t d = 0; d < 3; ++d) out.mutable_data()[3 * i + d] = v[i][d];
  return out;
}

py::array_t<int> from_ints(const std::vector<int>& v) {
  py::array_t<int> out(v.size());
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::vector<int> to_ints(const IntArray& a) { return {a.data(), a.data() + a.size()}; }

train::ClusterOptions cluster_options(const std::string& kind, double radius, double eps, std::size_t min_pts,
                                      double bandwidth) {
  train::ClusterOptions o;
  if (kind == "radius")
    o.kind = train::Clusterer::kRadius;
  else if (kind == "dbscan")
    o.kind = train::Clusterer::kDbscan;
  else if (kind == "mean-shift")
    o.kind = train::Clusterer::kMeanShift;
  else
    fail(ErrorKind::kInvalidArgument, "unknown clusterer '" + kind + "'");
  o.radius = radius;
  o.eps = eps;
  o.min_pts = min_pts;
  o.bandwidth = bandwidth;
  return o;
}

train::TrainConfig config_from(const std::map<std::string, std::string>& overrides) {
  train::TrainConfig c;
  for (const auto& [k, v] : overrides) c.set(k, v);
  c.validate();
  return c;
}

const multimodal::JointSpaceModel& joint_of(const train::Checkpoint& ckpt) {
  require(ckpt.joint.has_value(), ErrorKind::kInvalidArgument, "checkpoint has no alignment model");
  return *ckpt.joint;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point cloud instance segmentation with a shared 3D/text embedding space";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error.ptr())(e.what());
      exc.attr("kind") = to_string(e.kind());
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  py::class_<geometry::PointCloud>(m, "PointCloud")
      .def(py::init([](const Array& positions, std::optional<Array> colors, std::optional<IntArray> labels,
                       std::map<int, std::string> categories) {
             geometry::PointCloud c;
             c.positions = to_vec3(positions);
             if (colors) c.colors = to_vec3(*colors);
             if (labels) c.instance_labels = to_ints(*labels);
             c.category_names = std::move(categories);
             c.validate();
             return c;
           }),
           py::arg("positions"), py::arg("colors") = py::none(), py::arg("instance_labels") = py::none(),
           py::arg("category_names") = std::map<int, std::string>{})
      .def("__len__", &geometry::PointCloud::size)
      .def_property_readonly("positions", [](const geometry::PointCloud& c) { return from_vec3(c.positions); })
      .def_property_readonly("colors",
                             [](const geometry::PointCloud& c) -> py::object {
                               if (!c.colors) return py::none();
                               return from_vec3(*c.colors);
                             })
      .def_property_readonly("instance_labels",
                             [](const geometry::PointCloud& c) -> py::object {
                               if (!c.instance_labels) return py::none();
                               return from_ints(*c.instance_labels);
                             })
      .def_readonly("category_names", &geometry::PointCloud::category_names)
      .def("__eq__", [](const geometry::PointCloud& a, const geometry::PointCloud& b) { return a == b; });

  m.def(
      "generate_scene",
      [](std::uint64_t seed, std::size_t min_objects, std::size_t max_objects, double noise_sigma) {
        data::SceneSpec spec;
        spec.seed = seed;
        spec.min_objects = min_objects;
        spec.max_objects = max_objects;
        spec.noise_sigma = noise_sigma;
        return data::generate_scene(spec);
      },
      py::arg("seed"), py::arg("min_objects") = 4, py::arg("max_objects") = 6, py::arg("noise_sigma") = 0.005,
      "Synthetic room with floor, wall and primitive objects, labeled per instance");
  m.def("category_names", [] { return data::category_names(data::default_catalog()); });

  m.def("read_scene", &io::read_scene, py::arg("path"), "Cloud plus category sidecar if present");
  m.def("read_cloud", &io::read_cloud, py::arg("path"));
  m.def(
      "write_cloud", [](const std::string& path, const geometry::PointCloud& c) { io::write_cloud(path, c); },
      py::arg("path"), py::arg("cloud"));

  m.def(
      "knn",
      [](const Array& points, const Array& queries, std::size_t k) {
        const geometry::KdTree tree(to_matrix(points));
        const nn::Matrix q = to_matrix(queries);
        py::array_t<std::int64_t> idx({q.rows(), k});
        Array dist({q.rows(), k});
        for (std::size_t i = 0; i < q.rows(); ++i) {
          const auto found = tree.knn(q.row(i), k);
          require(found.size() == k, ErrorKind::kInvalidArgument, "k exceeds the number of points");
          for (std::size_t j = 0; j < k; ++j) {
            idx.mutable_data()[i * k + j] = static_cast<std::int64_t>(found[j].index);
            dist.mutable_data()[i * k + j] = found[j].distance;
          }
        }
        return py::make_tuple(idx, dist);
      },
      py::arg("points"), py::arg("queries"), py::arg("k"), "Exact k nearest neighbours: (indices, distances)");

  m.def(
      "dbscan", [](const Array& e, double eps, std::size_t min_pts) { return from_ints(clustering::dbscan(to_matrix(e), eps, min_pts).labels); },
      py::arg("embeddings"), py::arg("eps"), py::arg("min_pts"));
  m.def(
      "radius_linkage", [](const Array& e, double r) { return from_ints(clustering::radius_linkage(to_matrix(e), r).labels); },
      py::arg("embeddings"), py::arg("radius"));
  m.def(
      "mean_shift", [](const Array& e, double bw) { return from_ints(clustering::mean_shift(to_matrix(e), bw).labels); },
      py::arg("embeddings"), py::arg("bandwidth"));
  m.def(
      "adjusted_rand_index",
      [](const IntArray& a, const IntArray& b) { return clustering::adjusted_rand_index(to_ints(a), to_ints(b)); },
      py::arg("predicted"), py::arg("truth"));

  py::class_<multimodal::TextEmbeddingTable>(m, "TextEmbeddingTable")
      .def_static(
          "for_categories",
          [](const std::vector<std::string>& names, std::size_t dim, std::uint64_t seed) {
            return data::build_text_table_for_categories(names, dim, seed);
          },
          py::arg("names"), py::arg("dim") = 64, py::arg("seed") = 7)
      .def_static("load", &multimodal::load_text_table, py::arg("path"))
      .def("save", [](const multimodal::TextEmbeddingTable& t, const std::string& path) { multimodal::save_text_table(path, t); })
      .def_property_readonly("dim", &multimodal::TextEmbeddingTable::dim)
      .def("__len__", &multimodal::TextEmbeddingTable::size)
      .def("phrases", &multimodal::TextEmbeddingTable::phrases);

  py::class_<train::Checkpoint>(m, "Checkpoint")
      .def_static("load", &train::load_checkpoint, py::arg("path"))
      .def_static("from_bytes", [](const py::bytes& b) { return train::deserialize_checkpoint(std::string(b)); })
      .def("save", [](const train::Checkpoint& c, const std::string& path) { train::save_checkpoint(c, path); })
      .def("to_bytes", [](const train::Checkpoint& c) { return py::bytes(train::serialize_checkpoint(c)); })
      .def_property_readonly("config", [](const train::Checkpoint& c) { return c.config.to_map(); })
      .def_property_readonly("has_alignment", [](const train::Checkpoint& c) { return c.joint.has_value(); })
      .def_property_readonly("history",
                             [](const train::Checkpoint& c) {
                               std::vector<double> out;
                               for (const auto& r : c.history) out.push_back(r.loss);
                               return out;
                             })
      .def_property_readonly("align_history", [](const train::Checkpoint& c) {
        std::vector<double> out;
        for (const auto& r : c.align_history) out.push_back(r.loss);
        return out;
      });

  m.def(
      "train_segnet",
      [](const std::vector<geometry::PointCloud>& scenes, const std::map<std::string, std::string>& config) {
        const auto c = config_from(config);
        py::gil_scoped_release release;
        return train::train_segnet(c, scenes);
      },
      py::arg("scenes"), py::arg("config") = std::map<std::string, std::string>{},
      "Phase 1: train the segmentation network; config values are strings keyed like the config file");
  m.def(
      "train_alignment",
      [](const train::Checkpoint& base, const std::vector<geometry::PointCloud>& scenes,
         const multimodal::TextEmbeddingTable& table, const std::map<std::string, std::string>& config) {
        auto c = config_from(config);
        c.net = base.config.net;
        py::gil_scoped_release release;
        return train::train_alignment(c, base, scenes, table);
      },
      py::arg("checkpoint"), py::arg("scenes"), py::arg("table"),
      py::arg("config") = std::map<std::string, std::string>{}, "Phase 2: train the 3D/text projections");

  m.def(
      "segment",
      [](const train::Checkpoint& ckpt, const geometry::PointCloud& cloud, const std::string& clusterer, double radius,
         double eps, std::size_t min_pts, double bandwidth) {
        const auto seg =
            train::segment_scene(ckpt, cloud, cluster_options(clusterer, radius, eps, min_pts, bandwidth));
        return py::make_tuple(from_ints(seg.segmentation.labels), from_matrix(seg.forward.embeddings));
      },
      py::arg("checkpoint"), py::arg("cloud"), py::arg("clusterer") = "radius", py::arg("radius") = 0.0,
      py::arg("eps") = 0.0, py::arg("min_pts") = 4, py::arg("bandwidth") = 0.0,
      "Instance labels (-1 = noise) and per-point embeddings");

  m.def(
      "label",
      [](const train::Checkpoint& ckpt, const geometry::PointCloud& cloud, std::vector<std::string> candidates) {
        const auto& joint = joint_of(ckpt);
        if (candidates.empty()) candidates = joint.table.phrases();
        const auto seg = train::segment_scene(ckpt, cloud);
        std::vector<std::tuple<int, std::string, double>> out;
        for (std::size_t i = 0; i < seg.instances.size(); ++i) {
          const auto r = multimodal::zero_shot_label(seg.instances[i], candidates, joint);
          out.emplace_back(seg.instance_ids[i], r.phrase, r.scores[r.best]);
        }
        return out;
      },
      py::arg("checkpoint"), py::arg("cloud"), py::arg("candidates") = std::vector<std::string>{},
      "(instance id, phrase, score) for every predicted instance");

  m.def(
      "query",
      [](const train::Checkpoint& ckpt, const geometry::PointCloud& cloud, const std::string& text) {
        const auto& joint = joint_of(ckpt);
        const auto seg = train::segment_scene(ckpt, cloud);
        std::vector<std::pair<int, double>> out;
        for (const auto& r : multimodal::retrieve(text, seg.instances, joint))
          out.emplace_back(seg.instance_ids[r.index], r.score);
        return out;
      },
      py::arg("checkpoint"), py::arg("cloud"), py::arg("text"), "(instance id, score) ranked best first");

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        std::vector<std::tuple<std::string, bool, double>> out;
        for (const auto& e : gradcheck::run_gradient_suite(seed))
          out.emplace_back(e.name, e.report.passed(), e.report.max_rel_error);
        return out;
      },
      py::arg("seed") = 0, "(name, passed, max relative error) per finite-difference check");
}
