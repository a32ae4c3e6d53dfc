#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <iostream>

#include "cleftnet/checkpoint.hpp"
#include "cleftnet/cli.hpp"
#include "cleftnet/data.hpp"
#include "cleftnet/labels.hpp"
#include "cleftnet/metrics.hpp"
#include "cleftnet/train.hpp"

namespace py = pybind11;
using namespace cleftnet;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  Tensor<T> t(s);
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

template <typename T>
Tensor<T> to_volume(const Array<T>& a) {
  if (a.ndim() != 3) throw py::value_error("expected a 3-D (d, h, w) array");
  return to_tensor(a);
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  py::array_t<T> a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

Spacing spacing_of(const std::array<double, 3>& s) { return {s[0], s[1], s[2]}; }

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  d["TP"] = r.counts.tp;
  d["FP"] = r.counts.fp;
  d["FN"] = r.counts.fn;
  d["TN"] = r.counts.tn;
  d["precision"] = r.precision;
  d["recall"] = r.recall;
  d["F1"] = r.f1;
  d["AUC"] = r.auc;
  d["ADGT"] = r.adgt;
  d["ADF"] = r.adf;
  d["CREMI-score"] = r.cremi_score;
  d["threshold"] = r.threshold;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "CleftNet core: distance labels, CREMI metrics, VOL1 I/O, inference";

  m.def(
      "synthesize",
      [](std::uint64_t seed, std::array<std::size_t, 3> extents, std::size_t n_clefts, double thickness, double noise) {
        const Volume v = synthesize(SynthOptions{seed, {extents[0], extents[1], extents[2]}, n_clefts, thickness, noise});
        return py::make_tuple(to_array(v.raw), to_array(v.labels));
      },
      py::arg("seed") = 0, py::arg("extents") = std::array<std::size_t, 3>{40, 64, 64}, py::arg("n_clefts") = 6,
      py::arg("thickness") = 2.0, py::arg("noise") = 0.06, "Synthetic (raw, labels) uint8 volumes.");

  m.def(
      "distance_transform",
      [](const Array<std::uint8_t>& mask, std::array<double, 3> spacing) {
        return to_array(euclidean_distance_transform(to_volume(mask), spacing_of(spacing)));
      },
      py::arg("mask"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      "Distance from every voxel to the nearest nonzero voxel of `mask`.");

  m.def(
      "tanh_distance_map", [](const Array<std::uint8_t>& clefts) { return to_array(tanh_distance_map(to_volume(clefts))); },
      py::arg("clefts"), "Boundary label: tanh of the distance to the nearest background voxel, 0 outside clefts.");

  m.def(
      "cremi_score",
      [](const Array<std::uint8_t>& pred, const Array<std::uint8_t>& gt, std::array<double, 3> spacing) {
        const auto c = cremi_score(to_volume(pred), to_volume(gt), spacing_of(spacing));
        py::dict d;
        d["ADGT"] = c.adgt;
        d["ADF"] = c.adf;
        d["CREMI-score"] = c.score;
        return d;
      },
      py::arg("pred"), py::arg("gt"), py::arg("spacing") = std::array<double, 3>{40, 4, 4});

  m.def(
      "auc",
      [](const Array<double>& scores, const Array<std::uint8_t>& gt) {
        try {
          return roc_auc(to_tensor(scores), to_tensor(gt));
        } catch (const AucUndefinedError&) {
          return std::nan("");
        }
      },
      py::arg("scores"), py::arg("gt"), "ROC AUC; NaN when the ground truth has a single class.");

  m.def(
      "evaluate",
      [](const Array<float>& scores, const Array<std::uint8_t>& gt, std::array<double, 3> spacing, double threshold) {
        return report_dict(evaluate(to_volume(scores), to_volume(gt), spacing_of(spacing), threshold));
      },
      py::arg("scores"), py::arg("gt"), py::arg("spacing") = std::array<double, 3>{40, 4, 4},
      py::arg("threshold") = 0.5);

  m.def(
      "read_vol1",
      [](const std::string& path) -> py::tuple {
        const Vol1 v = read_vol1(path);
        const py::tuple spacing = py::make_tuple(v.spacing[0], v.spacing[1], v.spacing[2]);
        if (v.type == Vol1Type::Field) return py::make_tuple(to_array(v.field), spacing);
        return py::make_tuple(to_array(v.bytes), spacing);
      },
      py::arg("path"), "(array, spacing); uint8 for raw and mask volumes, float32 for fields.");

  m.def(
      "write_vol1",
      [](const std::string& path, const py::array& a, std::array<double, 3> spacing, bool mask) {
        if (a.dtype().is(py::dtype::of<std::uint8_t>())) {
          write_vol1(path, make_vol1(to_volume(Array<std::uint8_t>(a)), mask ? Vol1Type::Mask : Vol1Type::Raw,
                                     spacing_of(spacing)));
        } else {
          write_vol1(path, make_vol1(to_volume(Array<float>(a)), spacing_of(spacing)));
        }
      },
      py::arg("path"), py::arg("array"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      py::arg("mask") = false, "uint8 arrays are written as raw (or mask) volumes, anything else as a float field.");

  m.def(
      "infer",
      [](const std::string& checkpoint, const Array<std::uint8_t>& raw, std::array<std::size_t, 3> overlap) {
        Model<float> model = load_model(checkpoint);
        const Tensor<std::uint8_t> volume = to_volume(raw);
        VolumePrediction p;
        {
          py::gil_scoped_release release;
          p = infer_volume(model, volume, {overlap[0], overlap[1], overlap[2]});
        }
        py::object boundary = p.boundary.empty() ? py::object(py::none()) : py::object(to_array(p.boundary));
        return py::make_tuple(to_array(p.prob), boundary);
      },
      py::arg("checkpoint"), py::arg("raw"), py::arg("overlap") = std::array<std::size_t, 3>{0, 0, 0},
      "Sliding-window prediction; returns (probability, boundary or None).");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        py::gil_scoped_release release;
        return run_cli(args, std::cout, std::cerr);
      },
      py::arg("args"), "Runs one cleftnet command and returns its exit code.");

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<EmptyTargetError>(m, "EmptyTargetError", PyExc_ValueError);
}
