#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <random>
#include <sstream>

#include "m3ad/backbone.hpp"
#include "m3ad/checkpoint.hpp"
#include "m3ad/cli.hpp"
#include "m3ad/config.hpp"
#include "m3ad/data.hpp"
#include "m3ad/errors.hpp"
#include "m3ad/gradcheck_suite.hpp"
#include "m3ad/heads.hpp"
#include "m3ad/metrics.hpp"
#include "m3ad/moe.hpp"
#include "m3ad/ops.hpp"
#include "m3ad/priors.hpp"
#include "m3ad/tensor_io.hpp"
#include "m3ad/train.hpp"

namespace py = pybind11;
using namespace m3ad;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict record_dict(const SampleRecord& r) {
  py::dict d;
  d["path"] = r.path;
  d["age"] = r.priors.age;
  d["gender"] = r.priors.gender;
  d["etiv"] = r.priors.etiv;
  d["diag"] = r.diag;
  d["change"] = r.change;
  d["split"] = r.split == Split::Train ? "train" : r.split == Split::Val ? "val" : "test";
  return d;
}

py::object metric_value(const std::optional<double>& v) { return v ? py::cast(*v) : py::none(); }

// A trained or freshly initialized model together with its prior statistics.
class PyModel {
 public:
  PyModel(const std::map<std::string, std::string>& settings, std::uint64_t seed)
      : model_(std::make_unique<M3adModel>(configure(settings), seed)) {}

  static PyModel load(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    PyModel m(ck.model_config(), 0);
    restore_parameters(*m.model_, ck);
    m.stats_ = ck.prior_stats;
    return m;
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& p : model_->params().all()) n += p->size();
    return n;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& p : model_->params().all()) out.push_back(p->name);
    return out;
  }

  std::string config() const { return serialize(model_->config()); }

  // Raw image plus raw priors -> (diagnosis logits, change logits).
  std::pair<Array, Array> logits(const Array& image, double age, int gender, double etiv) const {
    if (image.ndim() != 2) throw DimensionError("image must be 2-D");
    const auto raw = to_tensor(image);
    Example ex;
    ex.image = Tensor::from(raw.shape(), robust_zscore(raw.data()));
    const auto p = normalize_priors(ClinicalPriors{age, gender, etiv}, stats_);
    ex.priors = Tensor::from({3}, {p[0], p[1], p[2]});
    Binding bind(false);
    const auto out = task_forward(*model_, bind, ex);
    return {to_array(out.diag), to_array(out.change)};
  }

 private:
  PyModel(const ModelConfig& cfg, std::uint64_t seed) : model_(std::make_unique<M3adModel>(cfg, seed)) {}

  static ModelConfig configure(const std::map<std::string, std::string>& settings) {
    RunConfig rc;
    for (const auto& [k, v] : settings) rc.set(k, v);
    rc.validate();
    return rc.model;
  }

  std::unique_ptr<M3adModel> model_;
  PriorStats stats_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the m3ad library";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("softmax", [](const Array& x) { return to_array(ops::softmax(to_tensor(x))); }, py::arg("x"),
        "Softmax along the last axis.");

  m.def("effective_tau", [](const Array& raw) { return to_array(effective_tau(to_tensor(raw))); }, py::arg("tau_raw"));

  m.def(
      "cosine_attention",
      [](const Array& q, const Array& k, const Array& v, const Array& tau_raw, std::optional<Array> bias) {
        const auto r =
            cosine_attention(to_tensor(q), to_tensor(k), to_tensor(v), to_tensor(tau_raw), bias ? to_tensor(*bias) : Tensor{});
        return std::make_pair(to_array(r.output), to_array(r.weights));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("tau_raw"), py::arg("bias") = py::none(),
      "Scaled cosine attention; returns (output, weights).");

  m.def(
      "gate_probabilities",
      [](const Array& x, const Array& w_a, const Array& b_a, const Array& w_g, double tau) {
        return to_array(gate_probabilities(to_tensor(x), to_tensor(w_a), to_tensor(b_a), to_tensor(w_g), tau));
      },
      py::arg("x"), py::arg("w_a"), py::arg("b_a"), py::arg("w_g"), py::arg("tau") = 1.0);

  m.def("c_fusion_dim", &c_fusion_dim, py::arg("embed_dim"), py::arg("stage"));

  m.def(
      "sample_mask",
      [](std::size_t height, std::size_t width, std::size_t unit, double ratio, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        const auto spec = sample_mask(rng, height, width, unit, ratio);
        py::array_t<std::uint8_t> mask({height, width});
        std::fill_n(mask.mutable_data(), height * width, 0);
        for (auto p : spec.pixel_indices()) mask.mutable_data()[p] = 1;
        return mask;
      },
      py::arg("height"), py::arg("width"), py::arg("unit") = 8, py::arg("ratio") = 0.6, py::arg("seed") = 0,
      "Pixel mask (1 = masked) of round(ratio * units) random square units.");

  m.def(
      "recon_loss",
      [](const Array& image, const Array& prediction, const py::array_t<std::uint8_t>& mask, std::size_t unit) {
        if (image.ndim() != 2) throw DimensionError("image must be 2-D");
        MaskSpec spec{static_cast<std::size_t>(image.shape(0)), static_cast<std::size_t>(image.shape(1)), unit, {}};
        const auto per_row = spec.units_per_row();
        for (std::uint32_t u = 0; u < spec.total_units(); ++u) {
          const auto r = (u / per_row) * unit, c = (u % per_row) * unit;
          if (mask.at(r, c)) spec.units.push_back(u);
        }
        return recon_loss(to_tensor(image), to_tensor(prediction), spec).item();
      },
      py::arg("image"), py::arg("prediction"), py::arg("mask"), py::arg("unit") = 8,
      "Mean absolute error over the masked units of `mask`.");

  m.def(
      "metrics",
      [](std::vector<int> y_true, std::vector<int> y_pred, std::size_t classes) {
        const auto cm = confusion(y_true, y_pred, classes);
        const auto r = report(cm);
        py::dict d;
        d["accuracy"] = r.accuracy;
        d["macro_f1"] = r.macro_f1;
        py::list per_class;
        for (const auto& c : r.per_class) {
          py::dict e;
          e["precision"] = metric_value(c.precision);
          e["recall"] = metric_value(c.recall);
          e["specificity"] = metric_value(c.specificity);
          e["f1"] = metric_value(c.f1);
          per_class.append(e);
        }
        d["per_class"] = per_class;
        py::array_t<std::uint64_t> counts({classes, classes});
        for (std::size_t i = 0; i < classes; ++i)
          for (std::size_t j = 0; j < classes; ++j) counts.mutable_at(i, j) = cm.at(i, j);
        d["confusion"] = counts;
        return d;
      },
      py::arg("y_true"), py::arg("y_pred"), py::arg("classes"));

  m.def(
      "read_m3t",
      [](const std::filesystem::path& path) {
        const auto a = read_m3t(path);
        std::vector<py::ssize_t> shape(a.shape.begin(), a.shape.end());
        py::array_t<float> out(shape);
        std::copy(a.values.begin(), a.values.end(), out.mutable_data());
        return out;
      },
      py::arg("path"));

  m.def(
      "write_m3t",
      [](const std::filesystem::path& path, const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
        FloatArray f{Shape(a.shape(), a.shape() + a.ndim()), std::vector<float>(a.data(), a.data() + a.size())};
        write_m3t(path, f);
      },
      py::arg("path"), py::arg("array"));

  m.def(
      "gen_synthetic",
      [](const std::filesystem::path& out_dir, const std::map<std::string, std::string>& settings, std::uint64_t seed) {
        RunConfig rc;
        for (const auto& [k, v] : settings) rc.set(k, v);
        rc.gen.validate();
        py::list out;
        for (const auto& r : gen_synthetic(rc.gen, seed, out_dir)) out.append(record_dict(r));
        return out;
      },
      py::arg("out_dir"), py::arg("settings") = std::map<std::string, std::string>{}, py::arg("seed") = 0,
      "Writes a synthetic dataset and returns its manifest rows.");

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        py::list out;
        for (const auto& r : run_gradcheck_suite(seed)) {
          py::dict d;
          d["name"] = r.name;
          d["primitive"] = r.primitive;
          d["max_rel_error"] = r.max_rel_error;
          d["coordinates"] = r.coordinates;
          d["threshold"] = r.threshold;
          d["passed"] = r.passed();
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 0, "Finite-difference gradient checks on a toy configuration.");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "m3ad");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a command-line invocation in process; returns (exit code, stdout, stderr).");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::map<std::string, std::string>&, std::uint64_t>(),
           py::arg("settings") = std::map<std::string, std::string>{}, py::arg("seed") = 0)
      .def_static("load", &PyModel::load, py::arg("path"))
      .def_property_readonly("num_parameters", &PyModel::num_parameters)
      .def_property_readonly("parameter_names", &PyModel::parameter_names)
      .def_property_readonly("config", &PyModel::config)
      .def("logits", &PyModel::logits, py::arg("image"), py::arg("age"), py::arg("gender"), py::arg("etiv"),
           "Raw image and clinical values -> (diagnosis logits, change logits).");
}
