#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "factorizer/ablate.hpp"
#include "factorizer/checkpoint.hpp"
#include "factorizer/config.hpp"
#include "factorizer/data.hpp"
#include "factorizer/infer.hpp"
#include "factorizer/io.hpp"
#include "factorizer/losses.hpp"
#include "factorizer/metrics.hpp"
#include "factorizer/network.hpp"
#include "factorizer/train.hpp"

namespace py = pybind11;
using namespace factorizer;

namespace {

template <typename T>
Tensor<T> tensor_from_array(py::array_t<T, py::array::c_style | py::array::forcecast> arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = arr.shape(i);
  std::vector<T> data(arr.data(), arr.data() + arr.size());
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
py::array_t<T> array_from_tensor(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> arr(shape);
  std::copy(t.data().begin(), t.data().end(), arr.mutable_data());
  return arr;
}

Mask mask_from_array(py::array_t<uint8_t, py::array::c_style | py::array::forcecast> arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = arr.shape(i);
  std::vector<uint8_t> data(arr.data(), arr.data() + arr.size());
  return Mask(std::move(shape), std::move(data));
}

FactorizerConfig config_from_dict(const py::dict& d) {
  KvMap kv;
  for (auto item : d) kv[py::str(item.first)] = py::str(item.second);
  return factorizer_config_from_kv(kv);
}

class PyModel {
 public:
  PyModel(const py::dict& config, uint64_t seed)
      : model_(FactorizerModel<float>::build(config_from_dict(config), seed)) {}
  explicit PyModel(FactorizerModel<float> model) : model_(std::move(model)) {}

  static PyModel load(const std::string& path) { return PyModel(load_checkpoint(path)); }
  void save(const std::string& path) const { save_checkpoint(path, model_); }

  int64_t parameter_count() const { return model_.parameter_count(); }
  int nmf_layer_count() const { return model_.nmf_layer_count(); }
  uint64_t seed() const { return model_.seed(); }
  py::dict config() const {
    py::dict d;
    for (const auto& [k, v] : to_kv(model_.config())) d[py::str(k)] = v;
    return d;
  }

  py::array_t<float> forward(py::array_t<float, py::array::c_style | py::array::forcecast> x) {
    NoGradGuard ng;
    Tensor<float> t = tensor_from_array<float>(x);
    if (t.rank() == 4) {
      Shape s = t.shape();
      t = t.reshape({1, s[0], s[1], s[2], s[3]});
    }
    return array_from_tensor(model_.forward(Var<float>(t), false).logits.value());
  }

  py::tuple sliding_window_infer(
      py::array_t<float, py::array::c_style | py::array::forcecast> image, int64_t window,
      double overlap, double threshold) {
    InferConfig cfg;
    cfg.window = window > 0 ? window : model_.config().patch_size;
    cfg.overlap = overlap;
    cfg.threshold = threshold;
    InferenceOutput out =
        factorizer::sliding_window_infer(model_, tensor_from_array<float>(image), cfg);
    py::list masks;
    for (const Mask& m : out.class_masks) masks.append(array_from_tensor(m));
    return py::make_tuple(array_from_tensor(out.probabilities),
                          array_from_tensor(out.label_map), masks);
  }

  void short_circuit(const std::vector<int>& layers) { model_.short_circuit(layers); }
  void clear_short_circuits() { model_.clear_short_circuits(); }
  void override_nmf(std::optional<int64_t> iterations, std::optional<int64_t> rank,
                    std::optional<std::string> solver) {
    std::optional<NmfSolver> s;
    if (solver) s = nmf_solver_from_string(*solver);
    model_.override_nmf(iterations, rank, s);
  }
  void clear_overrides() { model_.clear_overrides(); }

  FactorizerModel<float>& raw() { return model_; }

 private:
  FactorizerModel<float> model_;
};

}  // namespace

PYBIND11_MODULE(_factorizer, m) {
  m.doc() = "NMF-based volumetric segmentation core";

  py::register_exception<ShapeError>(m, "ShapeError");
  py::register_exception<ConfigError>(m, "ConfigurationError");
  py::register_exception<UsageError>(m, "ApiUsageError");
  py::register_exception<DomainError>(m, "InputDomainError");

  m.def(
      "nmf_reconstruct",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> x, int64_t rank,
         int64_t iterations, const std::string& solver, double eps, uint64_t seed) {
        Tensor<double> t = tensor_from_array<double>(x);
        const bool squeeze = t.rank() == 2;
        if (squeeze) t = t.reshape({1, t.shape()[0], t.shape()[1]});
        NmfConfig cfg;
        cfg.rank = rank;
        cfg.iterations = iterations;
        cfg.solver = nmf_solver_from_string(solver);
        cfg.eps = eps;
        cfg.init_seed = seed;
        NoGradGuard ng;
        Tensor<double> recon = nmf_forward(Var<double>(t), cfg).value();
        if (squeeze) recon = recon.reshape({recon.shape()[1], recon.shape()[2]});
        return array_from_tensor(recon);
      },
      py::arg("x"), py::arg("rank") = 1, py::arg("iterations") = 5, py::arg("solver") = "hals",
      py::arg("eps") = 1e-8, py::arg("seed") = 0,
      "Low-rank approximation of nonnegative matrices: runs the unrolled "
      "solver and returns F G^T. Accepts (M, N) or (B, M, N).");

  m.def(
      "matricize",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> x,
         const std::string& mode, int64_t head_dim, int64_t patch) {
        MatricizeConfig cfg{matricize_mode_from_string(mode), head_dim, patch};
        NoGradGuard ng;
        MatricizedBatch<double> mb = factorizer::matricize(Var<double>(tensor_from_array<double>(x)), cfg);
        return array_from_tensor(mb.matrices.value());
      },
      py::arg("x"), py::arg("mode"), py::arg("head_dim"), py::arg("patch") = 0,
      "Reshape (B, C, H, W, D) into a batch of matrices (B', M, N).");

  m.def(
      "dematricize",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> matrices,
         const std::vector<int64_t>& original_shape, const std::string& mode, int64_t head_dim,
         int64_t patch) {
        MatricizedBatch<double> mb;
        mb.matrices = Var<double>(tensor_from_array<double>(matrices));
        mb.original_shape = Shape(original_shape.begin(), original_shape.end());
        mb.config = MatricizeConfig{matricize_mode_from_string(mode), head_dim, patch};
        NoGradGuard ng;
        return array_from_tensor(factorizer::dematricize(mb).value());
      },
      py::arg("matrices"), py::arg("original_shape"), py::arg("mode"), py::arg("head_dim"),
      py::arg("patch") = 0, "Exact inverse of matricize (mean of halves for shifted windows).");

  m.def(
      "dice_score",
      [](py::array_t<uint8_t, py::array::c_style | py::array::forcecast> g,
         py::array_t<uint8_t, py::array::c_style | py::array::forcecast> y) {
        return factorizer::dice_score(mask_from_array(g), mask_from_array(y));
      },
      py::arg("g"), py::arg("y"));

  m.def(
      "hd95",
      [](py::array_t<uint8_t, py::array::c_style | py::array::forcecast> g,
         py::array_t<uint8_t, py::array::c_style | py::array::forcecast> y,
         std::array<double, 3> spacing) -> py::object {
        Hd95Result r = factorizer::hd95(mask_from_array(g), mask_from_array(y), spacing);
        if (!r.defined) return py::none();
        return py::float_(r.value);
      },
      py::arg("g"), py::arg("y"), py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0},
      "95th-percentile symmetric surface distance; None when a mask is empty.");

  m.def(
      "soft_dice_loss",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> g,
         py::array_t<double, py::array::c_style | py::array::forcecast> p, double eps) {
        NoGradGuard ng;
        return factorizer::soft_dice_loss(Var<double>(tensor_from_array<double>(g)),
                                          Var<double>(tensor_from_array<double>(p)), eps)
            .value()
            .item();
      },
      py::arg("g"), py::arg("p"), py::arg("eps") = 1e-5);

  m.def(
      "cross_entropy_loss",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> g,
         py::array_t<double, py::array::c_style | py::array::forcecast> p) {
        NoGradGuard ng;
        return factorizer::cross_entropy_loss(Var<double>(tensor_from_array<double>(g)),
                                              Var<double>(tensor_from_array<double>(p)))
            .value()
            .item();
      },
      py::arg("g"), py::arg("p"));

  m.def(
      "generate_dataset",
      [](const std::string& out_dir, const py::dict& task) {
        KvMap kv;
        for (auto item : task) kv[py::str(item.first)] = py::str(item.second);
        KvView v(kv);
        SyntheticTaskSpec spec;
        spec.extent = v.get_int("extent", spec.extent);
        spec.channels = v.get_int("channels", spec.channels);
        spec.classes = v.get_int("classes", spec.classes);
        spec.blobs_min = v.get_int("blobs_min", spec.blobs_min);
        spec.blobs_max = v.get_int("blobs_max", spec.blobs_max);
        spec.radius_min = v.get_double("radius_min", spec.radius_min);
        spec.radius_max = v.get_double("radius_max", spec.radius_max);
        spec.noise_sigma = v.get_double("noise", spec.noise_sigma);
        spec.count = v.get_int("count", spec.count);
        spec.seed = static_cast<uint64_t>(v.get_int("seed", 0));
        save_dataset(out_dir, generate(spec));
        return spec.count;
      },
      py::arg("out_dir"), py::arg("task"));

  m.def("load_ftensor", [](const std::string& path) -> py::object {
    if (peek_ftensor_dtype(path) == 0) return array_from_tensor(load_ftensor_file<float>(path));
    return array_from_tensor(load_ftensor_file<double>(path));
  });

  m.def("save_ftensor", [](const std::string& path, py::array arr) {
    if (py::isinstance<py::array_t<float>>(arr))
      save_ftensor_file(path, tensor_from_array<float>(arr.cast<py::array_t<float>>()));
    else
      save_ftensor_file(path,
                        tensor_from_array<double>(arr.cast<py::array_t<double>>()));
  });

  py::class_<PyModel>(m, "Model")
      .def(py::init<const py::dict&, uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_static("load", &PyModel::load, py::arg("path"))
      .def("save", &PyModel::save, py::arg("path"))
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def_property_readonly("nmf_layer_count", &PyModel::nmf_layer_count)
      .def_property_readonly("seed", &PyModel::seed)
      .def("config", &PyModel::config)
      .def("forward", &PyModel::forward, py::arg("x"),
           "Logits for a (C, H, W, D) or (B, C, H, W, D) input.")
      .def("sliding_window_infer", &PyModel::sliding_window_infer, py::arg("image"),
           py::arg("window") = 0, py::arg("overlap") = 0.5, py::arg("threshold") = 0.5,
           "Returns (probabilities, label_map, class_masks).")
      .def("short_circuit", &PyModel::short_circuit, py::arg("layers"))
      .def("clear_short_circuits", &PyModel::clear_short_circuits)
      .def("override_nmf", &PyModel::override_nmf, py::arg("iterations") = py::none(),
           py::arg("rank") = py::none(), py::arg("solver") = py::none())
      .def("clear_overrides", &PyModel::clear_overrides);

  m.def(
      "train",
      [](PyModel& model, const std::string& data_dir, const std::string& out_dir,
         const py::dict& options) {
        KvMap kv;
        for (auto item : options) kv[py::str(item.first)] = py::str(item.second);
        KvView v(kv);
        TrainConfig cfg;
        cfg.steps = v.get_int("steps", cfg.steps);
        cfg.batch_size = v.get_int("batch_size", cfg.batch_size);
        cfg.grad_accumulation = v.get_int("grad_accumulation", cfg.grad_accumulation);
        cfg.base_lr = v.get_double("base_lr", cfg.base_lr);
        cfg.weight_decay = v.get_double("weight_decay", cfg.weight_decay);
        cfg.warmup_steps = v.get_int("warmup_steps", cfg.warmup_steps);
        cfg.seed = static_cast<uint64_t>(v.get_int("seed", 0));
        cfg.patch_size = v.get_int("patch_size", model.raw().config().patch_size);
        cfg.checkpoint_every = v.get_int("checkpoint_every", cfg.checkpoint_every);
        cfg.augment_enabled = v.get_bool("augment", cfg.augment_enabled);
        TrainResult r = train(model.raw(), load_dataset(data_dir), cfg, out_dir);
        py::dict out;
        out["final_loss"] = r.final_loss;
        out["final_checkpoint"] = r.final_checkpoint;
        out["aborted_on_nan"] = r.aborted_on_nan;
        out["steps_run"] = r.steps_run;
        return out;
      },
      py::arg("model"), py::arg("data_dir"), py::arg("out_dir"),
      py::arg("options") = py::dict());
}
