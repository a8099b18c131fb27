#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "fbalign/checkpoint.hpp"
#include "fbalign/config.hpp"
#include "fbalign/experiment.hpp"
#include "fbalign/feedback.hpp"
#include "fbalign/network.hpp"
#include "fbalign/ops.hpp"

namespace py = pybind11;
using namespace fbalign;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

nlohmann::json to_json_value(const py::handle& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object from_json_value(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

// A config given as a path, a JSON string or a dict.
ExperimentConfig config_from(const py::object& obj) {
  if (py::isinstance<py::dict>(obj)) return parse_config(to_json_value(obj));
  const std::string text = py::str(obj);
  if (!text.empty() && text.front() == '{') return parse_config(nlohmann::json::parse(text));
  return load_config(text);
}

NetworkSpec spec_from(const py::object& obj) {
  if (py::isinstance<py::str>(obj)) {
    const auto spec = named_architecture(obj.cast<std::string>());
    if (!spec) throw ConfigError("unknown architecture '" + obj.cast<std::string>() + "'");
    return *spec;
  }
  return network_from_json(to_json_value(obj));
}

class PyNetwork {
 public:
  PyNetwork(const py::object& architecture, const std::string& init, std::uint64_t seed)
      : init_(parse_init_scheme(init)), rng_(seed) {
    net_ = build(spec_from(architecture), init_, rng_);
  }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> out;
    for (auto i : net_.trainable()) out.push_back(net_.layer(i).name);
    return out;
  }

  std::size_t index_of(const std::string& name) const {
    for (auto i : net_.trainable()) {
      if (net_.layer(i).name == name) return i;
    }
    throw py::key_error("no trainable layer named '" + name + "'");
  }

  FloatArray forward(const FloatArray& x, bool train) {
    return to_array(fbalign::forward(net_, to_tensor(x), train ? Mode::train : Mode::eval, rng_));
  }

  NetworkState net_;
  InitScheme init_;
  Rng rng_;
};

class PyFeedback {
 public:
  PyFeedback(const PyNetwork& net, const std::string& strategy, std::uint64_t seed) {
    Rng rng(seed);
    state_ = init_feedback(net.net_, parse_strategy(strategy), net.init_, rng);
  }
  FeedbackState state_;
};

py::dict gradient_dict(const NetworkState& net, const Gradients& g) {
  py::dict out;
  for (auto i : net.trainable()) {
    py::dict layer;
    layer["weights"] = to_array(g.layers[i].weights);
    layer["bias"] = to_array(g.layers[i].bias);
    out[py::str(net.layer(i).name)] = layer;
  }
  return out;
}

py::dict summary_dict(const RunSummary& s) { return from_json_value(summary_to_json(s)).cast<py::dict>(); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Convolutional networks trained with backprop, feedback alignment and sign-symmetric feedback";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<DataUnavailable>(m, "DataUnavailable", PyExc_FileNotFoundError);

  m.def("strategies", &strategy_names);
  m.def("architectures", &architecture_names);

  py::class_<PyNetwork>(m, "Network")
      .def(py::init<const py::object&, const std::string&, std::uint64_t>(), py::arg("architecture"),
           py::arg("init") = "fa_decoupled", py::arg("seed") = 0,
           "Build from a named architecture or a network dict.")
      .def_property_readonly("layer_names", &PyNetwork::layer_names)
      .def_property_readonly("parameter_count", [](const PyNetwork& n) { return n.net_.parameter_count(); })
      .def("weights", [](const PyNetwork& n, const std::string& name) { return to_array(n.net_.layer(n.index_of(name)).weights); })
      .def("bias", [](const PyNetwork& n, const std::string& name) { return to_array(n.net_.layer(n.index_of(name)).bias); })
      .def("set_weights",
           [](PyNetwork& n, const std::string& name, const FloatArray& w) {
             Tensor& target = n.net_.mutable_weights(n.index_of(name));
             Tensor value = to_tensor(w);
             require_same_shape(target.shape(), value.shape(), "set_weights");
             target = std::move(value);
           })
      .def("forward", &PyNetwork::forward, py::arg("x"), py::arg("train") = false, "Logits [N, K].");

  py::class_<PyFeedback>(m, "Feedback")
      .def(py::init<const PyNetwork&, const std::string&, std::uint64_t>(), py::arg("network"), py::arg("strategy"),
           py::arg("seed") = 0)
      .def_property_readonly("strategy", [](const PyFeedback& f) { return std::string(to_string(f.state_.strategy)); })
      .def("matrix",
           [](const PyFeedback& f, const PyNetwork& n, const std::string& name) {
             return to_array(f.state_.feedback_for(n.index_of(name)));
           })
      .def("refresh", [](PyFeedback& f, const PyNetwork& n) { refresh_usf(f.state_, n.net_); })
      .def("mirror", [](PyFeedback& f, const PyNetwork& n) { mirror_forward_weights(f.state_, n.net_); },
           "Copy the forward weights into the feedback path.");

  m.def(
      "gradients",
      [](PyNetwork& n, const PyFeedback* f, const FloatArray& x, const std::vector<int>& labels) {
        const auto r = loss_and_output_delta(fbalign::forward(n.net_, to_tensor(x), Mode::eval, n.rng_), labels);
        const Gradients g = f ? backward(n.net_, f->state_, r.delta) : backward_bp(n.net_, r.delta);
        return py::make_tuple(r.loss, gradient_dict(n.net_, g));
      },
      py::arg("network"), py::arg("feedback"), py::arg("x"), py::arg("labels"),
      "(loss, {layer: {'weights', 'bias'}}) in eval mode; feedback=None gives backprop.");

  m.def(
      "alignment_angles",
      [](PyNetwork& n, const PyFeedback& f, const FloatArray& x, const std::vector<int>& labels) {
        const auto r = loss_and_output_delta(fbalign::forward(n.net_, to_tensor(x), Mode::eval, n.rng_), labels);
        py::dict out;
        for (const auto& row : fbalign::alignment_angles(n.net_, f.state_, r.delta)) {
          out[py::str(row.name)] = row.degrees ? py::cast(*row.degrees) : py::none();
        }
        return out;
      },
      py::arg("network"), py::arg("feedback"), py::arg("x"), py::arg("labels"),
      "Degrees between each layer's strategy and backprop weight gradients.");

  m.def(
      "conv2d",
      [](const FloatArray& x, const FloatArray& k, const FloatArray& b, std::size_t stride, std::size_t padding) {
        return to_array(fbalign::conv2d(to_tensor(x), to_tensor(k), to_tensor(b), {stride, padding}));
      },
      py::arg("x"), py::arg("kernels"), py::arg("bias"), py::arg("stride") = 1, py::arg("padding") = 0);

  m.def("validate_config", [](const py::object& c) { return from_json_value(to_json(config_from(c))); },
        py::arg("config"), "Parse and normalize a config (path, JSON text or dict).");

  m.def(
      "train",
      [](const py::object& c, std::optional<std::uint64_t> seed, std::optional<std::string> output_dir,
         std::optional<std::size_t> epochs, bool write_files) {
        RunOptions o;
        o.seed = seed;
        o.output_dir = output_dir;
        o.epochs = epochs;
        o.write_files = write_files;
        const ExperimentConfig config = config_from(c);
        RunSummary s;
        {
          py::gil_scoped_release release;
          s = run_training(config, o);
        }
        return summary_dict(s);
      },
      py::arg("config"), py::arg("seed") = py::none(), py::arg("output_dir") = py::none(),
      py::arg("epochs") = py::none(), py::arg("write_files") = true);

  m.def(
      "resume",
      [](const std::filesystem::path& checkpoint, std::optional<std::size_t> epochs) {
        RunOptions o;
        o.epochs = epochs;
        RunSummary s;
        {
          py::gil_scoped_release release;
          s = resume_training(checkpoint, std::nullopt, o);
        }
        return summary_dict(s);
      },
      py::arg("checkpoint"), py::arg("epochs") = py::none());

  m.def(
      "ratio_profile",
      [](const py::object& c, std::size_t seeds) {
        py::list out;
        for (const auto& row : fbalign::ratio_profile(config_from(c), seeds)) {
          py::dict d;
          d["layer"] = row.name;
          d["measured_ratio"] = row.measured_ratio;
          d["cumulative_product"] = row.cumulative_product;
          d["norm_ratio"] = row.norm_ratio;
          out.append(d);
        }
        return out;
      },
      py::arg("config"), py::arg("seeds") = 10);

  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& path) {
        const CheckpointData data = read_checkpoint(path);
        py::dict tensors;
        for (const auto& [name, t] : data.tensors) tensors[py::str(name)] = to_array(t);
        return py::make_tuple(from_json_value(data.manifest), tensors);
      },
      py::arg("path"), "(manifest, {name: array}).");
}
