#include "fbalign/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace fbalign {

using nlohmann::json;

namespace {

// Walks one JSON object, remembering which keys were read so leftovers can
// be reported as unknown fields.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  std::optional<T> optional(const std::string& key) {
    seen_.insert(key);
    if (!has(key)) return std::nullopt;
    return convert<T>(j_.at(key), field(key));
  }

  template <typename T>
  T required(const std::string& key) {
    seen_.insert(key);
    if (!has(key)) fail(field(key), "required field missing");
    return convert<T>(j_.at(key), field(key));
  }

  template <typename T>
  T get_or(const std::string& key, T fallback) {
    auto v = optional<T>(key);
    return v ? *v : fallback;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(field(it.key()), "unknown field");
    }
  }

  [[noreturn]] static void fail(const std::string& where, const std::string& what) {
    throw ConfigError(where + ": " + what);
  }

  template <typename T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(where, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(where, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(where, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        fail(where, "expected a non-negative integer");
      }
      return v.get<T>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require_positive(double v, const std::string& where) {
  if (!(v > 0.0)) ObjectReader::fail(where, "must be positive");
}

Shape parse_shape(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) ObjectReader::fail(where, "expected a non-empty array of positive integers");
  Shape s;
  for (std::size_t k = 0; k < j.size(); ++k) {
    const auto v = ObjectReader::convert<std::size_t>(j[k], where + "[" + std::to_string(k) + "]");
    if (v == 0) ObjectReader::fail(where + "[" + std::to_string(k) + "]", "must be positive");
    s.push_back(v);
  }
  return s;
}

template <typename Parse>
auto parse_enum(ObjectReader& r, const std::string& key, Parse parse) -> decltype(parse(std::string_view{})) {
  const std::string value = r.required<std::string>(key);
  try {
    return parse(value);
  } catch (const Error& e) {
    ObjectReader::fail(r.field(key), e.what());
  }
}

Schedule parse_schedule(const json& j) {
  ObjectReader r(j, "schedule");
  const std::string kind = r.get_or<std::string>("kind", "constant");
  const double lr = r.required<double>("lr");
  require_positive(lr, "schedule.lr");
  Schedule s;
  if (kind == "constant") {
    s = Schedule::constant(lr);
  } else if (kind == "step_at") {
    const auto epoch = r.required<std::size_t>("epoch");
    const double new_lr = r.required<double>("new_lr");
    require_positive(new_lr, "schedule.new_lr");
    s = Schedule::step_at(lr, epoch, new_lr);
  } else if (kind == "multiply_every") {
    const auto every = r.required<std::size_t>("every");
    if (every == 0) ObjectReader::fail("schedule.every", "must be positive");
    const double factor = r.required<double>("factor");
    require_positive(factor, "schedule.factor");
    s = Schedule::multiply_every(lr, every, factor);
  } else {
    ObjectReader::fail("schedule.kind", "expected constant, step_at or multiply_every, got '" + kind + "'");
  }
  r.finish();
  return s;
}

json schedule_to_json(const Schedule& s) {
  switch (s.kind) {
    case Schedule::Kind::constant:
      return {{"kind", "constant"}, {"lr", s.initial}};
    case Schedule::Kind::step_at:
      return {{"kind", "step_at"}, {"lr", s.initial}, {"epoch", s.epoch}, {"new_lr", s.value}};
    case Schedule::Kind::multiply_every:
      return {{"kind", "multiply_every"}, {"lr", s.initial}, {"every", s.epoch}, {"factor", s.value}};
  }
  return {};
}

DatasetConfig parse_dataset(const json& j) {
  ObjectReader r(j, "dataset");
  DatasetConfig d;
  const std::string kind = r.required<std::string>("kind");
  if (kind == "mnist") {
    d.kind = DatasetKind::mnist;
  } else if (kind == "cifar10") {
    d.kind = DatasetKind::cifar10;
  } else if (kind == "synthetic") {
    d.kind = DatasetKind::synthetic;
  } else {
    ObjectReader::fail("dataset.kind", "expected mnist, cifar10 or synthetic, got '" + kind + "'");
  }
  d.path = r.optional<std::string>("path");
  d.crop = r.optional<std::size_t>("crop");
  if (d.crop && *d.crop == 0) ObjectReader::fail("dataset.crop", "must be positive");
  if (r.has("synthetic")) {
    if (d.kind != DatasetKind::synthetic) ObjectReader::fail("dataset.synthetic", "only valid with kind synthetic");
    ObjectReader s(r.raw("synthetic"), "dataset.synthetic");
    if (s.has("shape")) d.synthetic.example_shape = parse_shape(s.raw("shape"), "dataset.synthetic.shape");
    d.synthetic.classes = s.get_or<std::size_t>("classes", d.synthetic.classes);
    d.synthetic.train_count = s.get_or<std::size_t>("train", d.synthetic.train_count);
    d.synthetic.test_count = s.get_or<std::size_t>("test", d.synthetic.test_count);
    d.synthetic.noise = s.get_or<double>("noise", d.synthetic.noise);
    d.synthetic.seed = s.get_or<std::uint64_t>("seed", d.synthetic.seed);
    if (d.synthetic.classes < 2) ObjectReader::fail("dataset.synthetic.classes", "must be at least 2");
    if (d.synthetic.train_count == 0 || d.synthetic.test_count == 0) {
      ObjectReader::fail("dataset.synthetic", "train and test counts must be positive");
    }
    s.finish();
  }
  r.finish();
  return d;
}

json dataset_to_json(const DatasetConfig& d) {
  json j{{"kind", std::string(to_string(d.kind))}};
  if (d.path) j["path"] = *d.path;
  if (d.crop) j["crop"] = *d.crop;
  if (d.kind == DatasetKind::synthetic) {
    j["synthetic"] = {{"shape", d.synthetic.example_shape}, {"classes", d.synthetic.classes},
                      {"train", d.synthetic.train_count},   {"test", d.synthetic.test_count},
                      {"noise", d.synthetic.noise},         {"seed", d.synthetic.seed}};
  }
  return j;
}

ConstraintConfig parse_constraints(const json& j) {
  ObjectReader r(j, "constraints");
  ConstraintConfig c;
  if (r.has("ei_freeze")) {
    ObjectReader e(r.raw("ei_freeze"), "constraints.ei_freeze");
    c.ei_freeze_fraction = e.get_or<double>("fraction", 0.05);
    c.ei_clip = e.get_or<double>("clip", 1e-8);
    if (*c.ei_freeze_fraction < 0.0 || *c.ei_freeze_fraction > 1.0) {
      ObjectReader::fail("constraints.ei_freeze.fraction", "must lie in [0, 1]");
    }
    require_positive(c.ei_clip, "constraints.ei_freeze.clip");
    e.finish();
  }
  c.norm_constraint = r.get_or<bool>("norm_constraint", false);
  if (r.has("alignment_penalty")) {
    ObjectReader a(r.raw("alignment_penalty"), "constraints.alignment_penalty");
    c.alignment_penalty = a.get_or<double>("lambda", 0.001);
    require_positive(*c.alignment_penalty, "constraints.alignment_penalty.lambda");
    a.finish();
  }
  if (r.has("grad_noise")) {
    ObjectReader n(r.raw("grad_noise"), "constraints.grad_noise");
    c.grad_noise = n.get_or<double>("scale", 1.0);
    if (*c.grad_noise < 0.0) ObjectReader::fail("constraints.grad_noise.scale", "must be non-negative");
    n.finish();
  }
  c.batch_manhattan = r.get_or<bool>("batch_manhattan", false);
  c.weight_decay = r.optional<double>("weight_decay");
  if (c.weight_decay && *c.weight_decay < 0.0) ObjectReader::fail("constraints.weight_decay", "must be non-negative");
  r.finish();
  return c;
}

json constraints_to_json(const ConstraintConfig& c) {
  json j = json::object();
  if (c.ei_freeze_fraction) j["ei_freeze"] = {{"fraction", *c.ei_freeze_fraction}, {"clip", c.ei_clip}};
  if (c.norm_constraint) j["norm_constraint"] = true;
  if (c.alignment_penalty) j["alignment_penalty"] = {{"lambda", *c.alignment_penalty}};
  if (c.grad_noise) j["grad_noise"] = {{"scale", *c.grad_noise}};
  if (c.batch_manhattan) j["batch_manhattan"] = true;
  if (c.weight_decay) j["weight_decay"] = *c.weight_decay;
  return j;
}

LayerSpec parse_layer(const json& j, const std::string& where) {
  ObjectReader r(j, where);
  LayerSpec l;
  const std::string kind = r.required<std::string>("kind");
  try {
    l.kind = parse_layer_kind(kind);
  } catch (const Error& e) {
    ObjectReader::fail(where + ".kind", e.what());
  }
  switch (l.kind) {
    case LayerKind::conv: {
      const auto units = r.required<std::size_t>("units");
      const auto kernel = r.required<std::size_t>("kernel");
      const auto stride = r.get_or<std::size_t>("stride", 1);
      if (units == 0 || kernel == 0 || stride == 0) ObjectReader::fail(where, "units, kernel and stride must be positive");
      l = r.has("padding") ? LayerSpec::conv(units, kernel, stride, r.required<std::size_t>("padding"))
                           : LayerSpec::conv_same(units, kernel, stride);
      break;
    }
    case LayerKind::maxpool: {
      const auto window = r.get_or<std::size_t>("window", 2);
      const auto stride = r.get_or<std::size_t>("stride", 2);
      if (window == 0 || stride == 0) ObjectReader::fail(where, "window and stride must be positive");
      l = LayerSpec::maxpool(window, stride);
      break;
    }
    case LayerKind::dense: {
      const auto units = r.required<std::size_t>("units");
      if (units == 0) ObjectReader::fail(where + ".units", "must be positive");
      l = LayerSpec::dense(units);
      break;
    }
    case LayerKind::dropout: {
      const double p = r.required<double>("p");
      if (p < 0.0 || p >= 1.0) ObjectReader::fail(where + ".p", "must lie in [0, 1)");
      l = LayerSpec::dropout(p);
      break;
    }
    case LayerKind::relu:
      l = LayerSpec::relu();
      break;
    case LayerKind::global_avg_pool:
      l = LayerSpec::global_avg_pool();
      break;
    case LayerKind::softmax_xent:
      l = LayerSpec::softmax_xent();
      break;
  }
  r.finish();
  return l;
}

json layer_to_json(const LayerSpec& l) {
  json j{{"kind", std::string(to_string(l.kind))}};
  switch (l.kind) {
    case LayerKind::conv:
      j["units"] = l.units;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::maxpool:
      j["window"] = l.window;
      j["stride"] = l.stride;
      break;
    case LayerKind::dense:
      j["units"] = l.units;
      break;
    case LayerKind::dropout:
      j["p"] = l.drop_prob;
      break;
    default:
      break;
  }
  return j;
}

std::string env_or(const char* name, const char* fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

}  // namespace

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::mnist:
      return "mnist";
    case DatasetKind::cifar10:
      return "cifar10";
    case DatasetKind::synthetic:
      return "synthetic";
  }
  return "unknown";
}

bool DatasetConfig::operator==(const DatasetConfig& o) const {
  if (kind != o.kind || crop != o.crop) return false;
  if (kind != DatasetKind::synthetic) return true;  // paths may move between machines
  const auto& a = synthetic;
  const auto& b = o.synthetic;
  return a.example_shape == b.example_shape && a.classes == b.classes && a.train_count == b.train_count &&
         a.test_count == b.test_count && a.noise == b.noise && a.seed == b.seed;
}

NetworkSpec network_from_json(const json& j, const std::string& where) {
  ObjectReader r(j, where);
  NetworkSpec spec;
  spec.name = r.get_or<std::string>("name", "custom");
  spec.input_shape = parse_shape(r.raw("input_shape"), where + ".input_shape");
  spec.classes = r.required<std::size_t>("classes");
  if (spec.classes < 2) ObjectReader::fail(where + ".classes", "must be at least 2");
  const json& layers = r.raw("layers");
  if (!layers.is_array() || layers.empty()) ObjectReader::fail(where + ".layers", "expected a non-empty array");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    spec.layers.push_back(parse_layer(layers[k], where + ".layers[" + std::to_string(k) + "]"));
  }
  r.finish();
  try {
    spec.resolve_shapes();
  } catch (const Error& e) {
    ObjectReader::fail(where, e.what());
  }
  return spec;
}

json network_to_json(const NetworkSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) layers.push_back(layer_to_json(l));
  return {{"name", spec.name}, {"input_shape", spec.input_shape}, {"classes", spec.classes}, {"layers", layers}};
}

NetworkSpec ExperimentConfig::resolved_network() const {
  if (network) return *network;
  if (architecture) {
    if (auto spec = named_architecture(*architecture)) return *spec;
  }
  throw ConfigError("architecture: no architecture resolved");
}

std::filesystem::path ExperimentConfig::dataset_path() const {
  if (dataset.path) return *dataset.path;
  switch (dataset.kind) {
    case DatasetKind::mnist:
      return env_or("FBALIGN_MNIST_DIR", "data/mnist");
    case DatasetKind::cifar10:
      return env_or("FBALIGN_CIFAR_DIR", "data/cifar10");
    case DatasetKind::synthetic:
      return {};
  }
  return {};
}

ExperimentConfig parse_config(const json& j) {
  ObjectReader r(j, "");
  ExperimentConfig c;
  c.name = r.get_or<std::string>("name", c.name);
  c.architecture = r.optional<std::string>("architecture");
  if (r.has("network")) c.network = network_from_json(r.raw("network"));
  if (c.architecture && c.network) ObjectReader::fail("architecture", "give either architecture or network, not both");
  if (!c.architecture && !c.network) ObjectReader::fail("architecture", "required field missing (or give network)");
  if (c.architecture && !named_architecture(*c.architecture)) {
    std::string known;
    for (const auto& n : architecture_names()) known += (known.empty() ? "" : ", ") + n;
    ObjectReader::fail("architecture", "unknown architecture '" + *c.architecture + "' (known: " + known + ")");
  }
  c.dataset = parse_dataset(r.raw("dataset"));
  c.strategy = parse_enum(r, "strategy", parse_strategy);
  if (r.has("init")) {
    c.init = parse_enum(r, "init", parse_init_scheme);
  }
  if (r.has("optimizer")) {
    ObjectReader o(r.raw("optimizer"), "optimizer");
    const std::string kind = o.get_or<std::string>("kind", "adam");
    if (kind != "adam") ObjectReader::fail("optimizer.kind", "only adam is supported, got '" + kind + "'");
    c.adam.beta1 = o.get_or<double>("beta1", c.adam.beta1);
    c.adam.beta2 = o.get_or<double>("beta2", c.adam.beta2);
    c.adam.epsilon = o.get_or<double>("epsilon", c.adam.epsilon);
    if (c.adam.beta1 < 0 || c.adam.beta1 >= 1) ObjectReader::fail("optimizer.beta1", "must lie in [0, 1)");
    if (c.adam.beta2 < 0 || c.adam.beta2 >= 1) ObjectReader::fail("optimizer.beta2", "must lie in [0, 1)");
    require_positive(c.adam.epsilon, "optimizer.epsilon");
    o.finish();
  }
  if (!r.has("schedule")) ObjectReader::fail("schedule", "required field missing");
  c.schedule = parse_schedule(r.raw("schedule"));
  if (r.has("constraints")) c.constraints = parse_constraints(r.raw("constraints"));
  c.epochs = r.required<std::size_t>("epochs");
  c.batch_size = r.required<std::size_t>("batch_size");
  if (c.batch_size == 0) ObjectReader::fail("batch_size", "must be positive");
  c.eval_batch_size = r.get_or<std::size_t>("eval_batch_size", c.eval_batch_size);
  if (c.eval_batch_size == 0) ObjectReader::fail("eval_batch_size", "must be positive");
  c.seed = r.get_or<std::uint64_t>("seed", c.seed);
  c.output_dir = r.get_or<std::string>("output_dir", "runs/" + c.name);
  if (r.has("metrics")) {
    ObjectReader m(r.raw("metrics"), "metrics");
    c.metrics.loss_every = m.get_or<std::size_t>("loss_every", c.metrics.loss_every);
    c.metrics.angles = m.get_or<bool>("angles", c.metrics.angles);
    c.metrics.probe_size = m.get_or<std::size_t>("probe_size", c.metrics.probe_size);
    c.metrics.wall_time = m.get_or<bool>("wall_time", c.metrics.wall_time);
    if (c.metrics.probe_size == 0) ObjectReader::fail("metrics.probe_size", "must be positive");
    m.finish();
  }
  c.checkpoint_every = r.get_or<std::size_t>("checkpoint_every", c.checkpoint_every);
  c.projection_memory_cap_mib = r.get_or<std::size_t>("projection_memory_cap_mib", c.projection_memory_cap_mib);
  r.finish();

  const NetworkSpec net = c.resolved_network();
  if (c.dataset.kind == DatasetKind::synthetic) {
    Shape expected = c.dataset.synthetic.example_shape;
    if (c.dataset.crop) {
      if (expected.size() != 3) ObjectReader::fail("dataset.crop", "needs [C,H,W] images");
      expected[1] = expected[2] = *c.dataset.crop;
    }
    if (expected != net.input_shape) {
      ObjectReader::fail("dataset.synthetic.shape", "images " + to_string(expected) + " do not match network input " +
                                                        to_string(net.input_shape));
    }
    if (c.dataset.synthetic.classes != net.classes) {
      ObjectReader::fail("dataset.synthetic.classes", "does not match network classes " + std::to_string(net.classes));
    }
  } else {
    Shape expected = c.dataset.kind == DatasetKind::mnist ? Shape{1, 28, 28} : Shape{3, 32, 32};
    if (c.dataset.crop) expected[1] = expected[2] = *c.dataset.crop;
    if (expected != net.input_shape) {
      ObjectReader::fail("dataset", std::string(to_string(c.dataset.kind)) + " images " + to_string(expected) +
                                        " do not match network input " + to_string(net.input_shape) +
                                        (c.dataset.kind == DatasetKind::cifar10 ? " (set dataset.crop?)" : ""));
    }
    if (net.classes != 10) ObjectReader::fail("architecture", "network must have 10 classes for this dataset");
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  if (c.architecture) j["architecture"] = *c.architecture;
  if (c.network) j["network"] = network_to_json(*c.network);
  j["dataset"] = dataset_to_json(c.dataset);
  j["strategy"] = std::string(to_string(c.strategy));
  j["init"] = std::string(to_string(c.init));
  j["optimizer"] = {{"kind", "adam"}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}};
  j["schedule"] = schedule_to_json(c.schedule);
  j["constraints"] = constraints_to_json(c.constraints);
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["eval_batch_size"] = c.eval_batch_size;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["metrics"] = {{"loss_every", c.metrics.loss_every},
                  {"angles", c.metrics.angles},
                  {"probe_size", c.metrics.probe_size},
                  {"wall_time", c.metrics.wall_time}};
  j["checkpoint_every"] = c.checkpoint_every;
  j["projection_memory_cap_mib"] = c.projection_memory_cap_mib;
  return j;
}

std::optional<std::string> identity_mismatch(const ExperimentConfig& a, const ExperimentConfig& b) {
  if (a.strategy != b.strategy) {
    return "strategy (" + std::string(to_string(a.strategy)) + " vs " + std::string(to_string(b.strategy)) + ")";
  }
  if (a.resolved_network() != b.resolved_network()) return "network architecture";
  if (a.init != b.init) return "init";
  if (a.seed != b.seed) return "seed";
  if (!(a.dataset == b.dataset)) return "dataset";
  if (!(a.constraints == b.constraints)) return "constraints";
  if (a.batch_size != b.batch_size) return "batch_size";
  const json sa = schedule_to_json(a.schedule), sb = schedule_to_json(b.schedule);
  if (sa != sb) return "schedule";
  if (a.adam.beta1 != b.adam.beta1 || a.adam.beta2 != b.adam.beta2 || a.adam.epsilon != b.adam.epsilon) {
    return "optimizer";
  }
  return std::nullopt;
}

}  // namespace fbalign
