#include "fbalign/network.hpp"

#include <array>
#include <cmath>
#include <utility>

namespace fbalign {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 7> kLayerNames{{
    {LayerKind::conv, "conv"},
    {LayerKind::maxpool, "maxpool"},
    {LayerKind::dense, "dense"},
    {LayerKind::relu, "relu"},
    {LayerKind::dropout, "dropout"},
    {LayerKind::global_avg_pool, "global_avg_pool"},
    {LayerKind::softmax_xent, "softmax_xent"},
}};

constexpr std::array<std::pair<InitScheme, std::string_view>, 3> kInitNames{{
    {InitScheme::glorot, "glorot"},
    {InitScheme::fa_decoupled, "fa_decoupled"},
    {InitScheme::naive, "naive"},
}};

std::string layer_label(std::size_t index, const LayerSpec& spec) {
  return "layer " + std::to_string(index) + " (" + std::string(to_string(spec.kind)) + ")";
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kLayerNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (const auto& [k, n] : kLayerNames) {
    if (n == name) return k;
  }
  throw Error("unknown layer kind '" + std::string(name) + "'");
}

std::string_view to_string(InitScheme scheme) {
  for (const auto& [s, name] : kInitNames) {
    if (s == scheme) return name;
  }
  return "unknown";
}

InitScheme parse_init_scheme(std::string_view name) {
  for (const auto& [s, n] : kInitNames) {
    if (n == name) return s;
  }
  throw Error("unknown init scheme '" + std::string(name) + "' (expected glorot, fa_decoupled or naive)");
}

LayerSpec LayerSpec::conv(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.units = channels;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::conv_same(std::size_t channels, std::size_t kernel, std::size_t stride) {
  return conv(channels, kernel, stride, kernel / 2);
}

LayerSpec LayerSpec::maxpool(std::size_t window, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::maxpool;
  s.window = window;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t units) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.units = units;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::dropout(double p) {
  LayerSpec s;
  s.kind = LayerKind::dropout;
  s.drop_prob = p;
  return s;
}

LayerSpec LayerSpec::global_avg_pool() {
  LayerSpec s;
  s.kind = LayerKind::global_avg_pool;
  return s;
}

LayerSpec LayerSpec::softmax_xent() {
  LayerSpec s;
  s.kind = LayerKind::softmax_xent;
  return s;
}

std::vector<Shape> NetworkSpec::resolve_shapes() const {
  if (input_shape.empty()) throw ShapeError("network '" + name + "' has no input shape");
  for (auto d : input_shape) {
    if (d == 0) throw ShapeError("network '" + name + "' input shape has a zero dimension");
  }
  if (classes < 2) throw ShapeError("network '" + name + "' needs at least two classes");
  if (layers.empty() || layers.back().kind != LayerKind::softmax_xent) {
    throw ShapeError("network '" + name + "' must end with a softmax_xent layer");
  }
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape current = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string label = layer_label(i, l);
    try {
      switch (l.kind) {
        case LayerKind::conv: {
          if (current.size() != 3) throw ShapeError("expects a [C,H,W] input, got " + to_string(current));
          if (l.units == 0 || l.kernel == 0 || l.stride == 0) throw ShapeError("channels, kernel and stride must be positive");
          const ConvGeometry g{l.stride, l.padding};
          current = {l.units, conv_output_extent(current[1], l.kernel, g), conv_output_extent(current[2], l.kernel, g)};
          break;
        }
        case LayerKind::maxpool: {
          if (current.size() != 3) throw ShapeError("expects a [C,H,W] input, got " + to_string(current));
          const ConvGeometry g{l.stride, 0};
          current = {current[0], conv_output_extent(current[1], l.window, g),
                     conv_output_extent(current[2], l.window, g)};
          break;
        }
        case LayerKind::dense:
          if (l.units == 0) throw ShapeError("units must be positive");
          current = {l.units};
          break;
        case LayerKind::relu:
          break;
        case LayerKind::dropout:
          if (!(l.drop_prob >= 0.0 && l.drop_prob < 1.0)) throw ShapeError("drop probability must be in [0,1)");
          break;
        case LayerKind::global_avg_pool:
          if (current.size() != 3) throw ShapeError("expects a [C,H,W] input, got " + to_string(current));
          current = {current[0]};
          break;
        case LayerKind::softmax_xent:
          if (i + 1 != layers.size()) throw ShapeError("softmax_xent must be the final layer");
          if (current != Shape{classes}) {
            throw ShapeError("expects " + std::to_string(classes) + " logits, got " + to_string(current));
          }
          break;
      }
    } catch (const ShapeError& e) {
      throw ShapeError("network '" + name + "', " + label + ": " + e.what());
    }
    shapes.push_back(current);
  }
  return shapes;
}

InitVariances init_variances(InitScheme scheme, FanInfo fan) {
  const double in = static_cast<double>(fan.fan_in);
  const double out = static_cast<double>(fan.fan_out);
  switch (scheme) {
    case InitScheme::glorot: {
      const double v = 1.0 / (0.5 * (in + out));
      return {v, v};
    }
    case InitScheme::fa_decoupled:
      return {1.0 / in, 1.0 / out};
    case InitScheme::naive:
      return {1.0, 1.0 / out};
  }
  return {};
}

NetworkState::NetworkState(NetworkSpec spec, std::vector<LayerState> layers)
    : spec_(std::move(spec)), layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].trainable()) trainable_.push_back(i);
  }
  if (trainable_.empty()) throw ShapeError("network '" + spec_.name + "' has no trainable layers");
}

Tensor& NetworkState::mutable_weights(std::size_t i) {
  cache_valid_ = false;
  return layers_.at(i).weights;
}

Tensor& NetworkState::mutable_bias(std::size_t i) {
  cache_valid_ = false;
  return layers_.at(i).bias;
}

std::size_t NetworkState::parameter_count() const {
  std::size_t n = 0;
  for (auto i : trainable_) n += layers_[i].weights.size() + layers_[i].bias.size();
  return n;
}

NetworkState build(const NetworkSpec& spec, InitScheme init, Rng& rng) {
  const std::vector<Shape> shapes = spec.resolve_shapes();
  std::vector<LayerState> layers(spec.layers.size());
  Shape in_shape = spec.input_shape;
  std::size_t trainable_ordinal = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerState& l = layers[i];
    l.spec = spec.layers[i];
    l.input_shape = in_shape;
    l.output_shape = shapes[i];
    if (l.trainable()) {
      ++trainable_ordinal;
      l.name = std::string(to_string(l.spec.kind)) + std::to_string(trainable_ordinal);
      Shape weight_shape;
      if (l.spec.kind == LayerKind::conv) {
        const std::size_t area = l.spec.kernel * l.spec.kernel;
        l.fan = {in_shape[0] * area, l.spec.units * area};
        weight_shape = {l.spec.units, in_shape[0], l.spec.kernel, l.spec.kernel};
      } else {
        const std::size_t features = shape_size(in_shape);
        l.fan = {features, l.spec.units};
        weight_shape = {l.spec.units, features};
      }
      l.weights = fill_gaussian(rng, weight_shape, init_variances(init, l.fan).forward);
      l.bias = Tensor(Shape{l.spec.units});
    } else {
      l.name = std::string(to_string(l.spec.kind)) + "@" + std::to_string(i);
    }
    in_shape = shapes[i];
  }
  return NetworkState(spec, std::move(layers));
}

Tensor forward(NetworkState& state, const Tensor& batch, Mode mode, Rng& rng) {
  if (batch.rank() != state.spec_.input_shape.size() + 1 ||
      !std::equal(state.spec_.input_shape.begin(), state.spec_.input_shape.end(), batch.shape().begin() + 1)) {
    throw ShapeError("batch " + to_string(batch.shape()) + " does not match network input " +
                     to_string(state.spec_.input_shape));
  }
  state.cache_valid_ = false;
  const std::size_t n = batch.dim(0);
  Tensor x = batch;
  for (LayerState& l : state.layers_) {
    switch (l.spec.kind) {
      case LayerKind::conv:
        l.input = std::move(x);
        x = conv2d(l.input, l.weights, l.bias, l.geometry());
        break;
      case LayerKind::dense:
        l.input = std::move(x);
        x = dense(l.input, l.weights, l.bias);
        break;
      case LayerKind::relu:
        l.input = std::move(x);
        x = relu(l.input);
        break;
      case LayerKind::dropout:
        if (mode == Mode::train && l.spec.drop_prob > 0.0) {
          const double keep = 1.0 - l.spec.drop_prob;
          const float scale_kept = static_cast<float>(1.0 / keep);
          l.mask = Tensor(x.shape());
          for (std::size_t i = 0; i < x.size(); ++i) {
            l.mask[i] = rng.uniform() < keep ? scale_kept : 0.0f;
            x[i] *= l.mask[i];
          }
        } else {
          l.mask = Tensor();
        }
        break;
      case LayerKind::maxpool: {
        l.input = Tensor();
        auto pooled = maxpool2d(x, l.spec.window, l.spec.stride);
        x = std::move(pooled.output);
        l.pool = std::move(pooled.indices);
        break;
      }
      case LayerKind::global_avg_pool:
        l.input = std::move(x);
        x = global_avg_pool(l.input);
        break;
      case LayerKind::softmax_xent:
        break;
    }
    if (!x.all_finite()) {
      throw NumericError("non-finite activation at " + l.name + " (" + to_string(x.shape()) + ")");
    }
  }
  if (x.shape() != Shape{n, state.spec_.classes}) {
    throw ShapeError("network produced " + to_string(x.shape()) + " instead of logits [N," +
                     std::to_string(state.spec_.classes) + "]");
  }
  state.cache_valid_ = true;
  state.cached_batch_ = n;
  return x;
}

LossResult loss_and_output_delta(const Tensor& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels);
}

Tensor propagate(const LayerState& layer, const Tensor& delta, const Tensor& transport) {
  switch (layer.spec.kind) {
    case LayerKind::conv:
      return conv2d_input_grad(delta, transport, layer.input.shape(), layer.geometry());
    case LayerKind::dense:
      return dense_input_grad(delta, transport, layer.input.shape());
    default:
      return propagate(layer, delta);
  }
}

Tensor propagate(const LayerState& layer, const Tensor& delta) {
  switch (layer.spec.kind) {
    case LayerKind::relu:
      return relu_grad(layer.input, delta);
    case LayerKind::dropout:
      return layer.mask.empty() ? delta : mul(delta, layer.mask);
    case LayerKind::maxpool:
      return maxpool2d_grad(delta, layer.pool);
    case LayerKind::global_avg_pool:
      return global_avg_pool_grad(delta, layer.input.shape());
    case LayerKind::softmax_xent:
      return delta;
    case LayerKind::conv:
    case LayerKind::dense:
      break;
  }
  throw Error("propagate: " + layer.name + " needs a transport matrix");
}

ParamGrads<float> param_grads(const LayerState& layer, const Tensor& delta) {
  if (layer.spec.kind == LayerKind::conv) {
    return conv2d_kernel_grad(layer.input, delta, layer.spec.kernel, layer.spec.kernel, layer.geometry());
  }
  if (layer.spec.kind == LayerKind::dense) return dense_weight_grad(layer.input, delta);
  throw Error("param_grads: " + layer.name + " has no parameters");
}

NetworkSpec mnist_model() {
  NetworkSpec s{"mnist", {1, 28, 28}, 10, {}};
  s.layers = {LayerSpec::conv_same(32, 5), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv_same(64, 5), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::dense(1024),      LayerSpec::relu(), LayerSpec::dropout(0.5),
              LayerSpec::dense(10),        LayerSpec::softmax_xent()};
  return s;
}

NetworkSpec cifar10_model1() {
  NetworkSpec s{"cifar10_1", {3, 24, 24}, 10, {}};
  s.layers = {LayerSpec::conv_same(64, 5), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv_same(64, 5), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::dense(384),       LayerSpec::relu(), LayerSpec::dense(192),
              LayerSpec::relu(),           LayerSpec::dense(10), LayerSpec::softmax_xent()};
  return s;
}

NetworkSpec cifar10_model2() {
  NetworkSpec s{"cifar10_2", {3, 32, 32}, 10, {}};
  s.layers = {LayerSpec::dropout(0.2),
              LayerSpec::conv_same(96, 3),     LayerSpec::relu(),
              LayerSpec::conv_same(96, 3),     LayerSpec::relu(),
              LayerSpec::conv_same(96, 3, 2),  LayerSpec::relu(), LayerSpec::dropout(0.5),
              LayerSpec::conv_same(192, 3),    LayerSpec::relu(),
              LayerSpec::conv_same(192, 3),    LayerSpec::relu(),
              LayerSpec::conv_same(192, 3, 2), LayerSpec::relu(), LayerSpec::dropout(0.5),
              LayerSpec::conv_same(192, 3),    LayerSpec::relu(),
              LayerSpec::conv_same(192, 1),    LayerSpec::relu(),
              LayerSpec::conv_same(10, 1),     LayerSpec::relu(),
              LayerSpec::global_avg_pool(),    LayerSpec::softmax_xent()};
  return s;
}

NetworkSpec imagenet_model1() {
  NetworkSpec s{"imagenet_1", {3, 299, 299}, 1000, {}};
  s.layers = {LayerSpec::conv_same(192, 9, 2), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv_same(192, 5, 2), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::dense(512),           LayerSpec::relu(),
              LayerSpec::dense(512),           LayerSpec::relu(),
              LayerSpec::dense(1000),          LayerSpec::softmax_xent()};
  return s;
}

NetworkSpec imagenet_model2() {
  NetworkSpec s{"imagenet_2", {3, 299, 299}, 1000, {}};
  s.layers = {LayerSpec::conv_same(192, 9, 4),  LayerSpec::relu(),
              LayerSpec::conv_same(192, 3, 2),  LayerSpec::relu(),
              LayerSpec::conv_same(192, 3, 3),  LayerSpec::relu(),
              LayerSpec::conv_same(256, 5, 2),  LayerSpec::relu(),
              LayerSpec::conv_same(256, 3, 1),  LayerSpec::relu(),
              LayerSpec::conv_same(256, 3, 2),  LayerSpec::relu(),
              LayerSpec::conv_same(512, 3, 1),  LayerSpec::relu(),
              LayerSpec::conv_same(512, 1, 1),  LayerSpec::relu(),
              LayerSpec::conv_same(1000, 1, 1), LayerSpec::relu(),
              LayerSpec::global_avg_pool(),     LayerSpec::softmax_xent()};
  return s;
}

NetworkSpec dense_stack(std::size_t input_features, const std::vector<std::size_t>& hidden,
                        std::size_t classes) {
  NetworkSpec s{"dense_stack", {input_features}, classes, {}};
  for (auto width : hidden) {
    s.layers.push_back(LayerSpec::dense(width));
    s.layers.push_back(LayerSpec::relu());
  }
  s.layers.push_back(LayerSpec::dense(classes));
  s.layers.push_back(LayerSpec::softmax_xent());
  return s;
}

std::optional<NetworkSpec> named_architecture(std::string_view name) {
  if (name == "mnist") return mnist_model();
  if (name == "cifar10_1") return cifar10_model1();
  if (name == "cifar10_2") return cifar10_model2();
  if (name == "imagenet_1") return imagenet_model1();
  if (name == "imagenet_2") return imagenet_model2();
  return std::nullopt;
}

std::vector<std::string> architecture_names() {
  return {"mnist", "cifar10_1", "cifar10_2", "imagenet_1", "imagenet_2"};
}

}  // namespace fbalign
