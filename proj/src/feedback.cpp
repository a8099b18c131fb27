#include "fbalign/feedback.hpp"

#include <array>
#include <sstream>

namespace fbalign {

namespace {

constexpr std::array<std::pair<Strategy, std::string_view>, 6> kStrategyNames{{
    {Strategy::bp, "bp"},
    {Strategy::fa, "fa"},
    {Strategy::usf_init, "usf_init"},
    {Strategy::usf_sn, "usf_sn"},
    {Strategy::dfa, "dfa"},
    {Strategy::dense_fa, "dense_fa"},
}};

std::size_t flat_size(const LayerState& layer) { return shape_size(layer.output_shape); }

// Projections needed by dfa/dense_fa: one per (hidden trainable layer, source).
std::vector<std::pair<std::size_t, std::optional<std::size_t>>> projection_plan(const NetworkState& net,
                                                                                 Strategy strategy) {
  std::vector<std::pair<std::size_t, std::optional<std::size_t>>> plan;
  const auto& trainable = net.trainable();
  for (std::size_t t = 0; t + 1 < trainable.size(); ++t) {
    if (strategy == Strategy::dfa) {
      plan.emplace_back(trainable[t], std::nullopt);
    } else if (strategy == Strategy::dense_fa) {
      for (std::size_t k = t + 1; k < trainable.size(); ++k) plan.emplace_back(trainable[t], trainable[k]);
    }
  }
  return plan;
}

std::size_t source_dim(const NetworkState& net, const std::optional<std::size_t>& source) {
  return source ? flat_size(net.layer(*source)) : net.spec().classes;
}

void check_cache(const NetworkState& net, const Tensor& output_delta) {
  if (!net.cache_valid()) throw Error("backward: no valid forward cache (run forward after the last update)");
  if (output_delta.shape() != Shape{net.cached_batch(), net.spec().classes}) {
    throw ShapeError("backward: output delta " + to_string(output_delta.shape()) + " does not match cached batch [" +
                     std::to_string(net.cached_batch()) + "," + std::to_string(net.spec().classes) + "]");
  }
}

Gradients empty_gradients(const NetworkState& net) {
  Gradients g;
  g.layers.resize(net.layer_count());
  g.deltas.resize(net.layer_count());
  return g;
}

// Chain-through for adjacent-layer strategies; `transport(i)` supplies the
// tensor in the adjoint position of layer i.
template <typename TransportFn>
Gradients chain_backward(const NetworkState& net, const Tensor& output_delta, TransportFn transport) {
  Gradients g = empty_gradients(net);
  const std::size_t lowest = net.trainable().front();
  Tensor d = output_delta;
  for (std::size_t i = net.layer_count(); i-- > lowest;) {
    const LayerState& layer = net.layer(i);
    if (layer.trainable()) {
      g.layers[i] = param_grads(layer, d);
      g.deltas[i] = d;
      if (i == lowest) break;
      d = propagate(layer, d, transport(i));
    } else {
      d = propagate(layer, d);
    }
  }
  return g;
}

Gradients direct_backward(const NetworkState& net, const FeedbackState& fb, const Tensor& output_delta) {
  Gradients g = empty_gradients(net);
  const std::size_t top = net.top_trainable();
  Tensor d = output_delta;
  for (std::size_t i = net.layer_count(); i-- > top + 1;) d = propagate(net.layer(i), d);
  g.layers[top] = param_grads(net.layer(top), d);
  g.deltas[top] = d;

  const std::size_t batch = output_delta.dim(0);
  const auto& trainable = net.trainable();
  for (std::size_t t = trainable.size() - 1; t-- > 0;) {
    const std::size_t target = trainable[t];
    const LayerState& layer = net.layer(target);
    Tensor signal(Shape{batch, flat_size(layer)});
    for (const Projection& p : fb.projections) {
      if (p.target != target) continue;
      const Tensor& src = p.source ? g.deltas[*p.source] : output_delta;
      if (src.empty()) throw Error("dense feedback: downstream error for projection source is missing");
      const Tensor flat = src.reshaped({batch, src.size() / batch});
      add_inplace(signal, matmul_transposed(flat, p.matrix));
    }
    Shape full{batch};
    full.insert(full.end(), layer.output_shape.begin(), layer.output_shape.end());
    signal = std::move(signal).reshaped(full);
    // elementwise gates (relu, dropout) directly above the layer
    std::size_t end = target + 1;
    while (end < net.layer_count() && net.layer(end).spec.elementwise()) ++end;
    for (std::size_t j = end; j-- > target + 1;) signal = propagate(net.layer(j), signal);
    g.layers[target] = param_grads(layer, signal);
    g.deltas[target] = std::move(signal);
  }
  return g;
}

}  // namespace

std::string_view to_string(Strategy strategy) {
  for (const auto& [s, name] : kStrategyNames) {
    if (s == strategy) return name;
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  for (const auto& [s, n] : kStrategyNames) {
    if (n == name) return s;
  }
  throw Error("unknown strategy '" + std::string(name) + "' (expected bp, fa, usf_init, usf_sn, dfa or dense_fa)");
}

std::vector<std::string> strategy_names() {
  std::vector<std::string> names;
  for (const auto& entry : kStrategyNames) names.emplace_back(entry.second);
  return names;
}

bool uses_layer_feedback(Strategy s) { return s == Strategy::fa || is_usf(s); }
bool uses_projections(Strategy s) { return s == Strategy::dfa || s == Strategy::dense_fa; }
bool is_usf(Strategy s) { return s == Strategy::usf_init || s == Strategy::usf_sn; }

const Tensor& FeedbackState::feedback_for(std::size_t layer) const {
  if (layer >= feedback.size() || feedback[layer].empty()) {
    throw Error("no feedback tensor for layer " + std::to_string(layer));
  }
  return feedback[layer];
}

void FeedbackState::set_feedback(std::size_t layer, Tensor value) {
  if (layer >= feedback.size()) feedback.resize(layer + 1);
  if (!feedback[layer].empty()) require_same_shape(feedback[layer].shape(), value.shape(), "set_feedback");
  feedback[layer] = std::move(value);
}

std::size_t projection_memory_bytes(const NetworkState& net, Strategy strategy) {
  std::size_t bytes = 0;
  for (const auto& [target, source] : projection_plan(net, strategy)) {
    bytes += flat_size(net.layer(target)) * source_dim(net, source) * sizeof(float);
  }
  return bytes;
}

FeedbackState init_feedback(const NetworkState& net, Strategy strategy, InitScheme scheme, Rng& rng,
                            const FeedbackOptions& options) {
  FeedbackState fb;
  fb.strategy = strategy;
  fb.seed = rng.seed();
  if (uses_layer_feedback(strategy)) {
    fb.feedback.resize(net.layer_count());
    if (strategy == Strategy::usf_init) fb.initial_magnitude.resize(net.layer_count());
    for (auto i : net.trainable()) {
      const LayerState& layer = net.layer(i);
      Tensor b0 = fill_gaussian(rng, layer.weights.shape(), init_variances(scheme, layer.fan).feedback);
      if (strategy == Strategy::usf_init) fb.initial_magnitude[i] = abs(b0);
      fb.feedback[i] = std::move(b0);
    }
    refresh_usf(fb, net);
  } else if (uses_projections(strategy)) {
    const std::size_t bytes = projection_memory_bytes(net, strategy);
    if (bytes > options.projection_memory_cap_bytes) {
      std::ostringstream os;
      os << to_string(strategy) << " projections for '" << net.spec().name << "' need " << bytes / (1024 * 1024)
         << " MiB, above the cap of " << options.projection_memory_cap_bytes / (1024 * 1024) << " MiB:";
      for (const auto& [target, source] : projection_plan(net, strategy)) {
        os << "\n  " << net.layer(target).name << " <- " << (source ? net.layer(*source).name : "output")
           << ": " << flat_size(net.layer(target)) << "x" << source_dim(net, source);
      }
      throw Error(os.str());
    }
    for (const auto& [target, source] : projection_plan(net, strategy)) {
      const std::size_t cols = source_dim(net, source);
      Projection p{target, source, fill_gaussian(rng, {flat_size(net.layer(target)), cols}, 1.0 / cols)};
      fb.projections.push_back(std::move(p));
    }
  }
  return fb;
}

void refresh_usf(FeedbackState& fb, const NetworkState& net) {
  if (!is_usf(fb.strategy)) return;
  for (auto i : net.trainable()) {
    const Tensor& w = net.layer(i).weights;
    Tensor s = sign(w);
    if (fb.strategy == Strategy::usf_init) {
      fb.feedback[i] = mul(fb.initial_magnitude.at(i), s);
    } else {
      const double sign_norm = l2_norm(s);
      fb.feedback[i] = sign_norm > 0.0 ? scale(s, l2_norm(w) / sign_norm) : Tensor(w.shape());
    }
  }
}

void mirror_forward_weights(FeedbackState& fb, const NetworkState& net) {
  fb.feedback.resize(net.layer_count());
  for (auto i : net.trainable()) fb.feedback[i] = net.layer(i).weights;
}

Gradients backward_bp(const NetworkState& net, const Tensor& output_delta) {
  check_cache(net, output_delta);
  return chain_backward(net, output_delta, [&](std::size_t i) -> const Tensor& { return net.layer(i).weights; });
}

Gradients backward(const NetworkState& net, const FeedbackState& fb, const Tensor& output_delta) {
  check_cache(net, output_delta);
  switch (fb.strategy) {
    case Strategy::bp:
      return backward_bp(net, output_delta);
    case Strategy::fa:
    case Strategy::usf_init:
    case Strategy::usf_sn:
      return chain_backward(net, output_delta, [&](std::size_t i) -> const Tensor& { return fb.feedback_for(i); });
    case Strategy::dfa:
    case Strategy::dense_fa:
      return direct_backward(net, fb, output_delta);
  }
  throw Error("backward: unknown strategy");
}

std::vector<LayerAngle> gradient_angles(const NetworkState& net, const Gradients& candidate,
                                        const Gradients& reference) {
  std::vector<LayerAngle> angles;
  for (auto i : net.trainable()) {
    angles.push_back({i, net.layer(i).name,
                      angle_degrees(candidate.layers.at(i).weights.data(), reference.layers.at(i).weights.data())});
  }
  return angles;
}

std::vector<LayerAngle> alignment_angles(const NetworkState& net, const FeedbackState& fb,
                                         const Tensor& output_delta) {
  const Gradients reference = backward_bp(net, output_delta);
  if (fb.strategy == Strategy::bp) return gradient_angles(net, reference, reference);
  return gradient_angles(net, backward(net, fb, output_delta), reference);
}

}  // namespace fbalign
