#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <json.hpp>

#include "fbalign/network.hpp"
#include "fbalign/ops.hpp"
#include "fbalign/rng.hpp"
#include "fbalign/tensor.hpp"

namespace fbalign::testing {

/// Central differences of a scalar function of `x`, one coordinate at a time.
inline Tensor64 numeric_gradient(Tensor64 x, const std::function<double(const Tensor64&)>& f, double step = 1e-4) {
  Tensor64 g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f(x);
    x[i] = saved - step;
    const double down = f(x);
    x[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
template <typename T>
double relative_error(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    diff += d * d;
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

inline Tensor64 random64(Rng& rng, const Shape& shape, double var = 1.0) {
  return fill_gaussian<double>(rng, shape, var);
}

/// Weighted sum <w, y>: a scalar loss whose gradient with respect to y is w.
inline double weighted_sum(const Tensor64& y, const Tensor64& w) { return dot(y, w); }

}  // namespace fbalign::testing

namespace fbalign::testing {

/// Double-precision parameters of a network, indexed by layer.
struct Params64 {
  std::vector<Tensor64> weights;
  std::vector<Tensor64> bias;
};

inline Params64 params64(const NetworkState& net) {
  Params64 p;
  for (const auto& l : net.layers()) {
    p.weights.push_back(l.trainable() ? l.weights.cast<double>() : Tensor64());
    p.bias.push_back(l.trainable() ? l.bias.cast<double>() : Tensor64());
  }
  return p;
}

/// Eval-mode mean cross-entropy of `net`'s architecture with parameters `p`,
/// evaluated in double directly from the ops (dropout is the identity).
inline double loss64(const NetworkState& net, const Params64& p, const Tensor64& batch, const std::vector<int>& labels) {
  Tensor64 x = batch;
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const LayerState& l = net.layer(i);
    switch (l.spec.kind) {
      case LayerKind::conv: x = conv2d(x, p.weights[i], p.bias[i], l.geometry()); break;
      case LayerKind::dense: x = dense(x, p.weights[i], p.bias[i]); break;
      case LayerKind::relu: x = relu(x); break;
      case LayerKind::maxpool: x = maxpool2d(x, l.spec.window, l.spec.stride).output; break;
      case LayerKind::global_avg_pool: x = global_avg_pool(x); break;
      case LayerKind::dropout:
      case LayerKind::softmax_xent: break;
    }
  }
  return softmax_cross_entropy(x, labels).loss;
}

inline std::vector<int> random_labels(Rng& rng, std::size_t n, std::size_t classes) {
  std::vector<int> out(n);
  for (auto& v : out) v = static_cast<int>(rng.uniform_index(classes));
  return out;
}

}  // namespace fbalign::testing

namespace fbalign::testing {

/// Small synthetic experiment: a [1,8,8] conv net (or a dense stack when
/// `dense` is set) with `overrides` merged over the defaults.
inline nlohmann::json toy_config_json(const std::string& strategy, bool dense = false) {
  nlohmann::json layers = dense ? nlohmann::json::array({{{"kind", "dense"}, {"units", 16}},
                                                         {{"kind", "relu"}},
                                                         {{"kind", "dense"}, {"units", 12}},
                                                         {{"kind", "relu"}},
                                                         {{"kind", "dense"}, {"units", 4}},
                                                         {{"kind", "softmax_xent"}}})
                                : nlohmann::json::array({{{"kind", "conv"}, {"units", 4}, {"kernel", 3}},
                                                         {{"kind", "relu"}},
                                                         {{"kind", "maxpool"}},
                                                         {{"kind", "dense"}, {"units", 12}},
                                                         {{"kind", "relu"}},
                                                         {{"kind", "dropout"}, {"p", 0.25}},
                                                         {{"kind", "dense"}, {"units", 4}},
                                                         {{"kind", "softmax_xent"}}});
  const nlohmann::json shape = dense ? nlohmann::json::array({20}) : nlohmann::json::array({1, 8, 8});
  return {
      {"name", "toy"},
      {"network", {{"name", "toy"}, {"input_shape", shape}, {"classes", 4}, {"layers", layers}}},
      {"dataset",
       {{"kind", "synthetic"},
        {"synthetic", {{"shape", shape}, {"classes", 4}, {"train", 64}, {"test", 32}, {"noise", 0.5}, {"seed", 1}}}}},
      {"strategy", strategy},
      {"schedule", {{"kind", "constant"}, {"lr", 0.001}}},
      {"epochs", 2},
      {"batch_size", 16},
      {"seed", 5},
      {"output_dir", "toy_run"},
      {"metrics", {{"loss_every", 2}, {"probe_size", 16}, {"wall_time", false}}},
  };
}

}  // namespace fbalign::testing
