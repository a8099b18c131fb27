#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fbalign/ops.hpp"
#include "fbalign/rng.hpp"
#include "fbalign/tensor.hpp"

namespace fbalign {

enum class LayerKind { conv, maxpool, dense, relu, dropout, global_avg_pool, softmax_xent };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;  // conv output channels or dense units
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t window = 2;  // maxpool only
  double drop_prob = 0.0;

  static LayerSpec conv(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t padding);
  /// Zero padding of kernel/2, which preserves extents at stride 1 for odd kernels.
  static LayerSpec conv_same(std::size_t channels, std::size_t kernel, std::size_t stride = 1);
  static LayerSpec maxpool(std::size_t window = 2, std::size_t stride = 2);
  static LayerSpec dense(std::size_t units);
  static LayerSpec relu();
  static LayerSpec dropout(double p);
  static LayerSpec global_avg_pool();
  static LayerSpec softmax_xent();

  bool trainable() const { return kind == LayerKind::conv || kind == LayerKind::dense; }
  bool elementwise() const { return kind == LayerKind::relu || kind == LayerKind::dropout; }
  bool operator==(const LayerSpec&) const = default;
};

struct NetworkSpec {
  std::string name;
  Shape input_shape;  // per example: [C,H,W] or [features]
  std::size_t classes = 10;
  std::vector<LayerSpec> layers;

  /// Per-example output shape of every layer. Throws ShapeError naming the
  /// offending layer when consecutive shapes do not compose.
  std::vector<Shape> resolve_shapes() const;
  bool operator==(const NetworkSpec&) const = default;
};

enum class InitScheme { glorot, fa_decoupled, naive };

std::string_view to_string(InitScheme scheme);
InitScheme parse_init_scheme(std::string_view name);

struct FanInfo {
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

/// Weight variances for a trainable layer under a scheme.
/// glorot: 1/[(n_in+n_out)/2] for both paths; fa_decoupled: 1/n_in forward,
/// 1/n_out feedback; naive: unit forward variance with 1/n_out feedback.
struct InitVariances {
  double forward = 0.0;
  double feedback = 0.0;
};
InitVariances init_variances(InitScheme scheme, FanInfo fan);

struct LayerState {
  LayerSpec spec;
  std::string name;
  Shape input_shape;   // per example
  Shape output_shape;  // per example
  FanInfo fan;
  Tensor weights;  // [C_out,C_in,kh,kw] or [out,in]; trainable layers only
  Tensor bias;

  // Cache of the most recent forward pass.
  Tensor input;
  Tensor mask;  // dropout scale mask; empty in eval mode
  PoolIndices pool;

  bool trainable() const { return spec.trainable(); }
  ConvGeometry geometry() const { return {spec.stride, spec.padding}; }
};

enum class Mode { train, eval };

class NetworkState {
 public:
  NetworkState() = default;
  NetworkState(NetworkSpec spec, std::vector<LayerState> layers);

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t layer_count() const noexcept { return layers_.size(); }
  const LayerState& layer(std::size_t i) const { return layers_.at(i); }
  const std::vector<LayerState>& layers() const noexcept { return layers_; }

  /// Indices of conv/dense layers, bottom to top.
  const std::vector<std::size_t>& trainable() const noexcept { return trainable_; }
  std::size_t top_trainable() const { return trainable_.back(); }

  // Mutable parameter access invalidates the forward cache.
  Tensor& mutable_weights(std::size_t i);
  Tensor& mutable_bias(std::size_t i);

  bool cache_valid() const noexcept { return cache_valid_; }
  std::size_t cached_batch() const noexcept { return cached_batch_; }
  void invalidate_cache() noexcept { cache_valid_ = false; }

  std::size_t parameter_count() const;

 private:
  friend Tensor forward(NetworkState&, const Tensor&, Mode, Rng&);

  NetworkSpec spec_;
  std::vector<LayerState> layers_;
  std::vector<std::size_t> trainable_;
  bool cache_valid_ = false;
  std::size_t cached_batch_ = 0;
};

/// Samples parameters (weights from N(0, forward variance), biases zero).
NetworkState build(const NetworkSpec& spec, InitScheme init, Rng& rng);

/// Runs the network up to (not including) the softmax head and returns logits
/// [N,K]. Caches every intermediate needed by backward. Dropout draws from
/// `rng` only in train mode.
Tensor forward(NetworkState& state, const Tensor& batch, Mode mode, Rng& rng);

using LossResult = SoftmaxLoss<float>;

/// Mean cross-entropy and dJ/dlogits = (softmax - onehot)/N.
LossResult loss_and_output_delta(const Tensor& logits, std::span<const int> labels);

/// Moves an error signal from a layer's output to its input. For trainable
/// layers `transport` occupies the forward weights' adjoint position: the
/// weights themselves reproduce backprop, a feedback tensor gives FA.
Tensor propagate(const LayerState& layer, const Tensor& delta, const Tensor& transport);
/// Same, for layers without weights.
Tensor propagate(const LayerState& layer, const Tensor& delta);

/// Local parameter gradients dW = delta * x^T (dense) or delta * I (conv).
ParamGrads<float> param_grads(const LayerState& layer, const Tensor& delta);

// Named architectures. Convolutions use zero padding kernel/2.
NetworkSpec mnist_model();
NetworkSpec cifar10_model1();
NetworkSpec cifar10_model2();
NetworkSpec imagenet_model1();
NetworkSpec imagenet_model2();
/// Fully-connected ReLU stack: input -> hidden widths -> classes.
NetworkSpec dense_stack(std::size_t input_features, const std::vector<std::size_t>& hidden,
                        std::size_t classes);
/// Looks up "mnist", "cifar10_1", "cifar10_2", "imagenet_1", "imagenet_2".
std::optional<NetworkSpec> named_architecture(std::string_view name);
std::vector<std::string> architecture_names();

}  // namespace fbalign
