#pragma once

// Credit-assignment strategies. Every strategy produces per-layer error
// signals (deltas at the output of each conv/dense layer) and then applies
// the same local update rule dW = delta * x^T; they differ only in how the
// error reaches a layer:
//
//   bp        transported forward weights (adjoint of the forward map)
//   fa        fixed random feedback tensors in the forward weights' place
//   usf_init  feedback = |B0| * sign(W), refreshed as W changes
//   usf_sn    feedback = ||W|| * sign(W) / ||sign(W)||, refreshed as W changes
//   dfa       output error projected straight to each hidden layer
//   dense_fa  sum of projections from every downstream layer's error

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fbalign/network.hpp"

namespace fbalign {

enum class Strategy { bp, fa, usf_init, usf_sn, dfa, dense_fa };

std::string_view to_string(Strategy strategy);
Strategy parse_strategy(std::string_view name);
std::vector<std::string> strategy_names();

/// True for strategies that carry a feedback tensor per layer (fa, usf_*).
bool uses_layer_feedback(Strategy strategy);
bool uses_projections(Strategy strategy);
bool is_usf(Strategy strategy);

/// Fixed dense map from a downstream error to a hidden layer's
/// pre-activation. `source` is a layer index, or nullopt for the K-dim
/// output error.
struct Projection {
  std::size_t target = 0;
  std::optional<std::size_t> source;
  Tensor matrix;  // [target_dim, source_dim]
};

struct FeedbackState {
  Strategy strategy = Strategy::bp;
  std::uint64_t seed = 0;
  std::vector<Tensor> feedback;           // per layer index, same shape as the weights
  std::vector<Tensor> initial_magnitude;  // |B0| per layer; usf_init only
  std::vector<Projection> projections;    // dfa / dense_fa only

  const Tensor& feedback_for(std::size_t layer) const;
  /// Replaces one layer's feedback tensor; shape must match.
  void set_feedback(std::size_t layer, Tensor value);
};

struct FeedbackOptions {
  std::size_t projection_memory_cap_bytes = std::size_t{2} << 30;
};

/// Bytes needed by the dfa/dense_fa projections of a network (0 otherwise).
std::size_t projection_memory_bytes(const NetworkState& net, Strategy strategy);

/// Draws feedback tensors with the scheme's feedback variance (1/n_out under
/// fa_decoupled) and, for uSF strategies, immediately applies the refresh rule.
/// Throws if dfa/dense_fa projections would exceed the memory cap.
FeedbackState init_feedback(const NetworkState& net, Strategy strategy, InitScheme scheme, Rng& rng,
                            const FeedbackOptions& options = {});

/// Re-derives uSF feedback from the current forward weights. Norms are taken
/// per layer over the whole weight tensor. No-op for other strategies.
void refresh_usf(FeedbackState& feedback, const NetworkState& net);

/// Sets every layer's feedback to its forward weights (test and diagnostic aid:
/// makes fa-family backward reproduce backprop).
void mirror_forward_weights(FeedbackState& feedback, const NetworkState& net);

struct Gradients {
  std::vector<ParamGrads<float>> layers;  // indexed by layer; empty for parameter-free layers
  std::vector<Tensor> deltas;             // error at each trainable layer's output
};

/// Strategy backward pass over the cached forward of `net`.
/// `output_delta` is dJ/dlogits, shape [N,K].
Gradients backward(const NetworkState& net, const FeedbackState& feedback, const Tensor& output_delta);

/// Backprop reference on the same cache.
Gradients backward_bp(const NetworkState& net, const Tensor& output_delta);

struct LayerAngle {
  std::size_t layer = 0;
  std::string name;
  std::optional<double> degrees;  // nullopt when either gradient is zero
};

/// Angle between each trainable layer's strategy weight gradient and the
/// backprop weight gradient computed on the same cache.
std::vector<LayerAngle> alignment_angles(const NetworkState& net, const FeedbackState& feedback,
                                         const Tensor& output_delta);

/// Angles between two already-computed gradient sets.
std::vector<LayerAngle> gradient_angles(const NetworkState& net, const Gradients& candidate,
                                        const Gradients& reference);

}  // namespace fbalign
