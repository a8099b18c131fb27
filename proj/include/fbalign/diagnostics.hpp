#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fbalign/feedback.hpp"
#include "fbalign/network.hpp"

namespace fbalign {

/// Cumulative "changed sign since initialization" bookkeeping for every
/// trainable layer's weights. A weight counts once, permanently, when its
/// sign becomes the opposite nonzero sign of its initial value.
class SignFlipTracker {
 public:
  struct Fractions {
    std::vector<double> per_layer;  // aligned with layers()
    double global = 0.0;
  };

  SignFlipTracker() = default;
  explicit SignFlipTracker(const NetworkState& net);

  Fractions update(const NetworkState& net);
  Fractions fractions() const;

  const std::vector<std::size_t>& layers() const noexcept { return layers_; }
  const std::vector<Tensor>& initial_signs() const noexcept { return initial_sign_; }
  const std::vector<std::vector<std::uint8_t>>& ever_flipped() const noexcept { return ever_flipped_; }

  /// Rebuilds a tracker from checkpointed state.
  static SignFlipTracker restore(std::vector<std::size_t> layers, std::vector<Tensor> initial_signs,
                                 std::vector<std::vector<std::uint8_t>> ever_flipped);

 private:
  std::vector<std::size_t> layers_;
  std::vector<Tensor> initial_sign_;
  std::vector<std::vector<std::uint8_t>> ever_flipped_;
  std::vector<std::size_t> flipped_count_;
};

SignFlipTracker::Fractions update_sign_flips(SignFlipTracker& tracker, const NetworkState& net);

struct GradientRatioRow {
  std::size_t layer = 0;
  std::string name;
  double measured_ratio = 0.0;     // ||delta_strategy|| / ||delta_bp||
  double norm_ratio = 0.0;         // ||W|| / ||B|| of this layer
  double cumulative_product = 1.0; // product of norm_ratio over the layers above
};

struct GradientRatioReport {
  std::vector<GradientRatioRow> rows;  // bottom to top
};

/// One eval-mode forward and two backward passes (backprop and the feedback
/// strategy) on the same cache. Requires a per-layer-feedback strategy.
GradientRatioReport gradient_ratio_profile(NetworkState& net, const FeedbackState& feedback, const Tensor& batch,
                                           std::span<const int> labels);

struct AngleRow {
  std::size_t epoch = 0;
  std::size_t layer = 0;
  std::string name;
  std::optional<double> degrees;
};

/// Applied to the strategy gradients before comparison with backprop, so
/// runs with gradient noise or a penalty report the update they really use.
using GradientModifier = std::function<void(Gradients&)>;

/// Eval-mode forward on a fixed probe batch followed by alignment_angles.
std::vector<AngleRow> record_angles(NetworkState& net, const FeedbackState& feedback, const Tensor& batch,
                                    std::span<const int> labels, std::size_t epoch,
                                    const GradientModifier& modify = {});

}  // namespace fbalign
