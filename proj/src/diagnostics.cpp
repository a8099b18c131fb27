#include "fbalign/diagnostics.hpp"

namespace fbalign {

SignFlipTracker::SignFlipTracker(const NetworkState& net) {
  for (auto i : net.trainable()) {
    layers_.push_back(i);
    initial_sign_.push_back(sign(net.layer(i).weights));
    ever_flipped_.emplace_back(net.layer(i).weights.size(), 0);
    flipped_count_.push_back(0);
  }
}

SignFlipTracker SignFlipTracker::restore(std::vector<std::size_t> layers, std::vector<Tensor> initial_signs,
                                         std::vector<std::vector<std::uint8_t>> ever_flipped) {
  if (layers.size() != initial_signs.size() || layers.size() != ever_flipped.size()) {
    throw FormatError("sign-flip tracker state is inconsistent");
  }
  SignFlipTracker t;
  t.layers_ = std::move(layers);
  t.initial_sign_ = std::move(initial_signs);
  t.ever_flipped_ = std::move(ever_flipped);
  for (std::size_t k = 0; k < t.layers_.size(); ++k) {
    if (t.ever_flipped_[k].size() != t.initial_sign_[k].size()) throw FormatError("sign-flip tracker size mismatch");
    std::size_t n = 0;
    for (auto f : t.ever_flipped_[k]) n += f;
    t.flipped_count_.push_back(n);
  }
  return t;
}

SignFlipTracker::Fractions SignFlipTracker::update(const NetworkState& net) {
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const Tensor& w = net.layer(layers_[k]).weights;
    const Tensor& s0 = initial_sign_[k];
    auto& flipped = ever_flipped_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (flipped[i] || s0[i] == 0.0f) continue;
      if ((s0[i] > 0.0f && w[i] < 0.0f) || (s0[i] < 0.0f && w[i] > 0.0f)) {
        flipped[i] = 1;
        ++flipped_count_[k];
      }
    }
  }
  return fractions();
}

SignFlipTracker::Fractions SignFlipTracker::fractions() const {
  Fractions f;
  std::size_t total = 0, flipped = 0;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const std::size_t n = ever_flipped_[k].size();
    f.per_layer.push_back(n ? static_cast<double>(flipped_count_[k]) / static_cast<double>(n) : 0.0);
    total += n;
    flipped += flipped_count_[k];
  }
  f.global = total ? static_cast<double>(flipped) / static_cast<double>(total) : 0.0;
  return f;
}

SignFlipTracker::Fractions update_sign_flips(SignFlipTracker& tracker, const NetworkState& net) {
  return tracker.update(net);
}

GradientRatioReport gradient_ratio_profile(NetworkState& net, const FeedbackState& feedback, const Tensor& batch,
                                           std::span<const int> labels) {
  if (!uses_layer_feedback(feedback.strategy)) {
    throw Error("gradient_ratio_profile needs a per-layer feedback strategy (fa, usf_init, usf_sn), got " +
                std::string(to_string(feedback.strategy)));
  }
  Rng unused(0);
  const Tensor logits = forward(net, batch, Mode::eval, unused);
  const LossResult loss = loss_and_output_delta(logits, labels);
  const Gradients bp = backward_bp(net, loss.delta);
  const Gradients fa = backward(net, feedback, loss.delta);

  GradientRatioReport report;
  const auto& trainable = net.trainable();
  std::vector<double> norm_ratio(trainable.size());
  for (std::size_t k = 0; k < trainable.size(); ++k) {
    const std::size_t i = trainable[k];
    const double b = l2_norm(feedback.feedback_for(i));
    norm_ratio[k] = b > 0.0 ? l2_norm(net.layer(i).weights) / b : 0.0;
  }
  double cumulative = 1.0;
  std::vector<GradientRatioRow> top_down;
  for (std::size_t k = trainable.size(); k-- > 0;) {
    const std::size_t i = trainable[k];
    const double bp_norm = l2_norm(bp.deltas[i]);
    GradientRatioRow row;
    row.layer = i;
    row.name = net.layer(i).name;
    row.measured_ratio = bp_norm > 0.0 ? l2_norm(fa.deltas[i]) / bp_norm : 0.0;
    row.norm_ratio = norm_ratio[k];
    row.cumulative_product = cumulative;
    top_down.push_back(row);
    cumulative *= norm_ratio[k];
  }
  report.rows.assign(top_down.rbegin(), top_down.rend());
  return report;
}

std::vector<AngleRow> record_angles(NetworkState& net, const FeedbackState& feedback, const Tensor& batch,
                                    std::span<const int> labels, std::size_t epoch, const GradientModifier& modify) {
  Rng unused(0);
  const Tensor logits = forward(net, batch, Mode::eval, unused);
  const LossResult loss = loss_and_output_delta(logits, labels);
  const Gradients reference = backward_bp(net, loss.delta);
  Gradients candidate = feedback.strategy == Strategy::bp ? reference : backward(net, feedback, loss.delta);
  if (modify) modify(candidate);
  std::vector<AngleRow> rows;
  for (const LayerAngle& a : gradient_angles(net, candidate, reference)) {
    rows.push_back({epoch, a.layer, a.name, a.degrees});
  }
  return rows;
}

}  // namespace fbalign
