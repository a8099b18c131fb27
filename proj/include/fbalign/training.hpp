#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fbalign/data.hpp"
#include "fbalign/diagnostics.hpp"
#include "fbalign/feedback.hpp"
#include "fbalign/metrics.hpp"
#include "fbalign/network.hpp"

namespace fbalign {

// ---- optimizer ----

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamMoments {
  Tensor m_weights, v_weights;
  Tensor m_bias, v_bias;
};

struct AdamState {
  AdamConfig config;
  std::vector<AdamMoments> moments;  // indexed by layer; empty for parameter-free layers
  std::uint64_t t = 0;

  static AdamState for_network(const NetworkState& net, AdamConfig config = {});
};

/// Bias-corrected Adam on one tensor; `t` is the 1-based step count.
void adam_update(Tensor& param, Tensor& m, Tensor& v, const Tensor& grad, double lr, std::uint64_t t,
                 const AdamConfig& config);

/// One Adam step over every trainable layer. Checks all gradients for
/// non-finite values first and throws NumericError naming the layer without
/// touching any parameter.
void adam_step(AdamState& state, NetworkState& net, const Gradients& grads, double lr);

// ---- schedule ----

struct Schedule {
  enum class Kind { constant, step_at, multiply_every };
  Kind kind = Kind::constant;
  double initial = 1e-3;
  std::size_t epoch = 0;  // step_at: switch epoch; multiply_every: period k
  double value = 1.0;     // step_at: new rate; multiply_every: factor

  static Schedule constant(double lr);
  /// `lr` for epochs [0, epoch), `new_lr` afterwards (epochs are 0-based).
  static Schedule step_at(double lr, std::size_t epoch, double new_lr);
  /// lr * factor^floor(epoch / every).
  static Schedule multiply_every(double lr, std::size_t every, double factor);

  double lr_at(std::size_t epoch) const;
};

// ---- gradient transforms and constraints ----

/// Elementwise sign of every gradient tensor (weights and biases).
void batch_manhattan(Gradients& grads);

/// Adds N(0, scale^2 * Var(g)) per weight-gradient tensor, Var being the
/// empirical variance of that layer's current weight gradient.
void add_gradient_noise(Gradients& grads, const NetworkState& net, Rng& rng, double scale);

struct AlignmentPenalty {
  double lambda = 0.001;
  std::vector<Tensor> targets;  // per layer index, fixed after creation
};

/// Targets drawn from the forward initializer of `scheme`.
AlignmentPenalty make_alignment_penalty(const NetworkState& net, InitScheme scheme, double lambda, Rng& rng);
double alignment_penalty_loss(const NetworkState& net, const AlignmentPenalty& penalty);
/// Adds 2*lambda*(w - v) to each weight gradient.
void alignment_penalty_grad(Gradients& grads, const NetworkState& net, const AlignmentPenalty& penalty);

/// Adds lambda * w to each weight gradient.
void add_weight_decay(Gradients& grads, const NetworkState& net, double lambda);

/// Per-layer ||w||_2 of every trainable layer, indexed by layer.
std::vector<double> weight_norms(const NetworkState& net);

/// Rescales each layer's weights back to `initial_norms[layer]`. Layers whose
/// current norm is zero are left unchanged; their indices are returned.
std::vector<std::size_t> apply_norm_constraint(NetworkState& net, const std::vector<double>& initial_norms);

struct EiFreeze {
  std::uint64_t freeze_step = 0;  // signs recorded once this many steps have completed
  double clip = 1e-8;
  bool frozen = false;
  std::vector<Tensor> frozen_sign;  // per layer index

  /// ceil(0.05 * total_steps), at least 1.
  static EiFreeze at_fraction(std::uint64_t total_steps, double fraction = 0.05);
};

/// `completed_steps` counts optimizer steps including the one just taken.
/// Before the freeze step: no-op. At it: records sign(w). After it: weights
/// disagreeing with their frozen sign become frozen_sign * clip.
void apply_ei_freeze(NetworkState& net, EiFreeze& freeze, std::uint64_t completed_steps);

struct ConstraintSet {
  std::optional<EiFreeze> ei_freeze;
  std::optional<std::vector<double>> initial_norms;
  std::optional<AlignmentPenalty> alignment_penalty;
  std::optional<double> grad_noise;
  bool batch_manhattan = false;
  std::optional<double> weight_decay;
};

// ---- training loop ----

enum class Stage {
  forward,
  loss,
  backward,
  gradient_noise,
  batch_manhattan,
  alignment_penalty,
  weight_decay,
  optimizer,
  norm_constraint,
  ei_clamp,
  usf_refresh,
  metrics,
};
std::string_view to_string(Stage stage);

/// Called after each pipeline stage that runs (disabled stages are skipped).
using StageHook = std::function<void(Stage)>;

struct TrainingSession {
  NetworkState net;
  FeedbackState feedback;
  AdamState adam;
  ConstraintSet constraints;
  Schedule schedule;
  SignFlipTracker sign_flips;

  Rng data_rng{0};     // shuffling and crops
  Rng dropout_rng{0};
  Rng noise_rng{0};
  Rng probe_rng{0};    // noise used when measuring angles

  std::uint64_t step = 0;   // completed optimizer steps
  std::uint64_t epoch = 0;  // completed epochs

  // Running train loss between periodic loss rows.
  double loss_window_sum = 0.0;
  std::uint64_t loss_window_count = 0;

  StageHook hook;
};

struct StepResult {
  double loss = 0.0;  // cross-entropy (plus penalty when enabled)
  std::size_t errors = 0;
  std::size_t examples = 0;
};

/// One full pipeline pass on a batch: forward, loss, strategy backward,
/// noise, Batch Manhattan, penalty, weight decay, Adam, norm projection,
/// E/I clamp, uSF refresh, sign-flip bookkeeping.
StepResult train_step(TrainingSession& session, const Batch& batch, double lr);

struct Evaluation {
  double loss = 0.0;
  double error_pct = 0.0;
};

/// Eval-mode pass over a dataset (center crop when `crop` is set).
Evaluation evaluate(NetworkState& net, const Dataset& data, std::size_t batch_size,
                    std::optional<CropSpec> crop = std::nullopt);

struct EpochContext {
  const Dataset* test = nullptr;  // evaluated at epoch end when set
  std::optional<CropSpec> crop;
  std::size_t eval_batch_size = 500;
  const Batch* probe = nullptr;   // angles measured when set
  std::size_t loss_every = 100;   // steps between train-loss rows
  bool wall_time = true;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

/// Epoch-level summary (the last row block of the epoch).
struct MetricsRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double lr = 0.0;
  std::optional<double> train_loss;
  std::optional<double> train_err;
  std::optional<double> test_err;
  std::vector<AngleRow> angles;
  SignFlipTracker::Fractions sign_flips;
};

/// Angle modifier matching the session's gradient transforms (noise from
/// probe_rng, Batch Manhattan, alignment penalty).
GradientModifier angle_modifier(TrainingSession& session);

/// Rows describing the current state (angles, norms, sign flips, test error)
/// without training. Used for the epoch-0 baseline and at every epoch end.
MetricsRecord emit_epoch_rows(TrainingSession& session, const EpochContext& ctx, MetricsSink* sink,
                              std::optional<double> train_loss, std::optional<double> train_err);

/// Trains one epoch over `stream`, then emits epoch-end rows.
MetricsRecord train_epoch(TrainingSession& session, BatchStream& stream, const EpochContext& ctx, MetricsSink* sink);

}  // namespace fbalign
