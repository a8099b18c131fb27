#include "fbalign/training.hpp"

#include <array>
#include <cmath>
#include <sstream>

namespace fbalign {

namespace {

void notify(const TrainingSession& s, Stage stage) {
  if (s.hook) s.hook(stage);
}

std::string norm_dump(const NetworkState& net, double lr) {
  std::ostringstream os;
  os << "last lr " << lr << "; weight norms:";
  for (auto i : net.trainable()) os << " " << net.layer(i).name << "=" << l2_norm(net.layer(i).weights);
  return os.str();
}

}  // namespace

// ---- optimizer ----

AdamState AdamState::for_network(const NetworkState& net, AdamConfig config) {
  AdamState s;
  s.config = config;
  s.moments.resize(net.layer_count());
  for (auto i : net.trainable()) {
    const LayerState& l = net.layer(i);
    s.moments[i] = {Tensor(l.weights.shape()), Tensor(l.weights.shape()), Tensor(l.bias.shape()),
                    Tensor(l.bias.shape())};
  }
  return s;
}

void adam_update(Tensor& param, Tensor& m, Tensor& v, const Tensor& grad, double lr, std::uint64_t t,
                 const AdamConfig& c) {
  require_same_shape(param.shape(), grad.shape(), "adam_update");
  require_same_shape(param.shape(), m.shape(), "adam_update moments");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    param[i] = static_cast<float>(param[i] - lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.epsilon));
  }
}

void adam_step(AdamState& state, NetworkState& net, const Gradients& grads, double lr) {
  for (auto i : net.trainable()) {
    const auto& g = grads.layers.at(i);
    if (!g.weights.all_finite() || !g.bias.all_finite()) {
      throw NumericError("non-finite gradient in layer " + net.layer(i).name);
    }
  }
  ++state.t;
  for (auto i : net.trainable()) {
    AdamMoments& mo = state.moments.at(i);
    adam_update(net.mutable_weights(i), mo.m_weights, mo.v_weights, grads.layers[i].weights, lr, state.t, state.config);
    adam_update(net.mutable_bias(i), mo.m_bias, mo.v_bias, grads.layers[i].bias, lr, state.t, state.config);
  }
}

// ---- schedule ----

Schedule Schedule::constant(double lr) { return {Kind::constant, lr, 0, 1.0}; }
Schedule Schedule::step_at(double lr, std::size_t epoch, double new_lr) { return {Kind::step_at, lr, epoch, new_lr}; }
Schedule Schedule::multiply_every(double lr, std::size_t every, double factor) {
  if (every == 0) throw Error("multiply_every period must be positive");
  return {Kind::multiply_every, lr, every, factor};
}

double Schedule::lr_at(std::size_t e) const {
  switch (kind) {
    case Kind::constant:
      return initial;
    case Kind::step_at:
      return e < epoch ? initial : value;
    case Kind::multiply_every:
      return initial * std::pow(value, static_cast<double>(e / epoch));
  }
  return initial;
}

// ---- gradient transforms and constraints ----

void batch_manhattan(Gradients& grads) {
  for (auto& g : grads.layers) {
    if (!g.weights.empty()) g.weights = sign(g.weights);
    if (!g.bias.empty()) g.bias = sign(g.bias);
  }
}

void add_gradient_noise(Gradients& grads, const NetworkState& net, Rng& rng, double scale) {
  if (scale == 0.0) return;
  for (auto i : net.trainable()) {
    Tensor& g = grads.layers.at(i).weights;
    const double sd = scale * std::sqrt(variance(g));
    for (auto& x : g.data()) x = static_cast<float>(x + sd * rng.normal());
  }
}

AlignmentPenalty make_alignment_penalty(const NetworkState& net, InitScheme scheme, double lambda, Rng& rng) {
  AlignmentPenalty p;
  p.lambda = lambda;
  p.targets.resize(net.layer_count());
  for (auto i : net.trainable()) {
    const LayerState& l = net.layer(i);
    p.targets[i] = fill_gaussian(rng, l.weights.shape(), init_variances(scheme, l.fan).forward);
  }
  return p;
}

double alignment_penalty_loss(const NetworkState& net, const AlignmentPenalty& p) {
  double total = 0.0;
  for (auto i : net.trainable()) {
    const Tensor& w = net.layer(i).weights;
    const Tensor& v = p.targets.at(i);
    require_same_shape(w.shape(), v.shape(), "alignment penalty");
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double d = static_cast<double>(w[k]) - v[k];
      total += d * d;
    }
  }
  return p.lambda * total;
}

void alignment_penalty_grad(Gradients& grads, const NetworkState& net, const AlignmentPenalty& p) {
  for (auto i : net.trainable()) {
    const Tensor& w = net.layer(i).weights;
    const Tensor& v = p.targets.at(i);
    Tensor& g = grads.layers.at(i).weights;
    for (std::size_t k = 0; k < w.size(); ++k) {
      g[k] = static_cast<float>(g[k] + 2.0 * p.lambda * (static_cast<double>(w[k]) - v[k]));
    }
  }
}

void add_weight_decay(Gradients& grads, const NetworkState& net, double lambda) {
  for (auto i : net.trainable()) add_inplace(grads.layers.at(i).weights, net.layer(i).weights, lambda);
}

std::vector<double> weight_norms(const NetworkState& net) {
  std::vector<double> norms(net.layer_count(), 0.0);
  for (auto i : net.trainable()) norms[i] = l2_norm(net.layer(i).weights);
  return norms;
}

std::vector<std::size_t> apply_norm_constraint(NetworkState& net, const std::vector<double>& initial_norms) {
  std::vector<std::size_t> skipped;
  for (auto i : net.trainable()) {
    const double current = l2_norm(net.layer(i).weights);
    if (current == 0.0) {
      skipped.push_back(i);
      continue;
    }
    const double factor = initial_norms.at(i) / current;
    for (auto& x : net.mutable_weights(i).data()) x = static_cast<float>(x * factor);
  }
  return skipped;
}

EiFreeze EiFreeze::at_fraction(std::uint64_t total_steps, double fraction) {
  EiFreeze f;
  f.freeze_step = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::ceil(fraction * total_steps - 1e-9)));
  return f;
}

void apply_ei_freeze(NetworkState& net, EiFreeze& f, std::uint64_t completed_steps) {
  if (completed_steps < f.freeze_step) return;
  if (!f.frozen) {
    f.frozen_sign.assign(net.layer_count(), Tensor());
    for (auto i : net.trainable()) f.frozen_sign[i] = sign(net.layer(i).weights);
    f.frozen = true;
    return;
  }
  const float clip = static_cast<float>(f.clip);
  for (auto i : net.trainable()) {
    const Tensor& s = f.frozen_sign.at(i);
    Tensor& w = net.mutable_weights(i);
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (s[k] == 0.0f) {
        w[k] = 0.0f;
      } else if ((s[k] > 0.0f && w[k] <= 0.0f) || (s[k] < 0.0f && w[k] >= 0.0f)) {
        w[k] = s[k] * clip;
      }
    }
  }
}

// ---- training loop ----

std::string_view to_string(Stage stage) {
  static constexpr std::array<std::string_view, 12> names{
      "forward",         "loss",      "backward",        "gradient_noise", "batch_manhattan", "alignment_penalty",
      "weight_decay",    "optimizer", "norm_constraint", "ei_clamp",       "usf_refresh",     "metrics"};
  return names.at(static_cast<std::size_t>(stage));
}

StepResult train_step(TrainingSession& s, const Batch& batch, double lr) {
  const Tensor logits = forward(s.net, batch.images, Mode::train, s.dropout_rng);
  notify(s, Stage::forward);

  const LossResult loss = loss_and_output_delta(logits, batch.labels);
  StepResult result{loss.loss, loss.errors, batch.labels.size()};
  if (s.constraints.alignment_penalty) result.loss += alignment_penalty_loss(s.net, *s.constraints.alignment_penalty);
  if (!std::isfinite(result.loss)) {
    throw NumericError("non-finite loss at step " + std::to_string(s.step + 1) + "; " + norm_dump(s.net, lr));
  }
  notify(s, Stage::loss);

  Gradients grads = backward(s.net, s.feedback, loss.delta);
  notify(s, Stage::backward);

  const ConstraintSet& c = s.constraints;
  if (c.grad_noise) {
    add_gradient_noise(grads, s.net, s.noise_rng, *c.grad_noise);
    notify(s, Stage::gradient_noise);
  }
  if (c.batch_manhattan) {
    batch_manhattan(grads);
    notify(s, Stage::batch_manhattan);
  }
  if (c.alignment_penalty) {
    alignment_penalty_grad(grads, s.net, *c.alignment_penalty);
    notify(s, Stage::alignment_penalty);
  }
  if (c.weight_decay) {
    add_weight_decay(grads, s.net, *c.weight_decay);
    notify(s, Stage::weight_decay);
  }

  try {
    adam_step(s.adam, s.net, grads, lr);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(s.step + 1) + "; " + norm_dump(s.net, lr));
  }
  ++s.step;
  notify(s, Stage::optimizer);

  if (c.initial_norms) {
    apply_norm_constraint(s.net, *c.initial_norms);
    notify(s, Stage::norm_constraint);
  }
  if (s.constraints.ei_freeze) {
    apply_ei_freeze(s.net, *s.constraints.ei_freeze, s.step);
    notify(s, Stage::ei_clamp);
  }
  if (is_usf(s.feedback.strategy)) {
    refresh_usf(s.feedback, s.net);
    notify(s, Stage::usf_refresh);
  }
  s.sign_flips.update(s.net);
  notify(s, Stage::metrics);
  return result;
}

Evaluation evaluate(NetworkState& net, const Dataset& data, std::size_t batch_size, std::optional<CropSpec> crop) {
  BatchStream stream(data, batch_size, nullptr, crop, false);
  stream.start_epoch();
  Rng unused(0);
  Batch batch;
  double loss_sum = 0.0;
  std::size_t errors = 0;
  while (stream.next(batch)) {
    const LossResult r = loss_and_output_delta(forward(net, batch.images, Mode::eval, unused), batch.labels);
    loss_sum += r.loss * static_cast<double>(batch.labels.size());
    errors += r.errors;
  }
  const double n = static_cast<double>(data.size());
  return {loss_sum / n, 100.0 * static_cast<double>(errors) / n};
}

GradientModifier angle_modifier(TrainingSession& s) {
  const ConstraintSet& c = s.constraints;
  if (!c.grad_noise && !c.batch_manhattan && !c.alignment_penalty) return {};
  return [&s](Gradients& g) {
    const ConstraintSet& cs = s.constraints;
    if (cs.grad_noise) add_gradient_noise(g, s.net, s.probe_rng, *cs.grad_noise);
    if (cs.batch_manhattan) batch_manhattan(g);
    if (cs.alignment_penalty) alignment_penalty_grad(g, s.net, *cs.alignment_penalty);
  };
}

MetricsRecord emit_epoch_rows(TrainingSession& s, const EpochContext& ctx, MetricsSink* sink,
                              std::optional<double> train_loss, std::optional<double> train_err) {
  MetricsRecord rec;
  rec.step = s.step;
  rec.epoch = s.epoch;
  rec.lr = s.schedule.lr_at(s.epoch == 0 ? 0 : s.epoch - 1);
  rec.train_loss = train_loss;
  rec.train_err = train_err;
  if (ctx.test) rec.test_err = evaluate(s.net, *ctx.test, ctx.eval_batch_size, ctx.crop).error_pct;
  if (ctx.probe) {
    rec.angles = record_angles(s.net, s.feedback, ctx.probe->images, ctx.probe->labels, s.epoch, angle_modifier(s));
  }
  rec.sign_flips = s.sign_flips.fractions();
  if (!sink) return rec;

  const double wall = ctx.wall_time
                          ? std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count()
                          : 0.0;
  MetricsRow base;
  base.step = rec.step;
  base.epoch = rec.epoch;
  base.lr = rec.lr;
  base.train_loss = rec.train_loss;
  base.train_err = rec.train_err;
  base.test_err = rec.test_err;
  base.wall_s = wall;
  const auto& trainable = s.net.trainable();
  for (std::size_t k = 0; k < trainable.size(); ++k) {
    const std::size_t i = trainable[k];
    MetricsRow row = base;
    row.layer = s.net.layer(i).name;
    for (const AngleRow& a : rec.angles) {
      if (a.layer == i) row.angle_deg = a.degrees;
    }
    row.w_norm = l2_norm(s.net.layer(i).weights);
    if (uses_layer_feedback(s.feedback.strategy)) row.b_norm = l2_norm(s.feedback.feedback_for(i));
    if (k < rec.sign_flips.per_layer.size()) row.signflip_frac = rec.sign_flips.per_layer[k];
    sink->write(row);
  }
  MetricsRow all = base;
  all.layer = "all";
  all.signflip_frac = rec.sign_flips.global;
  sink->write(all);
  return rec;
}

MetricsRecord train_epoch(TrainingSession& s, BatchStream& stream, const EpochContext& ctx, MetricsSink* sink) {
  const double lr = s.schedule.lr_at(s.epoch);
  stream.start_epoch();
  Batch batch;
  double loss_sum = 0.0;
  std::size_t errors = 0, examples = 0;
  while (stream.next(batch)) {
    const StepResult r = train_step(s, batch, lr);
    loss_sum += r.loss * static_cast<double>(r.examples);
    errors += r.errors;
    examples += r.examples;
    s.loss_window_sum += r.loss;
    ++s.loss_window_count;
    if (ctx.loss_every && s.step % ctx.loss_every == 0) {
      if (sink) {
        MetricsRow row;
        row.step = s.step;
        row.epoch = s.epoch + 1;
        row.lr = lr;
        row.train_loss = s.loss_window_sum / static_cast<double>(s.loss_window_count);
        row.wall_s = ctx.wall_time
                         ? std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count()
                         : 0.0;
        sink->write(row);
      }
      s.loss_window_sum = 0.0;
      s.loss_window_count = 0;
    }
  }
  ++s.epoch;
  if (examples == 0) throw Error("training stream produced no batches");
  return emit_epoch_rows(s, ctx, sink, loss_sum / static_cast<double>(examples),
                         100.0 * static_cast<double>(errors) / static_cast<double>(examples));
}

}  // namespace fbalign
