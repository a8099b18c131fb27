#include <doctest.h>

#include <cmath>

#include "../support.hpp"
#include "fbalign/config.hpp"
#include "fbalign/diagnostics.hpp"
#include "fbalign/experiment.hpp"

using namespace fbalign;
using namespace fbalign::testing;

namespace {

struct Probe {
  Tensor batch;
  std::vector<int> labels;
};

Probe random_probe(const NetworkSpec& spec, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Shape shape{n};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  return {fill_gaussian(rng, shape, 1.0), random_labels(rng, n, spec.classes)};
}

// Mean angle per trainable layer over the last epoch of a synthetic run.
std::map<std::string, double> final_angles(const nlohmann::json& j) {
  RunOptions o;
  o.write_files = false;
  const RunSummary s = run_training(parse_config(j), o);
  std::map<std::string, double> out;
  for (const auto& [name, series] : s.angles_by_layer) {
    REQUIRE(series.back().has_value());
    out[name] = *series.back();
  }
  return out;
}

nlohmann::json dense_run(const std::vector<std::size_t>& hidden, std::size_t epochs, double lr) {
  nlohmann::json layers = nlohmann::json::array();
  for (auto h : hidden) {
    layers.push_back({{"kind", "dense"}, {"units", h}});
    layers.push_back({{"kind", "relu"}});
  }
  layers.push_back({{"kind", "dense"}, {"units", 10}});
  layers.push_back({{"kind", "softmax_xent"}});
  auto j = toy_config_json("fa", true);
  j["network"] = {{"name", "stack"}, {"input_shape", {64}}, {"classes", 10}, {"layers", layers}};
  j["dataset"]["synthetic"] = {{"shape", {64}}, {"classes", 10}, {"train", 1000}, {"test", 200}, {"noise", 3.0}, {"seed", 2}};
  j["epochs"] = epochs;
  j["batch_size"] = 50;
  j["schedule"] = {{"kind", "constant"}, {"lr", lr}};
  j["metrics"] = {{"loss_every", 100}, {"probe_size", 200}, {"wall_time", false}};
  return j;
}

}  // namespace

TEST_CASE("sign flips count once, permanently, on a nonzero sign change") {
  Rng rng(1);
  NetworkState net = build(dense_stack(3, {4}, 2), InitScheme::glorot, rng);
  SignFlipTracker t(net);
  CHECK(t.update(net).global == 0.0);

  for (auto i : net.trainable()) {
    for (auto& w : net.mutable_weights(i).data()) w = -w;
  }
  CHECK(t.update(net).global == 1.0);
  for (auto i : net.trainable()) {
    for (auto& w : net.mutable_weights(i).data()) w = -w;
  }
  const auto back = t.update(net);
  CHECK(back.global == 1.0);
  for (double f : back.per_layer) CHECK(f == 1.0);

  NetworkState z = build(dense_stack(1, {}, 2), InitScheme::glorot, rng);
  z.mutable_weights(0) = Tensor(Shape{2, 1}, {0.5f, -0.5f});
  SignFlipTracker tz(z);
  z.mutable_weights(0) = Tensor(Shape{2, 1}, {0.0f, -0.5f});
  CHECK(tz.update(z).global == 0.0);  // passing through zero is not a flip
  z.mutable_weights(0) = Tensor(Shape{2, 1}, {-0.1f, -0.5f});
  CHECK(tz.update(z).global == 0.5);
}

TEST_CASE("mirrored feedback gives a measured ratio of one at every layer") {
  Rng rng(2);
  NetworkState net = build(cifar10_model1(), InitScheme::fa_decoupled, rng);
  FeedbackState fb = init_feedback(net, Strategy::fa, InitScheme::fa_decoupled, rng);
  mirror_forward_weights(fb, net);
  const Probe p = random_probe(net.spec(), 4, 3);
  for (const auto& row : gradient_ratio_profile(net, fb, p.batch, p.labels).rows) {
    CAPTURE(row.name);
    CHECK(std::abs(row.measured_ratio - 1.0) <= 1e-5);
    CHECK(std::abs(row.norm_ratio - 1.0) <= 1e-6);
  }
}

TEST_CASE("cumulative norm-ratio product matches the measured ratio") {
  const std::vector<std::size_t> hidden(10, 32);
  Rng rng(4);
  NetworkState net = build(dense_stack(32, hidden, 10), InitScheme::fa_decoupled, rng);
  FeedbackState fb = init_feedback(net, Strategy::fa, InitScheme::fa_decoupled, rng);
  for (auto i : net.trainable()) fb.set_feedback(i, scale(net.layer(i).weights, 1.0 / 1.1));
  const Probe p = random_probe(net.spec(), 16, 5);
  const auto rows = gradient_ratio_profile(net, fb, p.batch, p.labels).rows;
  REQUIRE(rows.size() == 11);
  CHECK(rows.front().cumulative_product == doctest::Approx(2.5937424601).epsilon(1e-5));
  CHECK(rows.back().cumulative_product == 1.0);
  for (const auto& row : rows) {
    CHECK(row.norm_ratio == doctest::Approx(1.1).epsilon(1e-5));
    CHECK(row.measured_ratio * row.cumulative_product == doctest::Approx(1.0).epsilon(1e-4));
  }
  CHECK_THROWS(gradient_ratio_profile(net, FeedbackState{}, p.batch, p.labels));
}

TEST_CASE("backprop compared with itself gives zero angles") {
  Rng rng(6);
  NetworkState net = build(mnist_model(), InitScheme::fa_decoupled, rng);
  const FeedbackState fb = init_feedback(net, Strategy::bp, InitScheme::fa_decoupled, rng);
  const Probe p = random_probe(net.spec(), 3, 7);
  for (const auto& row : record_angles(net, fb, p.batch, p.labels, 0)) {
    REQUIRE(row.degrees.has_value());
    CHECK(*row.degrees < 1e-3);
  }
}

TEST_CASE("angle rows stay within [0, 180] and honour the modifier") {
  Rng rng(8);
  NetworkState net = build(dense_stack(8, {8, 8}, 3), InitScheme::fa_decoupled, rng);
  const FeedbackState fb = init_feedback(net, Strategy::fa, InitScheme::fa_decoupled, rng);
  const Probe p = random_probe(net.spec(), 8, 9);
  for (const auto& row : record_angles(net, fb, p.batch, p.labels, 3)) {
    CHECK(row.epoch == 3);
    if (row.degrees) {
      CHECK(*row.degrees >= 0.0);
      CHECK(*row.degrees <= 180.0);
    }
  }
  // Negating the candidate gradient sends every angle to 180 - angle.
  const auto plain = record_angles(net, fb, p.batch, p.labels, 0);
  const auto flipped = record_angles(net, fb, p.batch, p.labels, 0, [](Gradients& g) {
    for (auto& l : g.layers) {
      if (!l.weights.empty()) l.weights = scale(l.weights, -1.0);
    }
  });
  for (std::size_t k = 0; k < plain.size(); ++k) {
    CHECK(*flipped[k].degrees == doctest::Approx(180.0 - *plain[k].degrees).epsilon(1e-4));
  }
}

TEST_CASE("shallow feedback alignment brings the top hidden layer below 70 degrees") {
  const auto angles = final_angles(dense_run({128, 128}, 40, 1e-3));
  CHECK(angles.at("dense3") == 0.0);
  CHECK(angles.at("dense2") < 70.0);
}

TEST_CASE("deep feedback alignment leaves the convolutional layers nearer 90 degrees") {
  nlohmann::json layers = nlohmann::json::array();
  for (int k = 0; k < 2; ++k) {
    layers.push_back({{"kind", "conv"}, {"units", 8}, {"kernel", 3}});
    layers.push_back({{"kind", "relu"}});
    layers.push_back({{"kind", "maxpool"}});
  }
  for (int k = 0; k < 2; ++k) {
    layers.push_back({{"kind", "dense"}, {"units", 32}});
    layers.push_back({{"kind", "relu"}});
  }
  layers.push_back({{"kind", "dense"}, {"units", 10}});
  layers.push_back({{"kind", "softmax_xent"}});
  auto j = toy_config_json("fa");
  j["network"] = {{"name", "deep"}, {"input_shape", {1, 12, 12}}, {"classes", 10}, {"layers", layers}};
  j["dataset"]["synthetic"] = {{"shape", {1, 12, 12}}, {"classes", 10}, {"train", 1000}, {"test", 200}, {"noise", 0.5}, {"seed", 3}};
  j["epochs"] = 20;
  j["batch_size"] = 50;
  j["metrics"] = {{"loss_every", 100}, {"probe_size", 200}, {"wall_time", false}};
  // Single runs are noisy, so compare distances from 90 degrees averaged over seeds.
  double lower = 0.0, upper = 0.0;
  for (int seed = 1; seed <= 5; ++seed) {
    j["seed"] = seed;
    const auto angles = final_angles(j);
    lower += std::abs(angles.at("conv1") - 90.0) + std::abs(angles.at("conv2") - 90.0);
    upper += std::abs(angles.at("dense3") - 90.0) + std::abs(angles.at("dense4") - 90.0);
  }
  CHECK(lower < upper);
}

TEST_CASE("unconstrained training keeps flipping signs") {
  auto j = dense_run({64}, 6, 1e-3);
  j["strategy"] = "bp";
  RunOptions o;
  o.write_files = false;
  const RunSummary s = run_training(parse_config(j), o);
  REQUIRE(s.signflip_by_epoch.size() == 7);
  CHECK(s.signflip_by_epoch[0] == 0.0);
  for (std::size_t e = 1; e < s.signflip_by_epoch.size(); ++e) CHECK(s.signflip_by_epoch[e] > s.signflip_by_epoch[e - 1]);
}
