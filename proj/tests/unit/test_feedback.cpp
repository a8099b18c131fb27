#include <doctest.h>

#include <cmath>
#include <cstring>

#include "../support.hpp"
#include "fbalign/feedback.hpp"

using namespace fbalign;
using namespace fbalign::testing;

namespace {

NetworkSpec small_conv_net() {
  NetworkSpec s{"small", {2, 8, 8}, 4, {}};
  s.layers = {LayerSpec::conv_same(4, 3), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv_same(6, 3, 2), LayerSpec::relu(), LayerSpec::dense(12),
              LayerSpec::relu(), LayerSpec::dense(4), LayerSpec::softmax_xent()};
  return s;
}

struct Fixture {
  NetworkState net;
  Tensor batch;
  std::vector<int> labels;
  Tensor delta;
};

Fixture forward_fixture(const NetworkSpec& spec, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  Fixture f{build(spec, InitScheme::fa_decoupled, rng), {}, {}, {}};
  Shape shape{batch};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  f.batch = fill_gaussian(rng, shape, 1.0);
  f.labels = random_labels(rng, batch, spec.classes);
  f.delta = loss_and_output_delta(forward(f.net, f.batch, Mode::train, rng), f.labels).delta;
  return f;
}

std::uint64_t hash_tensor(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ull;
  for (float v : t.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = (h ^ bits) * 1099511628211ull;
  }
  return h;
}

}  // namespace

TEST_CASE("strategy names round-trip") {
  for (const auto& name : strategy_names()) CHECK(to_string(parse_strategy(name)) == name);
  CHECK_THROWS(parse_strategy("kp"));
}

TEST_CASE("bp holds no feedback tensors") {
  auto f = forward_fixture(small_conv_net(), 2, 1);
  Rng rng(2);
  const FeedbackState fb = init_feedback(f.net, Strategy::bp, InitScheme::fa_decoupled, rng);
  CHECK(fb.feedback.empty());
  CHECK(fb.projections.empty());
  CHECK_THROWS(fb.feedback_for(0));
}

TEST_CASE("fa feedback has the decoupled variance and is seed-deterministic") {
  Rng rng(3);
  NetworkSpec big{"w", {500}, 2000, {LayerSpec::dense(2000), LayerSpec::softmax_xent()}};
  const NetworkState net = build(big, InitScheme::fa_decoupled, rng);
  Rng a(4), b(4);
  const FeedbackState fa = init_feedback(net, Strategy::fa, InitScheme::fa_decoupled, a);
  const FeedbackState fb = init_feedback(net, Strategy::fa, InitScheme::fa_decoupled, b);
  CHECK(std::abs(variance(fa.feedback[0]) * 2000.0 - 1.0) < 0.02);
  CHECK(fa.feedback[0] == fb.feedback[0]);
  CHECK(fa.feedback[0].shape() == net.layer(0).weights.shape());
  CHECK(init_variances(InitScheme::fa_decoupled, {100, 200}).feedback == doctest::Approx(1.0 / 200));
}

TEST_CASE("usf_init keeps initial magnitudes with the forward signs") {
  Rng rng(5);
  NetworkState net = build(dense_stack(1, {}, 2), InitScheme::fa_decoupled, rng);
  FeedbackState fb = init_feedback(net, Strategy::usf_init, InitScheme::fa_decoupled, rng);
  fb.initial_magnitude[0] = Tensor(Shape{2, 1}, {0.5f, 0.3f});
  net.mutable_weights(0) = Tensor(Shape{2, 1}, {-1.0f, 2.0f});
  refresh_usf(fb, net);
  CHECK(fb.feedback[0].values() == std::vector<float>{-0.5f, 0.3f});
  net.mutable_weights(0) = Tensor(Shape{2, 1}, {0.0f, -7.0f});
  refresh_usf(fb, net);
  CHECK(fb.feedback[0].values() == std::vector<float>{0.0f, -0.3f});
}

TEST_CASE("usf_sn scales the sign pattern to the weight norm") {
  Rng rng(6);
  NetworkState net = build(dense_stack(1, {}, 2), InitScheme::fa_decoupled, rng);
  FeedbackState fb = init_feedback(net, Strategy::usf_sn, InitScheme::fa_decoupled, rng);
  net.mutable_weights(0) = Tensor(Shape{2, 1}, {3.0f, -4.0f});
  refresh_usf(fb, net);
  CHECK(fb.feedback[0][0] == doctest::Approx(3.5355339).epsilon(1e-6));
  CHECK(fb.feedback[0][1] == doctest::Approx(-3.5355339).epsilon(1e-6));
  net.mutable_weights(0).fill(0.0f);
  refresh_usf(fb, net);
  CHECK(l2_norm(fb.feedback[0]) == 0.0);

  const auto f = forward_fixture(small_conv_net(), 1, 7);
  Rng r2(8);
  const FeedbackState sn = init_feedback(f.net, Strategy::usf_sn, InitScheme::fa_decoupled, r2);
  for (auto i : f.net.trainable()) {
    CHECK(std::abs(l2_norm(sn.feedback[i]) / l2_norm(f.net.layer(i).weights) - 1.0) < 1e-5);
    CHECK(sign(sn.feedback[i]) == sign(f.net.layer(i).weights));
  }
}

TEST_CASE("mirrored feedback reproduces backprop for the MNIST and CIFAR-10 architectures") {
  for (const auto& spec : {mnist_model(), cifar10_model1(), cifar10_model2(), small_conv_net()}) {
    CAPTURE(spec.name);
    auto f = forward_fixture(spec, 2, 9);
    Rng rng(10);
    FeedbackState fb = init_feedback(f.net, Strategy::fa, InitScheme::fa_decoupled, rng);
    mirror_forward_weights(fb, f.net);
    const Gradients fa = backward(f.net, fb, f.delta);
    const Gradients bp = backward_bp(f.net, f.delta);
    for (auto i : f.net.trainable()) {
      CHECK(relative_error(fa.layers[i].weights, bp.layers[i].weights) <= 1e-6);
      CHECK(relative_error(fa.layers[i].bias, bp.layers[i].bias) <= 1e-6);
    }
  }
}

TEST_CASE("fa feedback never changes during backward") {
  auto f = forward_fixture(small_conv_net(), 3, 11);
  Rng rng(12);
  const FeedbackState fb = init_feedback(f.net, Strategy::fa, InitScheme::fa_decoupled, rng);
  std::vector<std::uint64_t> before;
  for (auto i : f.net.trainable()) before.push_back(hash_tensor(fb.feedback[i]));
  for (int k = 0; k < 3; ++k) backward(f.net, fb, f.delta);
  std::vector<std::uint64_t> after;
  for (auto i : f.net.trainable()) after.push_back(hash_tensor(fb.feedback[i]));
  CHECK(before == after);
}

TEST_CASE("top layer gradient is exact for every strategy") {
  auto f = forward_fixture(small_conv_net(), 3, 13);
  const Gradients bp = backward_bp(f.net, f.delta);
  const std::size_t top = f.net.top_trainable();
  for (auto s : {Strategy::fa, Strategy::usf_init, Strategy::usf_sn, Strategy::dfa, Strategy::dense_fa}) {
    Rng rng(14);
    const FeedbackState fb = init_feedback(f.net, s, InitScheme::fa_decoupled, rng);
    CHECK(backward(f.net, fb, f.delta).layers[top].weights == bp.layers[top].weights);
  }
}

TEST_CASE("dfa hidden errors depend only on the output error and local gates") {
  const NetworkSpec spec = dense_stack(6, {5, 4, 3}, 3);
  auto f = forward_fixture(spec, 4, 15);
  Rng rng(16);
  const FeedbackState fb = init_feedback(f.net, Strategy::dfa, InitScheme::fa_decoupled, rng);
  CHECK(fb.projections.size() == 3);
  for (const auto& p : fb.projections) CHECK_FALSE(p.source.has_value());
  const Gradients g = backward(f.net, fb, f.delta);

  // Manual: delta_l = relu'(a_l) * (e B_l^T), with B_l of shape [units, classes].
  for (const auto& p : fb.projections) {
    const LayerState& above = f.net.layer(p.target + 1);  // the relu reading this layer's output
    Tensor expected = matmul_transposed(f.delta, p.matrix);
    expected = relu_grad(above.input, expected);
    CHECK(relative_error(g.deltas[p.target], expected) < 1e-6);
  }
  // With the output error held fixed, upper weights do not reach the bottom layer's error.
  NetworkState other = f.net;
  for (auto& w : other.mutable_weights(2).data()) w *= -3.0f;
  Rng r(0);
  forward(other, f.batch, Mode::eval, r);
  CHECK(backward(other, fb, f.delta).deltas[0] == g.deltas[0]);
  CHECK_FALSE(backward_bp(other, f.delta).deltas[0] == backward_bp(f.net, f.delta).deltas[0]);
}

TEST_CASE("dense_fa sums projections from every downstream error") {
  const NetworkSpec spec = dense_stack(5, {4, 3}, 2);
  auto f = forward_fixture(spec, 3, 17);
  Rng rng(18);
  const FeedbackState fb = init_feedback(f.net, Strategy::dense_fa, InitScheme::fa_decoupled, rng);
  // trainable layers 0, 2, 4; projections 0<-2, 0<-4, 2<-4
  CHECK(fb.projections.size() == 3);
  const Gradients g = backward(f.net, fb, f.delta);
  auto projection = [&](std::size_t target, std::size_t source) -> const Tensor& {
    for (const auto& p : fb.projections) {
      if (p.target == target && p.source == source) return p.matrix;
    }
    FAIL("missing projection");
    throw;
  };
  const Tensor e4 = f.delta;
  const Tensor d2 = relu_grad(f.net.layer(3).input, matmul_transposed(e4, projection(2, 4)));
  CHECK(relative_error(g.deltas[2], d2) < 1e-6);
  const Tensor d0 = relu_grad(f.net.layer(1).input,
                              add(matmul_transposed(d2, projection(0, 2)), matmul_transposed(e4, projection(0, 4))));
  CHECK(relative_error(g.deltas[0], d0) < 1e-6);
  const auto expected = dense_weight_grad(f.net.layer(0).input, d0);
  CHECK(relative_error(g.layers[0].weights, expected.weights) < 1e-6);
}

TEST_CASE("projection memory cap refuses oversized dense feedback") {
  Rng rng(19);
  const NetworkState net = build(mnist_model(), InitScheme::fa_decoupled, rng);
  CHECK(projection_memory_bytes(net, Strategy::fa) == 0);
  const std::size_t need = projection_memory_bytes(net, Strategy::dense_fa);
  CHECK(need > projection_memory_bytes(net, Strategy::dfa));
  FeedbackOptions tight;
  tight.projection_memory_cap_bytes = need - 1;
  try {
    init_feedback(net, Strategy::dense_fa, InitScheme::fa_decoupled, rng, tight);
    FAIL("expected refusal");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("conv1 <- conv2") != std::string::npos);
  }
}

TEST_CASE("fa hidden-layer gradients start near orthogonal to backprop") {
  const NetworkSpec spec = dense_stack(256, {256, 256, 256}, 10);
  double total = 0.0;
  std::size_t count = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto f = forward_fixture(spec, 32, 100 + seed);
    Rng rng(200 + seed);
    const FeedbackState fb = init_feedback(f.net, Strategy::fa, InitScheme::fa_decoupled, rng);
    for (const auto& a : alignment_angles(f.net, fb, f.delta)) {
      if (a.layer == f.net.top_trainable()) continue;
      REQUIRE(a.degrees.has_value());
      total += *a.degrees;
      ++count;
    }
  }
  const double mean = total / static_cast<double>(count);
  CHECK(mean >= 80.0);
  CHECK(mean <= 100.0);
}

TEST_CASE("backward without a forward cache is an error") {
  Rng rng(20);
  NetworkState net = build(small_conv_net(), InitScheme::fa_decoupled, rng);
  const FeedbackState fb = init_feedback(net, Strategy::fa, InitScheme::fa_decoupled, rng);
  CHECK_THROWS(backward(net, fb, Tensor(Shape{1, 4})));
  auto f = forward_fixture(small_conv_net(), 2, 21);
  CHECK_THROWS_AS(backward(f.net, fb, Tensor(Shape{3, 4})), ShapeError);
}
