#include "ganmpc/nn.hpp"

#include <doctest.h>

#include "oracles.hpp"

using namespace ganmpc;
using namespace ganmpc::nn;
using ganmpc::test::fd_gradient;
using ganmpc::test::max_rel_error;

namespace {

MatrixXd random_matrix(Rng& rng, long rows, long cols, double scale = 1.0) {
  MatrixXd m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = rng.uniform(-scale, scale);
  return m;
}

VectorXd random_vector(Rng& rng, long n, double scale = 1.0) {
  VectorXd v(n);
  for (long i = 0; i < n; ++i) v[i] = rng.uniform(-scale, scale);
  return v;
}

NetworkParams random_params(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkParams p = glorot_init(spec, seed);
  Rng rng(seed + 77);
  for (auto& b : p.b) b = random_vector(rng, b.size(), 0.3);
  return p;
}

}  // namespace

TEST_CASE("network spec validation") {
  CHECK_THROWS(NetworkSpec({4}, Activation::kRelu));
  CHECK_THROWS(NetworkSpec({4, 0, 2}, Activation::kRelu));
  CHECK_THROWS(NetworkSpec({4, -1}, Activation::kRelu));
  CHECK_THROWS(NetworkSpec({3, 4, 5, 2}, std::vector<Activation>{Activation::kRelu}));

  NetworkSpec spec({3, 5, 2}, Activation::kRelu);
  CHECK(spec.input_dim() == 3);
  CHECK(spec.output_dim() == 2);
  CHECK(spec.num_layers() == 2);
}

TEST_CASE("params shapes and flatten round trip") {
  NetworkSpec spec({3, 4, 2}, Activation::kTanh);
  NetworkParams p = glorot_init(spec, 5);
  CHECK(p.shapes_match(spec));
  CHECK(p.num_entries() == (3 * 4 + 4) + (4 * 2 + 2));

  VectorXd flat = p.flatten();
  CHECK(flat.size() == p.num_entries());
  NetworkParams q = NetworkParams::zeros(spec);
  q.unflatten(flat);
  for (size_t l = 0; l < p.w.size(); ++l) {
    CHECK(q.w[l] == p.w[l]);
    CHECK(q.b[l] == p.b[l]);
  }
}

TEST_CASE("glorot init is deterministic, bounded, and seed sensitive") {
  NetworkSpec spec({6, 8, 3}, Activation::kRelu);
  NetworkParams a = glorot_init(spec, 42);
  NetworkParams b = glorot_init(spec, 42);
  NetworkParams c = glorot_init(spec, 43);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.flatten() != c.flatten());

  for (size_t l = 0; l < a.w.size(); ++l) {
    double bound = std::sqrt(6.0 / (a.w[l].cols() + a.w[l].rows()));
    CHECK(a.w[l].cwiseAbs().maxCoeff() <= bound);
    CHECK(a.w[l].cwiseAbs().maxCoeff() > 0.1 * bound);
    CHECK(a.b[l].cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("forward matches a hand-computed network") {
  NetworkSpec spec({2, 2, 1}, Activation::kRelu);
  NetworkParams p = NetworkParams::zeros(spec);
  p.w[0] << 1.0, 2.0, -1.0, 0.5;
  p.b[0] << 0.1, -0.2;
  p.w[1] << 0.3, -0.4;
  p.b[1] << 0.05;

  VectorXd x(2);
  x << 1.0, -1.0;
  CHECK(forward(spec, p, x)[0] == doctest::Approx(0.05).epsilon(1e-12));
  x << 1.0, 1.0;
  // pre-activations (3.1, -0.7), relu keeps 3.1 only
  CHECK(forward(spec, p, x)[0] == doctest::Approx(0.3 * 3.1 + 0.05).epsilon(1e-12));
}

TEST_CASE("softplus output wraps the linear output") {
  NetworkSpec lin({3, 4, 2}, Activation::kTanh, OutputActivation::kIdentity);
  NetworkSpec soft({3, 4, 2}, Activation::kTanh, OutputActivation::kSoftplus);
  NetworkParams p = random_params(lin, 9);
  Rng rng(123);
  VectorXd x = random_vector(rng, 3);
  VectorXd a = forward(lin, p, x);
  VectorXd b = forward(soft, p, x);
  for (long i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(softplus(a[i])).epsilon(1e-12));
  CHECK(b.minCoeff() > 0.0);
}

TEST_CASE("batched forward equals per-sample forward") {
  NetworkSpec spec({4, 6, 5, 2}, Activation::kRelu);
  NetworkParams p = random_params(spec, 3);
  Rng rng(17);
  MatrixXd xs = random_matrix(rng, 4, 7);
  MatrixXd ys = forward_batch(spec, p, xs);
  for (int j = 0; j < 7; ++j) {
    VectorXd y = forward(spec, p, xs.col(j));
    CHECK((ys.col(j) - y).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("backward gradients match finite differences") {
  for (auto out : {OutputActivation::kIdentity, OutputActivation::kSoftplus}) {
    NetworkSpec spec({3, 5, 4, 2}, {Activation::kTanh, Activation::kRelu}, out);
    NetworkParams p = random_params(spec, 11);
    Rng rng(29);
    MatrixXd xs = random_matrix(rng, 3, 4);
    MatrixXd upstream = random_matrix(rng, 2, 4);

    auto loss_at = [&](const NetworkParams& params, const MatrixXd& inputs) {
      return (forward_batch(spec, params, inputs).array() * upstream.array()).sum();
    };

    BackwardResult res = backward(spec, p, xs, upstream);

    VectorXd fd_params = fd_gradient(
        [&](const VectorXd& flat) {
          NetworkParams q = p;
          q.unflatten(flat);
          return loss_at(q, xs);
        },
        p.flatten());
    CHECK(max_rel_error(res.param_grad.flatten(), fd_params) < 1e-6);

    VectorXd flat_x = Eigen::Map<const VectorXd>(xs.data(), xs.size());
    VectorXd fd_inputs = fd_gradient(
        [&](const VectorXd& flat) {
          MatrixXd inputs = Eigen::Map<const MatrixXd>(flat.data(), 3, 4);
          return loss_at(p, inputs);
        },
        flat_x);
    VectorXd got = Eigen::Map<const VectorXd>(res.input_grad.data(), res.input_grad.size());
    CHECK(max_rel_error(got, fd_inputs) < 1e-6);
  }
}

TEST_CASE("backward and backward_from_cache agree") {
  NetworkSpec spec({4, 8, 3}, Activation::kRelu);
  NetworkParams p = random_params(spec, 21);
  Rng rng(31);
  MatrixXd xs = random_matrix(rng, 4, 5);
  MatrixXd upstream = random_matrix(rng, 3, 5);

  ForwardCache cache;
  forward_cached(spec, p, xs, cache);
  BackwardResult a = backward(spec, p, xs, upstream);
  BackwardResult b = backward_from_cache(spec, p, cache, upstream);
  CHECK(a.param_grad.flatten() == b.param_grad.flatten());
  CHECK(a.input_grad == b.input_grad);
}

TEST_CASE("all-zero encoder emits the read-out bias") {
  RecurrentEncoderParams p = RecurrentEncoderParams::zeros(3, 6);
  std::vector<VectorXd> states(4, VectorXd::Ones(3));
  CHECK(encode_trajectory(p, states) == 0.0);
  p.readout_b = -1.25;
  CHECK(encode_trajectory(p, states) == -1.25);
}

TEST_CASE("encoder flatten round trip") {
  RecurrentEncoderParams p = RecurrentEncoderParams::glorot_init(3, 5, 7);
  VectorXd flat = p.flatten();
  CHECK(flat.size() == p.num_entries());
  RecurrentEncoderParams q = RecurrentEncoderParams::zeros(3, 5);
  q.unflatten(flat);
  CHECK(q.flatten() == flat);
  CHECK(q.readout_b == p.readout_b);
}

TEST_CASE("encoder gradients match finite differences") {
  const int input_dim = 3, hidden = 4, len = 5;
  RecurrentEncoderParams p = RecurrentEncoderParams::glorot_init(input_dim, hidden, 13);
  Rng rng(37);
  std::vector<VectorXd> states;
  for (int t = 0; t < len; ++t) states.push_back(random_vector(rng, input_dim));

  EncoderBackwardResult res = encode_backward(p, states);
  CHECK(res.logit == doctest::Approx(encode_trajectory(p, states)).epsilon(1e-14));

  VectorXd fd_params = fd_gradient(
      [&](const VectorXd& flat) {
        RecurrentEncoderParams q = RecurrentEncoderParams::zeros(input_dim, hidden);
        q.unflatten(flat);
        return encode_trajectory(q, states);
      },
      p.flatten());
  CHECK(max_rel_error(res.param_grad.flatten(), fd_params) < 1e-6);

  for (int t = 0; t < len; ++t) {
    VectorXd fd_state = fd_gradient(
        [&](const VectorXd& s) {
          auto modified = states;
          modified[t] = s;
          return encode_trajectory(p, modified);
        },
        states[t]);
    CHECK(max_rel_error(res.input_grad[t], fd_state) < 1e-6);
  }
}

TEST_CASE("encoder backward scales with upstream") {
  RecurrentEncoderParams p = RecurrentEncoderParams::glorot_init(2, 3, 99);
  std::vector<VectorXd> states(3, VectorXd::Constant(2, 0.4));
  EncoderBackwardResult one = encode_backward(p, states, 1.0);
  EncoderBackwardResult two = encode_backward(p, states, 2.0);
  CHECK((two.param_grad.flatten() - 2.0 * one.param_grad.flatten()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("adam first step moves by the learning rate") {
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  AdamState state(1, cfg);
  VectorXd p = VectorXd::Zero(1);
  VectorXd g = VectorXd::Ones(1);
  CHECK(adam_step(state, p, g));
  // bias-corrected first step is lr * g / (|g| + eps)
  CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-7));
  CHECK(state.step == 1);
}

TEST_CASE("adam ignores non-finite gradients") {
  AdamConfig cfg;
  AdamState state(3, cfg);
  VectorXd p = VectorXd::Constant(3, 1.0);
  VectorXd g(3);
  g << 1.0, std::numeric_limits<double>::quiet_NaN(), 0.0;
  CHECK_FALSE(adam_step(state, p, g));
  CHECK(p == VectorXd::Constant(3, 1.0));
  CHECK(state.step == 0);
  CHECK(state.m.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adam zero gradient is a no-op on the parameters") {
  AdamConfig cfg;
  AdamState state(4, cfg);
  VectorXd p = VectorXd::Constant(4, 2.5);
  CHECK(adam_step(state, p, VectorXd::Zero(4)));
  CHECK(p == VectorXd::Constant(4, 2.5));
  CHECK(state.step == 1);
}

TEST_CASE("global clipping rescales to the configured norm") {
  AdamConfig clipped;
  clipped.global_clip_norm = 10.0;
  AdamConfig plain;

  AdamState s1(100, clipped);
  AdamState s2(100, plain);
  VectorXd p1 = VectorXd::Zero(100);
  VectorXd p2 = VectorXd::Zero(100);
  VectorXd g = VectorXd::Constant(100, 10.0);  // norm 100, scale factor 0.1
  CHECK(adam_step(s1, p1, g));
  CHECK(adam_step(s2, p2, VectorXd::Constant(100, 1.0)));
  CHECK(p1 == p2);

  // below the threshold the gradient passes through untouched
  AdamState s3(100, clipped);
  AdamState s4(100, plain);
  VectorXd p3 = VectorXd::Zero(100);
  VectorXd p4 = VectorXd::Zero(100);
  VectorXd small = VectorXd::Constant(100, 0.5);
  CHECK(adam_step(s3, p3, small));
  CHECK(adam_step(s4, p4, small));
  CHECK(p3 == p4);
}

TEST_CASE("adam shape mismatch throws") {
  AdamConfig cfg;
  AdamState state(3, cfg);
  VectorXd p = VectorXd::Zero(3);
  VectorXd g = VectorXd::Zero(4);
  CHECK_THROWS(adam_step(state, p, g));
}
