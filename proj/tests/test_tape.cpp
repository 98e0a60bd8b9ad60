#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "ganmpc/nn.hpp"
#include "ganmpc/tape.hpp"
#include "oracles.hpp"

using namespace ganmpc;
namespace ad = ganmpc::ad;

namespace {

using Expr = std::function<ad::NodeId(ad::Tape&, ad::NodeId)>;

double eval_expr(const Expr& build, const VectorXd& x) {
  ad::Tape t;
  ad::NodeId in = t.leaf(x);
  ad::NodeId out = build(t, in);
  REQUIRE(t.value(out).size() == 1);
  return t.value(out)(0, 0);
}

VectorXd tape_grad(const Expr& build, const VectorXd& x) {
  ad::Tape t;
  ad::NodeId in = t.leaf(x);
  ad::NodeId out = build(t, in);
  std::vector<ad::NodeId> wrt{in};
  auto g = t.gradient(out, wrt);
  return t.value(g[0]);
}

void check_expr(const Expr& build, const VectorXd& x, double tol = 1e-6) {
  VectorXd got = tape_grad(build, x);
  VectorXd want = test::fd_gradient([&](const VectorXd& v) { return eval_expr(build, v); }, x);
  CHECK(test::max_rel_error(got, want) < tol);
}

VectorXd random_vec(long n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  VectorXd v(n);
  for (long i = 0; i < n; ++i) v[i] = rng.uniform(lo, hi);
  return v;
}

MatrixXd random_mat(long r, long c, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
  return m;
}

MatrixXd random_spd(long n, std::uint64_t seed) {
  MatrixXd m = random_mat(n, n, seed);
  return m * m.transpose() + 0.5 * MatrixXd::Identity(n, n);
}

}  // namespace

TEST_CASE("arithmetic op gradients match finite differences") {
  const VectorXd x = random_vec(5, 11);
  const MatrixXd c = random_vec(5, 12);
  const MatrixXd a = random_mat(4, 5, 13);
  const VectorXd w4 = random_vec(4, 14);

  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.sum_squares(t.add(in, t.constant(c)));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.sum_squares(t.sub(t.constant(c), in));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.sum_squares(t.neg(t.scale(in, 3.5)));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.sum_squares(t.cwise_mul(in, t.constant(c)));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.sum_squares(t.matmul(t.constant(a), in));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.sum_squares(t.transpose(t.matmul(t.constant(a), in)));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.dot(t.matmul(t.constant(a), in), t.constant(MatrixXd(w4)));
  }, x);
}

TEST_CASE("division op gradients match finite differences") {
  const VectorXd x = random_vec(5, 21, 0.5, 1.5);  // away from zero
  const MatrixXd c = random_vec(5, 22);

  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.sum_squares(t.cwise_div(t.constant(c), in));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    // numerator and denominator both depend on the input
    return t.sum_squares(t.cwise_div(t.sigmoid(in), in));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    ad::NodeId s = t.sum_squares(in);
    return t.sum_squares(t.mul_scalar(t.add(in, t.constant(c)), s));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    ad::NodeId s = t.add(t.sum_squares(in), t.constant(MatrixXd::Ones(1, 1)));
    return t.sum_squares(t.div_scalar(t.add(in, t.constant(c)), s));
  }, x);
}

TEST_CASE("nonlinearity gradients match finite differences") {
  const VectorXd x = random_vec(6, 31);
  const VectorXd w = random_vec(6, 32);

  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.dot(t.sigmoid(in), t.constant(MatrixXd(w)));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.dot(t.tanh(in), t.constant(MatrixXd(w)));
  }, x);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.dot(t.softplus(in), t.constant(MatrixXd(w)));
  }, x);
  // keep pre-activations away from the relu kink
  const VectorXd xr = random_vec(6, 33, 0.2, 1.0);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.sum_squares(t.relu(t.sub(in, t.constant(MatrixXd::Constant(6, 1, 0.6)))));
  }, xr);
  const VectorXd xp = random_vec(6, 34, 0.5, 2.0);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    return t.dot(t.sqrt(in), t.constant(MatrixXd(w)));
  }, xp);
}

TEST_CASE("shape op gradients match finite differences") {
  const VectorXd x = random_vec(5, 41);
  check_expr([&](ad::Tape& t, ad::NodeId in) {
    ad::NodeId head = t.slice_rows(in, 0, 2);
    ad::NodeId tail = t.slice_rows(in, 1, 4);
    std::vector<ad::NodeId> parts{head, tail, head};
    ad::NodeId merged = t.concat_rows(parts);
    return t.sum_squares(t.pad_rows(merged, 2, 11));
  }, x);
}

TEST_CASE("shape op values are consistent") {
  ad::Tape t;
  const VectorXd x = random_vec(5, 42);
  ad::NodeId in = t.leaf(x);
  ad::NodeId head = t.slice_rows(in, 0, 2);
  ad::NodeId tail = t.slice_rows(in, 2, 3);
  std::vector<ad::NodeId> parts{head, tail};
  ad::NodeId merged = t.concat_rows(parts);
  CHECK(t.value(merged) == x);

  ad::NodeId padded = t.pad_rows(head, 3, 6);
  CHECK(t.value(padded).rows() == 6);
  CHECK(t.value(padded).topRows(3).isZero(0.0));
  CHECK(t.value(padded)(3, 0) == x[0]);
  CHECK(t.value(padded)(4, 0) == x[1]);
  CHECK(t.value(padded)(5, 0) == 0.0);

  CHECK(t.value(t.transpose(in)) == x.transpose());
}

TEST_CASE("solve_psd value and gradients") {
  const long n = 4;
  const MatrixXd a0 = random_spd(n, 51);
  const VectorXd b0 = random_vec(n, 52);

  ad::Tape t;
  ad::NodeId a = t.constant(a0);
  ad::NodeId b = t.constant(MatrixXd(b0));
  ad::NodeId sol = t.solve_psd(a, b);
  CHECK((a0 * t.value(sol) - b0).norm() < 1e-12);

  // gradient through the right-hand side
  check_expr([&](ad::Tape& tt, ad::NodeId in) {
    return tt.sum_squares(tt.solve_psd(tt.constant(a0), in));
  }, b0);

  // gradient through the matrix: A = A0 + 0.1 x x^T stays positive definite
  check_expr([&](ad::Tape& tt, ad::NodeId in) {
    ad::NodeId pert = tt.scale(tt.matmul(in, tt.transpose(in)), 0.1);
    ad::NodeId mat = tt.add(tt.constant(a0), pert);
    return tt.sum_squares(tt.solve_psd(mat, tt.constant(MatrixXd(b0))));
  }, random_vec(n, 53), 5e-6);
}

TEST_CASE("clamp passes gradient only inside the bound") {
  ad::Tape t;
  VectorXd x(4);
  x << -2.0, -0.3, 0.4, 1.7;
  ad::NodeId in = t.leaf(x);
  ad::NodeId out = t.clamp(in, 1.0);
  VectorXd expected(4);
  expected << -1.0, -0.3, 0.4, 1.0;
  CHECK(t.value(out) == expected);

  std::vector<ad::NodeId> wrt{in};
  auto g = t.gradient(t.sum_squares(out), wrt);
  VectorXd grad = t.value(g[0]);
  CHECK(grad[0] == 0.0);
  CHECK(grad[1] == doctest::Approx(2.0 * -0.3).epsilon(1e-12));
  CHECK(grad[2] == doctest::Approx(2.0 * 0.4).epsilon(1e-12));
  CHECK(grad[3] == 0.0);
}

TEST_CASE("dense network on tape matches nn forward and backward bitwise") {
  const nn::NetworkSpec spec({4, 8, 6, 2},
                             {nn::Activation::kRelu, nn::Activation::kTanh});
  const nn::NetworkParams params = nn::glorot_init(spec, 77);
  const VectorXd x = random_vec(4, 78);

  ad::Tape t;
  std::vector<ad::NodeId> w_nodes, b_nodes;
  for (int l = 0; l < spec.num_layers(); ++l) {
    w_nodes.push_back(t.leaf(params.w[l]));
    b_nodes.push_back(t.leaf(MatrixXd(params.b[l])));
  }
  ad::NodeId in = t.leaf(x);

  ad::NodeId act = in;
  for (int l = 0; l < spec.num_layers(); ++l) {
    ad::NodeId z = t.add(t.matmul(w_nodes[l], act), b_nodes[l]);
    if (l + 1 < spec.num_layers()) {
      act = spec.hidden_activations()[l] == nn::Activation::kRelu ? t.relu(z) : t.tanh(z);
    } else {
      act = z;
    }
  }

  const VectorXd ref_out = nn::forward(spec, params, x);
  CHECK(t.value(act) == ref_out);

  const MatrixXd upstream = random_mat(2, 1, 79);
  std::vector<std::pair<ad::NodeId, MatrixXd>> seeds{{act, upstream}};
  std::vector<ad::NodeId> wrt;
  for (int l = 0; l < spec.num_layers(); ++l) {
    wrt.push_back(w_nodes[l]);
    wrt.push_back(b_nodes[l]);
  }
  wrt.push_back(in);
  auto grads = t.backward(seeds, wrt);

  nn::BackwardResult ref = nn::backward(spec, params, x, upstream);
  for (int l = 0; l < spec.num_layers(); ++l) {
    CHECK(t.value(grads[2 * l]) == ref.param_grad.w[l]);
    CHECK(t.value(grads[2 * l + 1]) == MatrixXd(ref.param_grad.b[l]));
  }
  CHECK(t.value(grads.back()) == ref.input_grad);
}

TEST_CASE("softplus output head matches nn backward bitwise") {
  const nn::NetworkSpec spec({3, 5, 1}, nn::Activation::kRelu,
                             nn::OutputActivation::kSoftplus);
  const nn::NetworkParams params = nn::glorot_init(spec, 101);
  const VectorXd x = random_vec(3, 102);

  ad::Tape t;
  ad::NodeId in = t.leaf(x);
  ad::NodeId h = t.relu(t.add(t.matmul(t.leaf(params.w[0]), in), t.leaf(MatrixXd(params.b[0]))));
  ad::NodeId z = t.add(t.matmul(t.leaf(params.w[1]), h), t.leaf(MatrixXd(params.b[1])));
  ad::NodeId out = t.softplus(z);

  CHECK(t.value(out) == nn::forward(spec, params, x));

  std::vector<std::pair<ad::NodeId, MatrixXd>> seeds{{out, MatrixXd::Ones(1, 1)}};
  std::vector<ad::NodeId> wrt{in};
  auto grads = t.backward(seeds, wrt);
  nn::BackwardResult ref = nn::backward(spec, params, x, MatrixXd::Ones(1, 1));
  CHECK(t.value(grads[0]) == ref.input_grad);
}

TEST_CASE("emitted gradients are differentiable: hessian-vector products") {
  const MatrixXd a = random_mat(5, 4, 61);
  const VectorXd x0 = random_vec(4, 62);
  const VectorXd v = random_vec(4, 63);

  auto grad_at = [&](const VectorXd& x) {
    ad::Tape t;
    ad::NodeId in = t.leaf(x);
    ad::NodeId f = t.sum_squares(t.tanh(t.matmul(t.constant(a), in)));
    std::vector<ad::NodeId> wrt{in};
    return t.value(t.gradient(f, wrt)[0]);
  };

  ad::Tape t;
  ad::NodeId in = t.leaf(x0);
  ad::NodeId f = t.sum_squares(t.tanh(t.matmul(t.constant(a), in)));
  std::vector<ad::NodeId> wrt{in};
  ad::NodeId g = t.gradient(f, wrt)[0];
  ad::NodeId gv = t.dot(g, t.constant(MatrixXd(v)));
  VectorXd hvp = t.value(t.gradient(gv, wrt)[0]);

  const double h = 1e-5;
  VectorXd fd_hvp = (grad_at(x0 + h * v) - grad_at(x0 - h * v)) / (2.0 * h);
  CHECK(test::max_rel_error(hvp, fd_hvp) < 1e-6);
}

TEST_CASE("gradient-penalty pattern: derivative of squared input gradient") {
  // logit(x) = w . tanh(W x); penalty(W) = |d logit / d x|^2
  const long n = 3, m = 4;
  const MatrixXd w0 = random_mat(m, n, 71);
  const VectorXd ro = random_vec(m, 72);
  const VectorXd x = random_vec(n, 73);

  ad::Tape t;
  ad::NodeId in = t.leaf(x);
  ad::NodeId wn = t.leaf(w0);
  ad::NodeId logit = t.dot(t.tanh(t.matmul(wn, in)), t.constant(MatrixXd(ro)));
  std::vector<ad::NodeId> wrt_x{in};
  ad::NodeId gx = t.gradient(logit, wrt_x)[0];
  ad::NodeId r1 = t.sum_squares(gx);
  std::vector<ad::NodeId> wrt_w{wn};
  MatrixXd got = t.value(t.gradient(r1, wrt_w)[0]);

  auto scalar_penalty = [&](const VectorXd& flat) {
    MatrixXd wmat(m, n);
    long k = 0;
    for (long r = 0; r < m; ++r)
      for (long c = 0; c < n; ++c) wmat(r, c) = flat[k++];
    ad::Tape tt;
    ad::NodeId xin = tt.leaf(x);
    ad::NodeId lg = tt.dot(tt.tanh(tt.matmul(tt.leaf(wmat), xin)), tt.constant(MatrixXd(ro)));
    std::vector<ad::NodeId> wrt{xin};
    ad::NodeId g = tt.gradient(lg, wrt)[0];
    return tt.value(tt.sum_squares(g))(0, 0);
  };

  VectorXd flat0(m * n);
  long k = 0;
  for (long r = 0; r < m; ++r)
    for (long c = 0; c < n; ++c) flat0[k++] = w0(r, c);
  VectorXd fd = test::fd_gradient(scalar_penalty, flat0);

  VectorXd got_flat(m * n);
  k = 0;
  for (long r = 0; r < m; ++r)
    for (long c = 0; c < n; ++c) got_flat[k++] = got(r, c);
  CHECK(test::max_rel_error(got_flat, fd) < 1e-6);
}

TEST_CASE("frozen masks carry no second-order signal") {
  // f = sum_squares(relu(x)): on the active set the exact hessian is 2 I,
  // off it everything vanishes
  ad::Tape t;
  VectorXd x(4);
  x << 1.5, -0.7, 0.3, -2.0;
  ad::NodeId in = t.leaf(x);
  ad::NodeId f = t.sum_squares(t.relu(in));
  std::vector<ad::NodeId> wrt{in};
  ad::NodeId g = t.gradient(f, wrt)[0];

  VectorXd expected_g(4);
  expected_g << 3.0, 0.0, 0.6, 0.0;
  CHECK((t.value(g) - expected_g).cwiseAbs().maxCoeff() < 1e-15);

  VectorXd v(4);
  v << 1.0, 1.0, 1.0, 1.0;
  ad::NodeId gv = t.dot(g, t.constant(MatrixXd(v)));
  VectorXd hvp = t.value(t.gradient(gv, wrt)[0]);
  VectorXd expected_h(4);
  expected_h << 2.0, 0.0, 2.0, 0.0;
  CHECK((hvp - expected_h).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("multiple seeds accumulate") {
  ad::Tape t;
  const VectorXd x = random_vec(4, 81);
  ad::NodeId in = t.leaf(x);
  ad::NodeId s = t.sigmoid(in);
  ad::NodeId c = t.tanh(in);

  const MatrixXd u1 = random_vec(4, 82);
  const MatrixXd u2 = random_vec(4, 83);
  std::vector<std::pair<ad::NodeId, MatrixXd>> seeds{{s, u1}, {c, u2}};
  std::vector<ad::NodeId> wrt{in};
  VectorXd got = t.value(t.backward(seeds, wrt)[0]);

  VectorXd want(4);
  for (long i = 0; i < 4; ++i) {
    double sv = nn::sigmoid(x[i]);
    double cv = std::tanh(x[i]);
    want[i] = u1(i, 0) * sv * (1.0 - sv) + u2(i, 0) * (1.0 - cv * cv);
  }
  CHECK(test::max_rel_error(got, want) < 1e-12);
}

TEST_CASE("disconnected wrt yields zero gradient") {
  ad::Tape t;
  ad::NodeId a = t.leaf(random_vec(3, 91));
  ad::NodeId b = t.leaf(random_vec(2, 92));
  ad::NodeId f = t.sum_squares(a);
  std::vector<ad::NodeId> wrt{b};
  MatrixXd g = t.value(t.gradient(f, wrt)[0]);
  CHECK(g.rows() == 2);
  CHECK(g.isZero(0.0));
}

TEST_CASE("invalid uses are rejected") {
  ad::Tape t;
  ad::NodeId a = t.leaf(random_vec(3, 95));
  ad::NodeId b = t.leaf(random_vec(4, 96));
  CHECK_THROWS_AS(t.add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(t.cwise_mul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(t.mul_scalar(a, b), std::invalid_argument);
  CHECK_THROWS_AS(t.matmul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(t.slice_rows(a, 2, 5), std::invalid_argument);
  CHECK_THROWS_AS(t.pad_rows(a, 1, 3), std::invalid_argument);
  CHECK_THROWS_AS(t.clamp(a, 0.0), std::invalid_argument);

  ad::NodeId neg_def = t.constant(-MatrixXd::Identity(3, 3));
  ad::NodeId rhs = t.constant(MatrixXd::Ones(3, 1));
  CHECK_THROWS_AS(t.solve_psd(neg_def, rhs), std::runtime_error);

  std::vector<std::pair<ad::NodeId, MatrixXd>> bad_seed{{a, MatrixXd::Ones(2, 2)}};
  std::vector<ad::NodeId> wrt{a};
  CHECK_THROWS_AS(t.backward(bad_seed, wrt), std::invalid_argument);

  std::vector<std::pair<ad::NodeId, MatrixXd>> seed{{t.sum_squares(a), MatrixXd::Ones(1, 1)}};
  std::vector<ad::NodeId> bad_wrt{static_cast<ad::NodeId>(t.size()) + 5};
  CHECK_THROWS_AS(t.backward(seed, bad_wrt), std::invalid_argument);
}
