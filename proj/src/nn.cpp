#include "ganmpc/nn.hpp"

#include <stdexcept>

namespace ganmpc::nn {

namespace {

void validate_layer_sizes(const std::vector<int>& sizes) {
  if (sizes.size() < 2) throw std::invalid_argument("NetworkSpec needs at least 2 layers");
  for (int s : sizes) {
    if (s < 1) throw std::invalid_argument("NetworkSpec layer sizes must be >= 1");
  }
}

MatrixXd apply_hidden(Activation act, const MatrixXd& z) {
  switch (act) {
    case Activation::kRelu:
      return z.cwiseMax(0.0);
    case Activation::kTanh:
      return z.array().tanh().matrix();
    case Activation::kIdentity:
      return z;
  }
  throw std::logic_error("unknown activation");
}

MatrixXd apply_output(OutputActivation act, const MatrixXd& z) {
  switch (act) {
    case OutputActivation::kIdentity:
      return z;
    case OutputActivation::kSoftplus:
      return z.unaryExpr([](double v) { return softplus(v); });
  }
  throw std::logic_error("unknown output activation");
}

// derivative of the hidden activation, given pre- and post-activation values
MatrixXd hidden_deriv(Activation act, const MatrixXd& z, const MatrixXd& a) {
  switch (act) {
    case Activation::kRelu:
      return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::kTanh:
      return (1.0 - a.array().square()).matrix();
    case Activation::kIdentity:
      return MatrixXd::Ones(z.rows(), z.cols());
  }
  throw std::logic_error("unknown activation");
}

}  // namespace

NetworkSpec::NetworkSpec(std::vector<int> layer_sizes, Activation hidden_activation,
                         OutputActivation output_activation)
    : layer_sizes_(std::move(layer_sizes)), output_(output_activation) {
  validate_layer_sizes(layer_sizes_);
  hidden_.assign(layer_sizes_.size() - 2, hidden_activation);
}

NetworkSpec::NetworkSpec(std::vector<int> layer_sizes, std::vector<Activation> hidden_activations,
                         OutputActivation output_activation)
    : layer_sizes_(std::move(layer_sizes)),
      hidden_(std::move(hidden_activations)),
      output_(output_activation) {
  validate_layer_sizes(layer_sizes_);
  if (hidden_.size() != layer_sizes_.size() - 2) {
    throw std::invalid_argument("need one hidden activation per hidden layer");
  }
}

NetworkParams NetworkParams::zeros(const NetworkSpec& spec) {
  NetworkParams p;
  const auto& sizes = spec.layer_sizes();
  for (int l = 0; l < spec.num_layers(); ++l) {
    p.w.push_back(MatrixXd::Zero(sizes[l + 1], sizes[l]));
    p.b.push_back(VectorXd::Zero(sizes[l + 1]));
  }
  return p;
}

bool NetworkParams::shapes_match(const NetworkSpec& spec) const {
  const auto& sizes = spec.layer_sizes();
  if (static_cast<int>(w.size()) != spec.num_layers() || w.size() != b.size()) return false;
  for (int l = 0; l < spec.num_layers(); ++l) {
    if (w[l].rows() != sizes[l + 1] || w[l].cols() != sizes[l]) return false;
    if (b[l].size() != sizes[l + 1]) return false;
  }
  return true;
}

bool NetworkParams::all_finite() const {
  for (const auto& m : w)
    if (!m.allFinite()) return false;
  for (const auto& v : b)
    if (!v.allFinite()) return false;
  return true;
}

long NetworkParams::num_entries() const {
  long n = 0;
  for (const auto& m : w) n += m.size();
  for (const auto& v : b) n += v.size();
  return n;
}

VectorXd NetworkParams::flatten() const {
  VectorXd flat(num_entries());
  long k = 0;
  for (std::size_t l = 0; l < w.size(); ++l) {
    for (long r = 0; r < w[l].rows(); ++r)
      for (long c = 0; c < w[l].cols(); ++c) flat[k++] = w[l](r, c);
    for (long r = 0; r < b[l].size(); ++r) flat[k++] = b[l][r];
  }
  return flat;
}

void NetworkParams::unflatten(const VectorXd& flat) {
  if (flat.size() != num_entries()) throw std::invalid_argument("flat size mismatch");
  long k = 0;
  for (std::size_t l = 0; l < w.size(); ++l) {
    for (long r = 0; r < w[l].rows(); ++r)
      for (long c = 0; c < w[l].cols(); ++c) w[l](r, c) = flat[k++];
    for (long r = 0; r < b[l].size(); ++r) b[l][r] = flat[k++];
  }
}

NetworkParams glorot_init(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkParams p = NetworkParams::zeros(spec);
  Rng rng(seed);
  const auto& sizes = spec.layer_sizes();
  for (int l = 0; l < spec.num_layers(); ++l) {
    const double bound = std::sqrt(6.0 / (sizes[l] + sizes[l + 1]));
    for (long r = 0; r < p.w[l].rows(); ++r)
      for (long c = 0; c < p.w[l].cols(); ++c) p.w[l](r, c) = rng.uniform(-bound, bound);
  }
  return p;
}

MatrixXd forward_cached(const NetworkSpec& spec, const NetworkParams& params,
                        const MatrixXd& inputs, ForwardCache& cache) {
  if (inputs.rows() != spec.input_dim()) throw std::invalid_argument("input dimension mismatch");
  if (!params.shapes_match(spec)) throw std::invalid_argument("params do not match spec");

  cache.activations.clear();
  cache.pre_activations.clear();
  cache.activations.push_back(inputs);

  const int layers = spec.num_layers();
  for (int l = 0; l < layers; ++l) {
    MatrixXd z = params.w[l] * cache.activations.back();
    z.colwise() += params.b[l];
    cache.pre_activations.push_back(z);
    if (l + 1 < layers) {
      cache.activations.push_back(apply_hidden(spec.hidden_activations()[l], z));
    } else {
      cache.activations.push_back(apply_output(spec.output_activation(), z));
    }
  }
  return cache.activations.back();
}

MatrixXd forward_batch(const NetworkSpec& spec, const NetworkParams& params,
                       const MatrixXd& inputs) {
  ForwardCache cache;
  return forward_cached(spec, params, inputs, cache);
}

VectorXd forward(const NetworkSpec& spec, const NetworkParams& params, const VectorXd& input) {
  return forward_batch(spec, params, input);
}

BackwardResult backward_from_cache(const NetworkSpec& spec, const NetworkParams& params,
                                   const ForwardCache& cache, const MatrixXd& upstream) {
  const int layers = spec.num_layers();
  if (upstream.rows() != spec.output_dim() ||
      upstream.cols() != cache.activations.front().cols()) {
    throw std::invalid_argument("upstream gradient shape mismatch");
  }

  BackwardResult res;
  res.param_grad = NetworkParams::zeros(spec);

  MatrixXd g;
  switch (spec.output_activation()) {
    case OutputActivation::kIdentity:
      g = upstream;
      break;
    case OutputActivation::kSoftplus:
      g = upstream.cwiseProduct(
          cache.pre_activations.back().unaryExpr([](double v) { return sigmoid(v); }));
      break;
  }

  for (int l = layers - 1; l >= 0; --l) {
    res.param_grad.w[l] = g * cache.activations[l].transpose();
    res.param_grad.b[l] = g.rowwise().sum();
    MatrixXd wt = params.w[l].transpose();
    MatrixXd g_prev = wt * g;
    if (l > 0) {
      g = g_prev.cwiseProduct(hidden_deriv(spec.hidden_activations()[l - 1],
                                           cache.pre_activations[l - 1], cache.activations[l]));
    } else {
      res.input_grad = std::move(g_prev);
    }
  }
  return res;
}

BackwardResult backward(const NetworkSpec& spec, const NetworkParams& params,
                        const MatrixXd& inputs, const MatrixXd& upstream) {
  ForwardCache cache;
  forward_cached(spec, params, inputs, cache);
  return backward_from_cache(spec, params, cache, upstream);
}

// ---------------------------------------------------------------------------

RecurrentEncoderParams RecurrentEncoderParams::zeros(int input_dim, int hidden_dim) {
  RecurrentEncoderParams p;
  p.wz = MatrixXd::Zero(hidden_dim, input_dim);
  p.uz = MatrixXd::Zero(hidden_dim, hidden_dim);
  p.wr = MatrixXd::Zero(hidden_dim, input_dim);
  p.ur = MatrixXd::Zero(hidden_dim, hidden_dim);
  p.wc = MatrixXd::Zero(hidden_dim, input_dim);
  p.uc = MatrixXd::Zero(hidden_dim, hidden_dim);
  p.bz = VectorXd::Zero(hidden_dim);
  p.br = VectorXd::Zero(hidden_dim);
  p.bc = VectorXd::Zero(hidden_dim);
  p.readout_w = VectorXd::Zero(hidden_dim);
  p.readout_b = 0.0;
  return p;
}

RecurrentEncoderParams RecurrentEncoderParams::glorot_init(int input_dim, int hidden_dim,
                                                           std::uint64_t seed) {
  RecurrentEncoderParams p = zeros(input_dim, hidden_dim);
  Rng rng(seed);
  auto fill = [&rng](MatrixXd& m, double bound) {
    for (long r = 0; r < m.rows(); ++r)
      for (long c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
  };
  const double bw = std::sqrt(6.0 / (input_dim + hidden_dim));
  const double bu = std::sqrt(6.0 / (2.0 * hidden_dim));
  fill(p.wz, bw);
  fill(p.uz, bu);
  fill(p.wr, bw);
  fill(p.ur, bu);
  fill(p.wc, bw);
  fill(p.uc, bu);
  const double bo = std::sqrt(6.0 / (hidden_dim + 1));
  for (long r = 0; r < p.readout_w.size(); ++r) p.readout_w[r] = rng.uniform(-bo, bo);
  return p;
}

bool RecurrentEncoderParams::all_finite() const {
  return wz.allFinite() && uz.allFinite() && wr.allFinite() && ur.allFinite() &&
         wc.allFinite() && uc.allFinite() && bz.allFinite() && br.allFinite() &&
         bc.allFinite() && readout_w.allFinite() && std::isfinite(readout_b);
}

long RecurrentEncoderParams::num_entries() const {
  return wz.size() + uz.size() + wr.size() + ur.size() + wc.size() + uc.size() + bz.size() +
         br.size() + bc.size() + readout_w.size() + 1;
}

VectorXd RecurrentEncoderParams::flatten() const {
  VectorXd flat(num_entries());
  long k = 0;
  auto put_m = [&](const MatrixXd& m) {
    for (long r = 0; r < m.rows(); ++r)
      for (long c = 0; c < m.cols(); ++c) flat[k++] = m(r, c);
  };
  auto put_v = [&](const VectorXd& v) {
    for (long r = 0; r < v.size(); ++r) flat[k++] = v[r];
  };
  put_m(wz); put_m(uz); put_v(bz);
  put_m(wr); put_m(ur); put_v(br);
  put_m(wc); put_m(uc); put_v(bc);
  put_v(readout_w);
  flat[k++] = readout_b;
  return flat;
}

void RecurrentEncoderParams::unflatten(const VectorXd& flat) {
  if (flat.size() != num_entries()) throw std::invalid_argument("flat size mismatch");
  long k = 0;
  auto get_m = [&](MatrixXd& m) {
    for (long r = 0; r < m.rows(); ++r)
      for (long c = 0; c < m.cols(); ++c) m(r, c) = flat[k++];
  };
  auto get_v = [&](VectorXd& v) {
    for (long r = 0; r < v.size(); ++r) v[r] = flat[k++];
  };
  get_m(wz); get_m(uz); get_v(bz);
  get_m(wr); get_m(ur); get_v(br);
  get_m(wc); get_m(uc); get_v(bc);
  get_v(readout_w);
  readout_b = flat[k++];
}

namespace {

struct CellTrace {
  VectorXd z, r, c, h_prev;
};

VectorXd cell_step(const RecurrentEncoderParams& p, const VectorXd& x, const VectorXd& h,
                   CellTrace* trace) {
  VectorXd az = p.wz * x + p.uz * h + p.bz;
  VectorXd ar = p.wr * x + p.ur * h + p.br;
  VectorXd z = az.unaryExpr([](double v) { return sigmoid(v); });
  VectorXd r = ar.unaryExpr([](double v) { return sigmoid(v); });
  VectorXd ac = p.wc * x + p.uc * (r.cwiseProduct(h)) + p.bc;
  VectorXd c = ac.array().tanh().matrix();
  VectorXd h_next = (VectorXd::Ones(h.size()) - z).cwiseProduct(h) + z.cwiseProduct(c);
  if (trace) {
    trace->z = z;
    trace->r = r;
    trace->c = c;
    trace->h_prev = h;
  }
  return h_next;
}

}  // namespace

double encode_trajectory(const RecurrentEncoderParams& params,
                         std::span<const VectorXd> states) {
  if (states.empty()) throw std::invalid_argument("encode_trajectory: empty sequence");
  VectorXd h = VectorXd::Zero(params.hidden_dim());
  for (const auto& x : states) {
    if (x.size() != params.input_dim())
      throw std::invalid_argument("encode_trajectory: state dimension mismatch");
    h = cell_step(params, x, h, nullptr);
  }
  return params.readout_w.dot(h) + params.readout_b;
}

EncoderBackwardResult encode_backward(const RecurrentEncoderParams& params,
                                      std::span<const VectorXd> states, double upstream) {
  if (states.empty()) throw std::invalid_argument("encode_backward: empty sequence");
  const int T = static_cast<int>(states.size());
  const int hd = params.hidden_dim();

  std::vector<CellTrace> traces(T);
  VectorXd h = VectorXd::Zero(hd);
  for (int t = 0; t < T; ++t) {
    if (states[t].size() != params.input_dim())
      throw std::invalid_argument("encode_backward: state dimension mismatch");
    h = cell_step(params, states[t], h, &traces[t]);
  }

  EncoderBackwardResult res;
  res.logit = params.readout_w.dot(h) + params.readout_b;
  res.param_grad = RecurrentEncoderParams::zeros(params.input_dim(), hd);
  res.input_grad.resize(T);

  res.param_grad.readout_w = upstream * h;
  res.param_grad.readout_b = upstream;

  VectorXd gh = upstream * params.readout_w;
  const VectorXd ones = VectorXd::Ones(hd);
  for (int t = T - 1; t >= 0; --t) {
    const CellTrace& tr = traces[t];
    VectorXd gz = gh.cwiseProduct(tr.c - tr.h_prev);
    VectorXd gc = gh.cwiseProduct(tr.z);
    VectorXd gac = gc.cwiseProduct(ones - tr.c.cwiseProduct(tr.c));
    VectorXd gaz = gz.cwiseProduct(tr.z.cwiseProduct(ones - tr.z));
    VectorXd grh = params.uc.transpose() * gac;  // grad w.r.t. r .* h_prev
    VectorXd gr = grh.cwiseProduct(tr.h_prev);
    VectorXd gar = gr.cwiseProduct(tr.r.cwiseProduct(ones - tr.r));

    res.param_grad.wz += gaz * states[t].transpose();
    res.param_grad.uz += gaz * tr.h_prev.transpose();
    res.param_grad.bz += gaz;
    res.param_grad.wr += gar * states[t].transpose();
    res.param_grad.ur += gar * tr.h_prev.transpose();
    res.param_grad.br += gar;
    res.param_grad.wc += gac * states[t].transpose();
    res.param_grad.uc += gac * (tr.r.cwiseProduct(tr.h_prev)).transpose();
    res.param_grad.bc += gac;

    res.input_grad[t] =
        params.wz.transpose() * gaz + params.wr.transpose() * gar + params.wc.transpose() * gac;

    gh = gh.cwiseProduct(ones - tr.z) + params.uz.transpose() * gaz +
         params.ur.transpose() * gar + grh.cwiseProduct(tr.r);
  }
  return res;
}

// ---------------------------------------------------------------------------

bool adam_step(AdamState& state, VectorXd& params, VectorXd gradient) {
  if (gradient.size() != params.size() || gradient.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  if (!gradient.allFinite()) return false;

  const AdamConfig& c = state.config;
  if (c.global_clip_norm) {
    const double norm = gradient.norm();
    if (norm > *c.global_clip_norm) gradient *= (*c.global_clip_norm / norm);
  }

  state.step += 1;
  state.m = c.beta1 * state.m + (1.0 - c.beta1) * gradient;
  state.v = c.beta2 * state.v + (1.0 - c.beta2) * gradient.cwiseProduct(gradient);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  VectorXd m_hat = state.m / bc1;
  VectorXd v_hat = state.v / bc2;
  params -= c.learning_rate *
            m_hat.cwiseQuotient(v_hat.cwiseSqrt().array().matrix() +
                                VectorXd::Constant(params.size(), c.epsilon));
  return true;
}

}  // namespace ganmpc::nn
