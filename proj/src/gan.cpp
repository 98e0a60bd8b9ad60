#include "ganmpc/gan.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "ganmpc/tape.hpp"

namespace ganmpc::gan {

namespace {

int count_true(const std::vector<bool>& mask) {
  return static_cast<int>(std::count(mask.begin(), mask.end(), true));
}

void accumulate(nn::RecurrentEncoderParams& into, const nn::RecurrentEncoderParams& from,
                double scale) {
  into.wz += scale * from.wz;
  into.uz += scale * from.uz;
  into.wr += scale * from.wr;
  into.ur += scale * from.ur;
  into.wc += scale * from.wc;
  into.uc += scale * from.uc;
  into.bz += scale * from.bz;
  into.br += scale * from.br;
  into.bc += scale * from.bc;
  into.readout_w += scale * from.readout_w;
  into.readout_b += scale * from.readout_b;
}

void accumulate(mpc::PhiGrad& into, const mpc::PhiGrad& from) {
  for (std::size_t l = 0; l < into.params.w.size(); ++l) {
    into.params.w[l] += from.params.w[l];
    into.params.b[l] += from.params.b[l];
  }
  into.lambda_eng_raw += from.lambda_eng_raw;
  into.lambda_lrn_raw += from.lambda_lrn_raw;
}

// Re-recording of the recurrent critic on a tape, for the gradient penalty's
// second derivative. Mirrors the cell arithmetic of the analytic encoder.
struct TapedEncoder {
  ad::NodeId wz, uz, wr, ur, wc, uc, bz, br, bc, rw, rb;
  int hidden = 0;

  static TapedEncoder leaves(ad::Tape& t, const nn::RecurrentEncoderParams& p) {
    TapedEncoder e;
    e.wz = t.leaf(p.wz);
    e.uz = t.leaf(p.uz);
    e.wr = t.leaf(p.wr);
    e.ur = t.leaf(p.ur);
    e.wc = t.leaf(p.wc);
    e.uc = t.leaf(p.uc);
    e.bz = t.leaf(MatrixXd(p.bz));
    e.br = t.leaf(MatrixXd(p.br));
    e.bc = t.leaf(MatrixXd(p.bc));
    e.rw = t.leaf(MatrixXd(p.readout_w));
    e.rb = t.leaf(MatrixXd::Constant(1, 1, p.readout_b));
    e.hidden = p.hidden_dim();
    return e;
  }

  std::vector<ad::NodeId> all() const { return {wz, uz, wr, ur, wc, uc, bz, br, bc, rw, rb}; }

  ad::NodeId logit(ad::Tape& t, std::span<const VectorXd> states,
                   std::vector<ad::NodeId>* inputs) const {
    ad::NodeId h = t.constant(MatrixXd::Zero(hidden, 1));
    ad::NodeId ones = t.constant(MatrixXd::Ones(hidden, 1));
    for (const VectorXd& x : states) {
      ad::NodeId xn = t.constant(MatrixXd(x));
      if (inputs) inputs->push_back(xn);
      ad::NodeId z = t.sigmoid(t.add(t.add(t.matmul(wz, xn), t.matmul(uz, h)), bz));
      ad::NodeId r = t.sigmoid(t.add(t.add(t.matmul(wr, xn), t.matmul(ur, h)), br));
      ad::NodeId c = t.tanh(t.add(t.add(t.matmul(wc, xn), t.matmul(uc, t.cwise_mul(r, h))), bc));
      h = t.add(t.cwise_mul(t.sub(ones, z), h), t.cwise_mul(z, c));
    }
    return t.add(t.matmul(t.transpose(rw), h), rb);
  }
};

VectorXd scatter_to_full(const VectorXd& visible, const std::vector<bool>& mask) {
  VectorXd full = VectorXd::Zero(static_cast<long>(mask.size()));
  long j = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) full[static_cast<long>(i)] = visible[j++];
  return full;
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

}  // namespace

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::kGanMpc:
      return "gan_mpc";
    case Algorithm::kL2MpcSa:
      return "l2_mpc_sa";
    case Algorithm::kL2MpcS:
      return "l2_mpc_s";
    case Algorithm::kBc:
      return "bc";
  }
  throw std::invalid_argument("unknown algorithm");
}

Algorithm algorithm_from_name(const std::string& name) {
  if (name == "gan_mpc") return Algorithm::kGanMpc;
  if (name == "l2_mpc_sa") return Algorithm::kL2MpcSa;
  if (name == "l2_mpc_s") return Algorithm::kL2MpcS;
  if (name == "bc") return Algorithm::kBc;
  throw std::invalid_argument("unknown algorithm: " + name);
}

void GanMpcHyper::validate(int state_dim) const {
  if (pretrain_epochs < 0 || finetune_epochs < 0 || bc_epochs < 0 || predictor_epochs < 0)
    throw std::invalid_argument("hyper: epoch counts must be non-negative");
  if (iterations < 0) throw std::invalid_argument("hyper: iterations must be non-negative");
  if (rollouts_per_iter < 1) throw std::invalid_argument("hyper: need at least one rollout");
  if (batch < 2 || batch % 2 != 0) throw std::invalid_argument("hyper: batch must be even >= 2");
  if (rollout_states < 2) throw std::invalid_argument("hyper: rollout_states must be >= 2");
  if (learning_rate <= 0 || model_learning_rate <= 0)
    throw std::invalid_argument("hyper: learning rates must be positive");
  if (polyak_rho < 0 || polyak_rho > 1)
    throw std::invalid_argument("hyper: polyak_rho must lie in [0, 1]");
  if (r1_lambda < 0) throw std::invalid_argument("hyper: r1_lambda must be non-negative");
  if (clip_norm && *clip_norm <= 0) throw std::invalid_argument("hyper: clip_norm must be positive");
  if (disc_steps < 1 || gen_steps < 1) throw std::invalid_argument("hyper: step counts must be >= 1");
  if (hidden_dim < 1) throw std::invalid_argument("hyper: hidden_dim must be positive");
  if (spsa_samples < 1 || spsa_step <= 0)
    throw std::invalid_argument("hyper: invalid perturbation settings");
  if (!obs_mask.empty()) {
    if (static_cast<int>(obs_mask.size()) != state_dim)
      throw std::invalid_argument("hyper: obs_mask length must equal the state dimension");
    if (count_true(obs_mask) == 0)
      throw std::invalid_argument("hyper: obs_mask must keep at least one dimension");
  }
}

std::vector<bool> GanMpcHyper::resolved_mask(int state_dim) const {
  if (obs_mask.empty()) return std::vector<bool>(static_cast<std::size_t>(state_dim), true);
  return obs_mask;
}

std::vector<VectorXd> apply_obs_mask(std::span<const VectorXd> states,
                                     const std::vector<bool>& mask) {
  const int visible = count_true(mask);
  if (visible == 0) throw std::invalid_argument("obs mask: no visible dimensions");
  std::vector<VectorXd> out;
  out.reserve(states.size());
  for (const VectorXd& s : states) {
    if (s.size() != static_cast<long>(mask.size()))
      throw std::invalid_argument("obs mask: state dimension mismatch");
    VectorXd v(visible);
    long j = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) v[j++] = s[static_cast<long>(i)];
    out.push_back(std::move(v));
  }
  return out;
}

Discriminator::Discriminator(int input_dim, int hidden_dim)
    : params(nn::RecurrentEncoderParams::zeros(input_dim, hidden_dim)) {
  if (input_dim < 1 || hidden_dim < 1)
    throw std::invalid_argument("discriminator: dimensions must be positive");
}

void Discriminator::init(std::uint64_t seed) {
  params = nn::RecurrentEncoderParams::glorot_init(params.input_dim(), params.hidden_dim(), seed);
}

double Discriminator::logit(std::span<const VectorXd> states) const {
  return nn::encode_trajectory(params, states);
}

double Discriminator::classify(std::span<const VectorXd> states) const {
  return nn::sigmoid(logit(states));
}

DiscriminatorLoss discriminator_loss(const Discriminator& disc,
                                     std::span<const std::vector<VectorXd>> real,
                                     std::span<const std::vector<VectorXd>> fake,
                                     double r1_lambda) {
  if (real.empty() || fake.empty())
    throw std::invalid_argument("discriminator loss: empty batch");
  if (r1_lambda < 0) throw std::invalid_argument("discriminator loss: negative r1 weight");

  DiscriminatorLoss out;
  out.grad = nn::RecurrentEncoderParams::zeros(disc.params.input_dim(), disc.params.hidden_dim());
  const double nr = static_cast<double>(real.size());
  const double nf = static_cast<double>(fake.size());
  double correct = 0.0;

  for (const auto& seq : real) {
    const double l = nn::encode_trajectory(disc.params, seq);
    out.real_term += nn::softplus(-l) / nr;
    correct += l > 0 ? 1.0 : (l == 0 ? 0.5 : 0.0);
    nn::EncoderBackwardResult eb = nn::encode_backward(disc.params, seq, -nn::sigmoid(-l) / nr);
    accumulate(out.grad, eb.param_grad, 1.0);
  }
  for (const auto& seq : fake) {
    const double l = nn::encode_trajectory(disc.params, seq);
    out.fake_term += nn::softplus(l) / nf;
    correct += l < 0 ? 1.0 : (l == 0 ? 0.5 : 0.0);
    nn::EncoderBackwardResult eb = nn::encode_backward(disc.params, seq, nn::sigmoid(l) / nf);
    accumulate(out.grad, eb.param_grad, 1.0);
  }
  out.accuracy = correct / (nr + nf);

  if (r1_lambda > 0) {
    const double coeff = r1_lambda / (2.0 * nr);
    for (const auto& seq : real) {
      ad::Tape t;
      TapedEncoder enc = TapedEncoder::leaves(t, disc.params);
      std::vector<ad::NodeId> inputs;
      ad::NodeId logit = enc.logit(t, seq, &inputs);
      std::vector<std::pair<ad::NodeId, MatrixXd>> seed{{logit, MatrixXd::Ones(1, 1)}};
      std::vector<ad::NodeId> igrads = t.backward(seed, inputs);
      ad::NodeId r1 = t.sum_squares(igrads[0]);
      for (std::size_t k = 1; k < igrads.size(); ++k) r1 = t.add(r1, t.sum_squares(igrads[k]));
      out.r1_term += coeff * t.value(r1)(0, 0);

      std::vector<ad::NodeId> wrt = enc.all();
      std::vector<std::pair<ad::NodeId, MatrixXd>> rseed{{r1, MatrixXd::Ones(1, 1)}};
      std::vector<ad::NodeId> pg = t.backward(rseed, wrt);
      nn::RecurrentEncoderParams g = nn::RecurrentEncoderParams::zeros(
          disc.params.input_dim(), disc.params.hidden_dim());
      g.wz = t.value(pg[0]);
      g.uz = t.value(pg[1]);
      g.wr = t.value(pg[2]);
      g.ur = t.value(pg[3]);
      g.wc = t.value(pg[4]);
      g.uc = t.value(pg[5]);
      g.bz = t.value(pg[6]).col(0);
      g.br = t.value(pg[7]).col(0);
      g.bc = t.value(pg[8]).col(0);
      g.readout_w = t.value(pg[9]).col(0);
      g.readout_b = t.value(pg[10])(0, 0);
      accumulate(out.grad, g, coeff);
    }
  }

  out.loss = out.real_term + out.fake_term + out.r1_term;
  return out;
}

namespace {

// One recorded rollout's contribution (scaled by 1/n) to the adversarial
// generator objective. Emits onto the rollout's tape.
void add_adversarial_term(const Discriminator& disc, mpc::DifferentiableRollout& ro,
                          const std::vector<bool>& mask, double n, GeneratorLoss& out) {
  std::vector<VectorXd> masked = apply_obs_mask(ro.states, mask);
  const double l = nn::encode_trajectory(disc.params, masked);
  out.loss += -nn::softplus(l) / n;

  nn::EncoderBackwardResult eb = nn::encode_backward(disc.params, masked, 1.0);
  const double dl = -nn::sigmoid(l) / n;
  std::vector<MatrixXd> seeds;
  seeds.reserve(ro.states.size());
  for (const VectorXd& ig : eb.input_grad)
    seeds.push_back(MatrixXd(dl * scatter_to_full(ig, mask)));
  mpc::PhiGrad pg = ro.grad(seeds);
  accumulate(out.grad, pg);
}

}  // namespace

GeneratorLoss generator_loss(const Discriminator& disc,
                             std::span<mpc::DifferentiableRollout> rollouts,
                             const std::vector<bool>& mask) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < rollouts.size(); ++i)
    if (rollouts[i].ok) usable.push_back(i);
  if (usable.empty()) {
    std::string why = rollouts.empty() ? "empty batch" : rollouts[0].diagnostic;
    throw std::runtime_error("generator loss: batch fully skipped (" + why + ")");
  }

  GeneratorLoss out;
  out.used = static_cast<int>(usable.size());
  const double n = static_cast<double>(out.used);
  out.grad.params = nn::NetworkParams::zeros(rollouts[usable[0]].cost->spec);
  for (std::size_t id : usable) add_adversarial_term(disc, rollouts[id], mask, n, out);
  return out;
}

namespace {

// One recorded rollout's squared-distance contribution (scaled by 1/n)
// against its paired demonstration. Emits onto the rollout's tape.
void add_l2_term(mpc::DifferentiableRollout& ro, const env::Trajectory& demo,
                 const std::vector<bool>& mask, bool with_actions, double n, L2Loss& out) {
  const std::size_t p = ro.states.size();
  if (demo.states.size() < p || (with_actions && demo.actions.size() + 1 < p))
    throw std::invalid_argument("l2 loss: paired demonstration shorter than the rollout");

  std::vector<MatrixXd> sseeds(p);
  for (std::size_t t = 0; t < p; ++t) {
    if (with_actions) {
      VectorXd d = ro.states[t] - demo.states[t];
      out.loss += d.squaredNorm() / n;
      sseeds[t] = MatrixXd(2.0 / n * d);
    } else {
      std::vector<VectorXd> mg = apply_obs_mask(std::span(&ro.states[t], 1), mask);
      std::vector<VectorXd> md = apply_obs_mask(std::span(&demo.states[t], 1), mask);
      VectorXd d = mg[0] - md[0];
      out.loss += d.squaredNorm() / n;
      sseeds[t] = MatrixXd(2.0 / n * scatter_to_full(d, mask));
    }
  }
  std::vector<MatrixXd> aseeds;
  if (with_actions) {
    aseeds.resize(p - 1);
    for (std::size_t t = 0; t + 1 < p; ++t) {
      VectorXd d = ro.actions[t] - demo.actions[t];
      out.loss += d.squaredNorm() / n;
      aseeds[t] = MatrixXd(2.0 / n * d);
    }
  }
  accumulate(out.grad, ro.grad(sseeds, aseeds));
}

}  // namespace

L2Loss l2_generator_loss(std::span<mpc::DifferentiableRollout> rollouts,
                         std::span<const env::Trajectory* const> paired,
                         const std::vector<bool>& mask, bool with_actions) {
  if (rollouts.size() != paired.size())
    throw std::invalid_argument("l2 loss: one paired demonstration per rollout required");
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < rollouts.size(); ++i)
    if (rollouts[i].ok) usable.push_back(i);
  if (usable.empty()) {
    std::string why = rollouts.empty() ? "empty batch" : rollouts[0].diagnostic;
    throw std::runtime_error("l2 loss: batch fully skipped (" + why + ")");
  }
  const double n = static_cast<double>(usable.size());

  L2Loss out;
  out.used = static_cast<int>(usable.size());
  out.grad.params = nn::NetworkParams::zeros(rollouts[usable[0]].cost->spec);
  for (std::size_t id : usable) add_l2_term(rollouts[id], *paired[id], mask, with_actions, n, out);
  return out;
}

void polyak_update(VectorXd& deployed, const VectorXd& live, double rho) {
  if (deployed.size() != live.size()) throw std::invalid_argument("polyak: shape mismatch");
  if (rho < 0 || rho > 1) throw std::invalid_argument("polyak: rho must lie in [0, 1]");
  deployed = rho * deployed + (1.0 - rho) * live;
}

void polyak_update(mpc::CostModel& deployed, const mpc::CostModel& live, double rho) {
  VectorXd d = deployed.flatten();
  polyak_update(d, live.flatten(), rho);
  deployed.unflatten(d);
}

std::string metrics_csv(std::span<const IterationMetrics> log, bool drop_wall_time) {
  std::string out = "iteration,disc_loss,gen_loss,disc_accuracy,mean_env_reward,buffer_size";
  if (!drop_wall_time) out += ",wall_time_s";
  out += "\n";
  for (const IterationMetrics& m : log) {
    out += std::to_string(m.iteration) + ',' + double_to_string(m.disc_loss) + ',' +
           double_to_string(m.gen_loss) + ',' + double_to_string(m.disc_accuracy) + ',' +
           double_to_string(m.mean_env_reward) + ',' + std::to_string(m.buffer_size);
    if (!drop_wall_time) out += ',' + double_to_string(m.wall_time_s);
    out += "\n";
  }
  return out;
}

TrainState::TrainState(env::Task task, double action_bound, int critic_input_dim, int hidden_dim)
    : dynamics(task),
      bc(task, action_bound),
      predictor(task),
      gen_live(task),
      gen_deployed(task),
      disc(critic_input_dim, hidden_dim) {}

namespace {

models::TrainConfig fit_config(int epochs, double lr, std::uint64_t seed, bool holdout) {
  models::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.adam.learning_rate = lr;
  cfg.seed = seed;
  if (holdout) {
    cfg.holdout_fraction = 0.1;
    cfg.patience = 8;
  }
  return cfg;
}

void init_auxiliary(TrainState& st, const env::TrajectorySet& demos, const GanMpcHyper& h,
                    std::uint64_t seed, bool full) {
  st.bc.init(derive_seed(seed, 3));
  models::train_bc(st.bc, demos, fit_config(h.bc_epochs, h.model_learning_rate,
                                            derive_seed(seed, 4), true));
  if (!full) return;
  st.dynamics.init(derive_seed(seed, 1));
  models::pretrain_dynamics(st.dynamics, demos,
                            fit_config(h.pretrain_epochs, h.model_learning_rate,
                                       derive_seed(seed, 2), false));
  st.predictor.init(derive_seed(seed, 5));
  models::train_next_state(st.predictor, demos,
                           fit_config(h.predictor_epochs, h.model_learning_rate,
                                      derive_seed(seed, 6), true));
  st.gen_live.init(derive_seed(seed, 7));
  st.gen_deployed = st.gen_live;
  st.disc.init(derive_seed(seed, 8));
}

struct DemoBatch {
  std::vector<std::vector<VectorXd>> real;          // truncated state sequences
  std::vector<const env::Trajectory*> paired;       // source of each sequence
};

DemoBatch sample_demo_batch(const env::TrajectorySet& demos, int half_batch, int rollout_states,
                            Rng& rng) {
  DemoBatch b;
  b.real.reserve(half_batch);
  for (int i = 0; i < half_batch; ++i) {
    const env::Trajectory& d = demos[rng.next_below(demos.size())];
    const int p = std::min<int>(rollout_states, static_cast<int>(d.states.size()));
    b.real.emplace_back(d.states.begin(), d.states.begin() + p);
    b.paired.push_back(&d);
  }
  return b;
}

// Value-path rollouts for every batch entry; indices of the ones that
// completed. Entries that diverged are skipped (first diagnostic kept).
std::vector<std::size_t> survey_rollouts(const TrainState& st, const mpc::MpcConfig& cfg,
                                         const DemoBatch& batch,
                                         std::vector<std::vector<VectorXd>>* states_out,
                                         std::string& first_failure) {
  std::vector<std::size_t> usable;
  if (states_out) states_out->clear();
  for (std::size_t i = 0; i < batch.real.size(); ++i) {
    try {
      std::vector<VectorXd> states = mpc::generator_rollout(
          st.live_models(), cfg, batch.real[i][0], static_cast<int>(batch.real[i].size()));
      usable.push_back(i);
      if (states_out) states_out->push_back(std::move(states));
    } catch (const std::runtime_error& e) {
      if (first_failure.empty()) first_failure = e.what();
    }
  }
  return usable;
}

// Tape recording of one surveyed entry. The taped value path repeats the
// plain one operation for operation, so a survey success must record fine.
mpc::DifferentiableRollout record_one(const TrainState& st, const mpc::MpcConfig& cfg,
                                      const DemoBatch& batch, std::size_t id) {
  mpc::DifferentiableRollout ro = mpc::differentiable_rollout(
      st.live_models(), cfg, batch.real[id][0], static_cast<int>(batch.real[id].size()));
  if (!ro.ok)
    throw std::runtime_error("generator rollout diverged on re-record (" + ro.diagnostic + ")");
  return ro;
}

void generator_adam_step(TrainState& st, const mpc::PhiGrad& grad) {
  VectorXd flat = st.gen_live.flatten();
  VectorXd g(flat.size());
  g.head(flat.size() - 2) = grad.params.flatten();
  g[flat.size() - 2] = grad.lambda_eng_raw;
  g[flat.size() - 1] = grad.lambda_lrn_raw;
  if (!nn::adam_step(st.gen_opt, flat, g))
    throw std::runtime_error("generator update: non-finite gradient");
  st.gen_live.unflatten(flat);
}

// Simultaneous-perturbation estimate of the generator gradient; the loss is
// evaluated with plain rollouts against the frozen critic.
GeneratorLoss spsa_generator(const TrainState& st, const GanMpcHyper& hyper,
                             const mpc::MpcConfig& cfg, const std::vector<bool>& mask,
                             const DemoBatch& batch, Rng& rng) {
  const VectorXd phi0 = st.gen_live.flatten();
  auto loss_of = [&](const VectorXd& phi) -> std::pair<double, int> {
    mpc::CostModel cost = st.gen_live;
    cost.unflatten(phi);
    mpc::MpcModels m = st.live_models();
    m.cost = &cost;
    double loss = 0.0;
    int used = 0;
    for (const auto& seq : batch.real) {
      try {
        std::vector<VectorXd> states =
            mpc::generator_rollout(m, cfg, seq[0], static_cast<int>(seq.size()));
        loss += -nn::softplus(st.disc.logit(apply_obs_mask(states, mask)));
        ++used;
      } catch (const std::runtime_error&) {
      }
    }
    return {used > 0 ? loss / used : 0.0, used};
  };

  VectorXd ghat = VectorXd::Zero(phi0.size());
  int samples_used = 0;
  for (int j = 0; j < hyper.spsa_samples; ++j) {
    VectorXd delta(phi0.size());
    for (long i = 0; i < delta.size(); ++i) delta[i] = rng.next_below(2) ? 1.0 : -1.0;
    auto [lp, up] = loss_of(phi0 + hyper.spsa_step * delta);
    auto [lm, um] = loss_of(phi0 - hyper.spsa_step * delta);
    if (up == 0 || um == 0) continue;
    ghat += ((lp - lm) / (2.0 * hyper.spsa_step)) * delta;
    ++samples_used;
  }
  if (samples_used == 0)
    throw std::runtime_error("generator loss: batch fully skipped (perturbed rollouts failed)");
  ghat /= static_cast<double>(samples_used);

  auto [center, used] = loss_of(phi0);
  if (used == 0) throw std::runtime_error("generator loss: batch fully skipped");

  GeneratorLoss out;
  out.loss = center;
  out.used = used;
  out.grad.params = nn::NetworkParams::zeros(st.gen_live.spec);
  VectorXd net = ghat.head(ghat.size() - 2);
  out.grad.params.unflatten(net);
  out.grad.lambda_eng_raw = ghat[ghat.size() - 2];
  out.grad.lambda_lrn_raw = ghat[ghat.size() - 1];
  return out;
}

void adversarial_step(TrainState& st, const GanMpcHyper& hyper, const mpc::MpcConfig& cfg,
                      const std::vector<bool>& mask, const DemoBatch& batch, Rng& spsa_rng,
                      IterationMetrics& m) {
  std::vector<std::vector<VectorXd>> real_masked;
  real_masked.reserve(batch.real.size());
  for (const auto& seq : batch.real) real_masked.push_back(apply_obs_mask(seq, mask));

  const bool unrolled = cfg.generator_grad == mpc::GeneratorGrad::kUnrolled;
  std::vector<std::size_t> usable;
  std::vector<std::vector<VectorXd>> fake_masked;
  std::string first_failure;

  // Critic fakes come from plain value-path rollouts; the generator phase
  // re-records each one on a tape when it needs gradients. Holding a whole
  // batch of tapes at once does not fit in memory at full scale.
  auto build_fakes = [&]() {
    std::vector<std::vector<VectorXd>> states;
    usable = survey_rollouts(st, cfg, batch, &states, first_failure);
    if (usable.empty())
      throw std::runtime_error("generator batch fully skipped (" + first_failure + ")");
    fake_masked.clear();
    fake_masked.reserve(states.size());
    for (const auto& s : states) fake_masked.push_back(apply_obs_mask(s, mask));
  };

  build_fakes();

  DiscriminatorLoss dl;
  for (int s = 0; s < hyper.disc_steps; ++s) {
    dl = discriminator_loss(st.disc, real_masked, fake_masked, hyper.r1_lambda);
    VectorXd flat = st.disc.params.flatten();
    if (!nn::adam_step(st.disc_opt, flat, dl.grad.flatten()))
      throw std::runtime_error("critic update: non-finite gradient");
    st.disc.params.unflatten(flat);
  }
  m.disc_loss = dl.loss;
  m.disc_accuracy = dl.accuracy;

  for (int s = 0; s < hyper.gen_steps; ++s) {
    if (s > 0) build_fakes();  // parameters moved; re-roll
    GeneratorLoss gl;
    if (unrolled) {
      gl.used = static_cast<int>(usable.size());
      const double n = static_cast<double>(gl.used);
      gl.grad.params = nn::NetworkParams::zeros(st.gen_live.spec);
      for (std::size_t id : usable) {
        mpc::DifferentiableRollout ro = record_one(st, cfg, batch, id);
        add_adversarial_term(st.disc, ro, mask, n, gl);
      }
    } else {
      gl = spsa_generator(st, hyper, cfg, mask, batch, spsa_rng);
    }
    generator_adam_step(st, gl.grad);
    m.gen_loss = gl.loss;
  }
  polyak_update(st.gen_deployed, st.gen_live, hyper.polyak_rho);
}

void l2_step(TrainState& st, const GanMpcHyper& hyper, const mpc::MpcConfig& cfg,
             const std::vector<bool>& mask, const DemoBatch& batch, IterationMetrics& m) {
  // Survey pass pins the usable count, then one tape at a time (see
  // adversarial_step for why).
  std::string first_failure;
  std::vector<std::size_t> usable = survey_rollouts(st, cfg, batch, nullptr, first_failure);
  if (usable.empty())
    throw std::runtime_error("l2 batch fully skipped (" + first_failure + ")");

  const bool with_actions = hyper.algorithm == Algorithm::kL2MpcSa;
  L2Loss l2;
  l2.used = static_cast<int>(usable.size());
  l2.grad.params = nn::NetworkParams::zeros(st.gen_live.spec);
  const double n = static_cast<double>(l2.used);
  for (std::size_t id : usable) {
    mpc::DifferentiableRollout ro = record_one(st, cfg, batch, id);
    add_l2_term(ro, *batch.paired[id], mask, with_actions, n, l2);
  }
  generator_adam_step(st, l2.grad);
  st.gen_deployed = st.gen_live;  // direct update, no averaging
  m.gen_loss = l2.loss;
}

TrainState run_loop(const env::EnvSpec& imitator, const env::TrajectorySet& demos,
                    const GanMpcHyper& hyper, const mpc::MpcConfig& mpc_config,
                    std::uint64_t seed, const IterationCallback& on_iteration) {
  const int sd = env::state_dim(imitator.task);
  hyper.validate(sd);
  mpc_config.validate();
  if (demos.empty()) throw std::invalid_argument("training: no demonstrations");

  const std::vector<bool> mask = hyper.resolved_mask(sd);
  TrainState st(imitator.task, imitator.effective_action_bound(), count_true(mask),
                hyper.hidden_dim);
  st.seed = seed;

  try {
    init_auxiliary(st, demos, hyper, seed, /*full=*/true);
    const nn::AdamConfig opt{.learning_rate = hyper.learning_rate,
                             .global_clip_norm = hyper.clip_norm};
    st.disc_opt = nn::AdamState(st.disc.params.num_entries(), opt);
    st.gen_opt = nn::AdamState(st.gen_live.num_learnables(), opt);

    Rng demo_rng(derive_seed(seed, 9));
    Rng spsa_rng(derive_seed(seed, 12));

    for (int n = 0; n < hyper.iterations; ++n) {
      const double t0 = now_seconds();
      IterationMetrics m;

      double reward_sum = 0.0;
      for (int k = 0; k < hyper.rollouts_per_iter; ++k) {
        env::Trajectory tr = env::rollout(
            imitator,
            [&](const VectorXd& s) { return mpc::mpc_policy(st.deployed_models(), mpc_config, s); },
            seed + 10000 + static_cast<std::uint64_t>(n) * hyper.rollouts_per_iter + k,
            imitator.max_steps);
        st.interaction_steps += tr.length();
        reward_sum += tr.total_reward();
        st.buffer.add_trajectory(tr, models::Source::kImitator);
      }
      m.mean_env_reward = reward_sum / hyper.rollouts_per_iter;

      models::finetune_dynamics(st.dynamics, st.buffer,
                                fit_config(hyper.finetune_epochs, hyper.model_learning_rate,
                                           derive_seed(seed, 11, static_cast<std::uint64_t>(n)),
                                           false));

      DemoBatch batch =
          sample_demo_batch(demos, hyper.batch / 2, hyper.rollout_states, demo_rng);

      if (hyper.algorithm == Algorithm::kGanMpc)
        adversarial_step(st, hyper, mpc_config, mask, batch, spsa_rng, m);
      else
        l2_step(st, hyper, mpc_config, mask, batch, m);

      st.iteration = n + 1;
      m.iteration = st.iteration;
      m.buffer_size = st.buffer.size();
      m.wall_time_s = now_seconds() - t0;
      st.log.push_back(m);
      if (on_iteration) on_iteration(st);
    }
  } catch (const std::exception& e) {
    st.error = e.what();
  }
  return st;
}

}  // namespace

TrainState train_gan_mpc(const env::EnvSpec& imitator, const env::TrajectorySet& demos,
                         const GanMpcHyper& hyper, const mpc::MpcConfig& mpc_config,
                         std::uint64_t seed, const IterationCallback& on_iteration) {
  GanMpcHyper h = hyper;
  h.algorithm = Algorithm::kGanMpc;
  return run_loop(imitator, demos, h, mpc_config, seed, on_iteration);
}

TrainState train_l2_mpc(const env::EnvSpec& imitator, const env::TrajectorySet& demos,
                        const GanMpcHyper& hyper, const mpc::MpcConfig& mpc_config,
                        std::uint64_t seed, const IterationCallback& on_iteration) {
  if (hyper.algorithm != Algorithm::kL2MpcSa && hyper.algorithm != Algorithm::kL2MpcS)
    throw std::invalid_argument("train_l2_mpc: algorithm must be a squared-distance variant");
  return run_loop(imitator, demos, hyper, mpc_config, seed, on_iteration);
}

TrainState train_bc(const env::EnvSpec& imitator, const env::TrajectorySet& demos,
                    const GanMpcHyper& hyper, const mpc::MpcConfig& mpc_config,
                    std::uint64_t seed) {
  const int sd = env::state_dim(imitator.task);
  hyper.validate(sd);
  mpc_config.validate();
  if (demos.empty()) throw std::invalid_argument("training: no demonstrations");

  TrainState st(imitator.task, imitator.effective_action_bound(),
                count_true(hyper.resolved_mask(sd)), hyper.hidden_dim);
  st.seed = seed;
  try {
    init_auxiliary(st, demos, hyper, seed, /*full=*/false);
  } catch (const std::exception& e) {
    st.error = e.what();
  }
  return st;
}

TrainState train(const env::EnvSpec& imitator, const env::TrajectorySet& demos,
                 const GanMpcHyper& hyper, const mpc::MpcConfig& mpc_config, std::uint64_t seed,
                 const IterationCallback& on_iteration) {
  switch (hyper.algorithm) {
    case Algorithm::kGanMpc:
      return train_gan_mpc(imitator, demos, hyper, mpc_config, seed, on_iteration);
    case Algorithm::kL2MpcSa:
    case Algorithm::kL2MpcS:
      return train_l2_mpc(imitator, demos, hyper, mpc_config, seed, on_iteration);
    case Algorithm::kBc:
      return train_bc(imitator, demos, hyper, mpc_config, seed);
  }
  throw std::invalid_argument("unknown algorithm");
}

}  // namespace ganmpc::gan
