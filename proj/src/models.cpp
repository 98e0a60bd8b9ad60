#include "ganmpc/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ganmpc::models {
namespace {

constexpr double kStdFloor = 1e-8;

MatrixXd gather_cols(const MatrixXd& m, const std::vector<int>& idx, int begin, int end) {
  MatrixXd out(m.rows(), end - begin);
  for (int j = begin; j < end; ++j) out.col(j - begin) = m.col(idx[j]);
  return out;
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::size_t j = rng.next_below(i);
    std::swap(idx[i - 1], idx[j]);
  }
}

struct Dataset {
  MatrixXd inputs;   // network inputs, one column per sample
  MatrixXd bases;    // residual bases; empty when the map is not residual
  MatrixXd targets;
};

// Maps raw network outputs to predictions and provides the gradient of
// mean squared error with respect to the raw outputs.
struct OutputMap {
  std::function<MatrixXd(const MatrixXd& raw, const MatrixXd& bases)> predict;
  std::function<MatrixXd(const MatrixXd& pred, const MatrixXd& raw, const MatrixXd& bases,
                         const MatrixXd& targets)>
      grad;
};

double mse_of(const MatrixXd& pred, const MatrixXd& targets) {
  return (pred - targets).squaredNorm() / pred.cols();
}

TrainStats run_training(const nn::NetworkSpec& spec, nn::NetworkParams& params,
                        const Dataset& data, const TrainConfig& cfg, const OutputMap& map) {
  const int total = static_cast<int>(data.inputs.cols());
  if (total == 0) throw std::runtime_error("training: empty dataset");
  if (cfg.batch_size < 1) throw std::runtime_error("training: batch_size must be >= 1");

  TrainStats stats;
  if (cfg.epochs == 0) return stats;

  std::vector<int> perm(total);
  for (int i = 0; i < total; ++i) perm[i] = i;
  Rng split_rng(derive_seed(cfg.seed, fnv1a("split")));
  shuffle_indices(perm, split_rng);

  int n_hold = static_cast<int>(total * cfg.holdout_fraction);
  if (n_hold >= total) n_hold = total - 1;
  const bool has_bases = data.bases.size() > 0;

  Dataset hold, train;
  hold.inputs = gather_cols(data.inputs, perm, 0, n_hold);
  train.inputs = gather_cols(data.inputs, perm, n_hold, total);
  hold.targets = gather_cols(data.targets, perm, 0, n_hold);
  train.targets = gather_cols(data.targets, perm, n_hold, total);
  if (has_bases) {
    hold.bases = gather_cols(data.bases, perm, 0, n_hold);
    train.bases = gather_cols(data.bases, perm, n_hold, total);
  }
  const int n_train = static_cast<int>(train.inputs.cols());

  auto holdout_loss = [&]() {
    MatrixXd raw = nn::forward_batch(spec, params, hold.inputs);
    return mse_of(map.predict(raw, hold.bases), hold.targets);
  };

  VectorXd flat = params.flatten();
  nn::AdamState adam(flat.size(), cfg.adam);

  VectorXd best_flat = flat;
  double best_hold = n_hold > 0 ? holdout_loss() : 0.0;
  int since_best = 0;

  std::vector<int> order(n_train);
  for (int i = 0; i < n_train; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng(derive_seed(cfg.seed, fnv1a("epoch"), epoch));
    shuffle_indices(order, epoch_rng);

    double loss_sum = 0.0;
    for (int start = 0; start < n_train; start += cfg.batch_size) {
      int stop = std::min(start + cfg.batch_size, n_train);
      MatrixXd bx = gather_cols(train.inputs, order, start, stop);
      MatrixXd bt = gather_cols(train.targets, order, start, stop);
      MatrixXd bb = has_bases ? gather_cols(train.bases, order, start, stop) : MatrixXd();

      nn::ForwardCache cache;
      MatrixXd raw = nn::forward_cached(spec, params, bx, cache);
      MatrixXd pred = map.predict(raw, bb);
      loss_sum += (pred - bt).squaredNorm();

      MatrixXd upstream = map.grad(pred, raw, bb, bt);
      nn::BackwardResult back = nn::backward_from_cache(spec, params, cache, upstream);
      if (nn::adam_step(adam, flat, back.param_grad.flatten())) params.unflatten(flat);
    }

    double epoch_loss = loss_sum / n_train;
    if (epoch == 0) stats.first_epoch_loss = epoch_loss;
    stats.final_epoch_loss = epoch_loss;
    stats.epochs_run = epoch + 1;

    if (n_hold > 0) {
      double h = holdout_loss();
      if (h < best_hold - 1e-12) {
        best_hold = h;
        best_flat = flat;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    }
  }

  if (n_hold > 0) {
    params.unflatten(best_flat);
    stats.best_holdout_loss = best_hold;
  }
  return stats;
}

nn::NetworkSpec dense_spec(int in, int hidden, int out) {
  return nn::NetworkSpec({in, hidden, hidden, hidden, out}, nn::Activation::kRelu);
}

void zero_final_layer(nn::NetworkParams& params) {
  params.w.back().setZero();
  params.b.back().setZero();
}

OutputMap residual_map(const std::vector<std::pair<int, int>>& pairs) {
  OutputMap map;
  map.predict = [pairs](const MatrixXd& raw, const MatrixXd& bases) {
    return renorm_trig(pairs, bases + raw);
  };
  map.grad = [pairs](const MatrixXd& pred, const MatrixXd& raw, const MatrixXd& bases,
                     const MatrixXd& targets) {
    MatrixXd up = (2.0 / pred.cols()) * (pred - targets);
    return renorm_trig_backward(pairs, bases + raw, up);
  };
  return map;
}

OutputMap tanh_map(double bound) {
  OutputMap map;
  map.predict = [bound](const MatrixXd& raw, const MatrixXd&) {
    return bound * raw.array().tanh().matrix();
  };
  map.grad = [bound](const MatrixXd& pred, const MatrixXd&, const MatrixXd&,
                     const MatrixXd& targets) {
    // d pred / d raw = bound * (1 - tanh^2) with tanh = pred / bound
    Eigen::ArrayXXd t = pred.array() / bound;
    Eigen::ArrayXXd chain = bound * (1.0 - t.square());
    return (((2.0 / pred.cols()) * (pred - targets)).array() * chain).matrix();
  };
  return map;
}

Dataset dynamics_dataset(const env::TrajectorySet& demos) {
  long count = 0;
  for (const auto& t : demos) count += t.length();
  if (count == 0) throw std::runtime_error("dynamics training: no transitions");
  int sd = static_cast<int>(demos.front().states.front().size());
  int ad = static_cast<int>(demos.front().actions.front().size());
  Dataset data;
  data.inputs.resize(sd + ad, count);
  data.bases.resize(sd, count);
  data.targets.resize(sd, count);
  long k = 0;
  for (const auto& t : demos) {
    for (int i = 0; i < t.length(); ++i, ++k) {
      data.inputs.col(k).head(sd) = t.states[i];
      data.inputs.col(k).tail(ad) = t.actions[i];
      data.bases.col(k) = t.states[i];
      data.targets.col(k) = t.states[i + 1];
    }
  }
  return data;
}

Dataset state_pair_dataset(const env::TrajectorySet& demos) {
  long count = 0;
  for (const auto& t : demos) {
    if (t.states.size() < 2) throw std::runtime_error("next-state training: trajectory too short");
    count += static_cast<long>(t.states.size()) - 1;
  }
  if (count == 0) throw std::runtime_error("next-state training: no state pairs");
  int sd = static_cast<int>(demos.front().states.front().size());
  Dataset data;
  data.inputs.resize(sd, count);
  data.bases.resize(sd, count);
  data.targets.resize(sd, count);
  long k = 0;
  for (const auto& t : demos) {
    for (std::size_t i = 0; i + 1 < t.states.size(); ++i, ++k) {
      data.inputs.col(k) = t.states[i];
      data.bases.col(k) = t.states[i];
      data.targets.col(k) = t.states[i + 1];
    }
  }
  return data;
}

Dataset bc_dataset(const env::TrajectorySet& demos) {
  long count = 0;
  for (const auto& t : demos) count += t.length();
  if (count == 0) throw std::runtime_error("behavior cloning: demos contain no actions");
  int sd = static_cast<int>(demos.front().states.front().size());
  int ad = static_cast<int>(demos.front().actions.front().size());
  Dataset data;
  data.inputs.resize(sd, count);
  data.targets.resize(ad, count);
  long k = 0;
  for (const auto& t : demos) {
    for (int i = 0; i < t.length(); ++i, ++k) {
      data.inputs.col(k) = t.states[i];
      data.targets.col(k) = t.actions[i];
    }
  }
  return data;
}

}  // namespace

Normalizer Normalizer::identity(int dim) {
  Normalizer n;
  n.mean = VectorXd::Zero(dim);
  n.std = VectorXd::Ones(dim);
  return n;
}

Normalizer Normalizer::fit(const MatrixXd& samples) {
  if (samples.cols() == 0) throw std::runtime_error("normalizer: no samples");
  Normalizer n;
  n.mean = samples.rowwise().mean();
  MatrixXd centered = samples.colwise() - n.mean;
  n.std = (centered.array().square().rowwise().mean()).sqrt().matrix();
  n.std = n.std.cwiseMax(kStdFloor);
  return n;
}

VectorXd Normalizer::normalize(const VectorXd& x) const {
  return (x - mean).cwiseQuotient(std);
}

MatrixXd Normalizer::normalize_batch(const MatrixXd& x) const {
  return (x.colwise() - mean).array().colwise() / std.array();
}

MatrixXd renorm_trig(const std::vector<std::pair<int, int>>& pairs, const MatrixXd& states) {
  MatrixXd out = states;
  for (auto [ci, si] : pairs) {
    for (long j = 0; j < out.cols(); ++j) {
      double c = out(ci, j), s = out(si, j);
      double n = std::sqrt(c * c + s * s);
      if (n > 0.0) {
        out(ci, j) = c / n;
        out(si, j) = s / n;
      }
    }
  }
  return out;
}

MatrixXd renorm_trig_backward(const std::vector<std::pair<int, int>>& pairs, const MatrixXd& pre,
                              const MatrixXd& upstream) {
  MatrixXd out = upstream;
  for (auto [ci, si] : pairs) {
    for (long j = 0; j < out.cols(); ++j) {
      double c = pre(ci, j), s = pre(si, j);
      double n2 = c * c + s * s;
      if (n2 > 0.0) {
        double n3 = n2 * std::sqrt(n2);
        double uc = upstream(ci, j), us = upstream(si, j);
        out(ci, j) = (s * s * uc - c * s * us) / n3;
        out(si, j) = (c * c * us - c * s * uc) / n3;
      }
    }
  }
  return out;
}

DynamicsModel::DynamicsModel(env::Task task_)
    : task(task_),
      spec(dense_spec(env::state_dim(task_) + env::action_dim(task_), 200, env::state_dim(task_))),
      params(nn::NetworkParams::zeros(spec)),
      normalizer(Normalizer::identity(env::state_dim(task_) + env::action_dim(task_))) {}

void DynamicsModel::init(std::uint64_t seed) {
  params = nn::glorot_init(spec, seed);
  zero_final_layer(params);
}

VectorXd DynamicsModel::predict(const VectorXd& s, const VectorXd& a) const {
  MatrixXd ss(s.size(), 1), aa(a.size(), 1);
  ss.col(0) = s;
  aa.col(0) = a;
  return predict_batch(ss, aa).col(0);
}

MatrixXd DynamicsModel::predict_batch(const MatrixXd& states, const MatrixXd& actions) const {
  MatrixXd x(states.rows() + actions.rows(), states.cols());
  x.topRows(states.rows()) = states;
  x.bottomRows(actions.rows()) = actions;
  MatrixXd delta = nn::forward_batch(spec, params, normalizer.normalize_batch(x));
  return renorm_trig(env::trig_pairs(task), states + delta);
}

DynamicsModel::Jacobians DynamicsModel::jacobians(const VectorXd& s, const VectorXd& a) const {
  const int sd = static_cast<int>(s.size());
  const int ad = static_cast<int>(a.size());
  VectorXd x(sd + ad);
  x << s, a;
  VectorXd xn = normalizer.normalize(x);

  // one backward pass per output row via an identity upstream over a
  // replicated batch
  MatrixXd rep(sd + ad, sd);
  for (int j = 0; j < sd; ++j) rep.col(j) = xn;
  nn::BackwardResult back = nn::backward(spec, params, rep, MatrixXd::Identity(sd, sd));
  MatrixXd net_jac = back.input_grad.transpose();  // sd x (sd+ad), w.r.t. normalized input
  net_jac = net_jac * normalizer.std.cwiseInverse().asDiagonal();

  VectorXd delta = nn::forward(spec, params, xn);
  VectorXd pre = s + delta;
  MatrixXd j_pre_s = MatrixXd::Identity(sd, sd) + net_jac.leftCols(sd);
  MatrixXd j_pre_a = net_jac.rightCols(ad);

  // renorm Jacobian: identity outside the trig pairs
  MatrixXd j_renorm = MatrixXd::Identity(sd, sd);
  for (auto [ci, si] : env::trig_pairs(task)) {
    double c = pre[ci], sv = pre[si];
    double n2 = c * c + sv * sv;
    double n3 = n2 * std::sqrt(n2);
    j_renorm(ci, ci) = sv * sv / n3;
    j_renorm(ci, si) = -c * sv / n3;
    j_renorm(si, ci) = -c * sv / n3;
    j_renorm(si, si) = c * c / n3;
  }

  Jacobians jac;
  jac.ds = j_renorm * j_pre_s;
  jac.da = j_renorm * j_pre_a;
  return jac;
}

BcPolicy::BcPolicy(env::Task task_, double action_bound_)
    : task(task_),
      action_bound(action_bound_),
      spec(dense_spec(env::state_dim(task_), 128, env::action_dim(task_))),
      params(nn::NetworkParams::zeros(spec)) {
  if (action_bound <= 0) throw std::invalid_argument("BcPolicy: action bound must be positive");
}

void BcPolicy::init(std::uint64_t seed) { params = nn::glorot_init(spec, seed); }

VectorXd BcPolicy::act(const VectorXd& s) const {
  return action_bound * nn::forward(spec, params, s).array().tanh().matrix();
}

MatrixXd BcPolicy::act_batch(const MatrixXd& states) const {
  return action_bound * nn::forward_batch(spec, params, states).array().tanh().matrix();
}

NextStatePredictor::NextStatePredictor(env::Task task_)
    : task(task_),
      spec(dense_spec(env::state_dim(task_), 128, env::state_dim(task_))),
      params(nn::NetworkParams::zeros(spec)) {}

void NextStatePredictor::init(std::uint64_t seed) {
  params = nn::glorot_init(spec, seed);
  zero_final_layer(params);
}

VectorXd NextStatePredictor::predict(const VectorXd& s) const {
  MatrixXd ss(s.size(), 1);
  ss.col(0) = s;
  MatrixXd delta = nn::forward_batch(spec, params, ss);
  return renorm_trig(env::trig_pairs(task), ss + delta).col(0);
}

VectorXd predict_target(const NextStatePredictor& predictor, const VectorXd& s0, int horizon) {
  if (horizon < 1) throw std::invalid_argument("predict_target: horizon must be >= 1");
  VectorXd s = s0;
  for (int k = 0; k < horizon; ++k) {
    s = predictor.predict(s);
    if (!all_finite(s)) throw std::runtime_error("predict_target: non-finite prediction");
  }
  return s;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("replay buffer: capacity must be positive");
}

void ReplayBuffer::add(Transition t) {
  if (!all_finite(t.s) || !all_finite(t.a) || !all_finite(t.s_next))
    throw std::runtime_error("replay buffer: non-finite transition");
  if (data_.size() == capacity_) data_.pop_front();
  data_.push_back(std::move(t));
}

void ReplayBuffer::add_trajectory(const env::Trajectory& traj, Source source) {
  for (int i = 0; i < traj.length(); ++i)
    add({traj.states[i], traj.actions[i], traj.states[i + 1], source});
}

std::size_t ReplayBuffer::count(Source source) const {
  std::size_t n = 0;
  for (const auto& t : data_) n += t.source == source ? 1 : 0;
  return n;
}

std::vector<std::size_t> ReplayBuffer::indices(Source source) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data_.size(); ++i)
    if (data_[i].source == source) out.push_back(i);
  return out;
}

TrainStats pretrain_dynamics(DynamicsModel& model, const env::TrajectorySet& demos,
                             const TrainConfig& config) {
  if (demos.empty()) throw std::runtime_error("pretrain_dynamics: no demonstrations");
  Dataset data = dynamics_dataset(demos);
  model.normalizer = Normalizer::fit(data.inputs);
  data.inputs = model.normalizer.normalize_batch(data.inputs);
  return run_training(model.spec, model.params, data, config,
                      residual_map(env::trig_pairs(model.task)));
}

TrainStats finetune_dynamics(DynamicsModel& model, const ReplayBuffer& buffer,
                             const TrainConfig& config) {
  auto idx = buffer.indices(Source::kImitator);
  if (idx.empty()) throw std::runtime_error("finetune_dynamics: no imitator transitions");
  const int sd = static_cast<int>(buffer[idx[0]].s.size());
  const int ad = static_cast<int>(buffer[idx[0]].a.size());
  Dataset data;
  data.inputs.resize(sd + ad, idx.size());
  data.bases.resize(sd, idx.size());
  data.targets.resize(sd, idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Transition& t = buffer[idx[k]];
    data.inputs.col(k).head(sd) = t.s;
    data.inputs.col(k).tail(ad) = t.a;
    data.bases.col(k) = t.s;
    data.targets.col(k) = t.s_next;
  }
  data.inputs = model.normalizer.normalize_batch(data.inputs);  // frozen statistics
  return run_training(model.spec, model.params, data, config,
                      residual_map(env::trig_pairs(model.task)));
}

TrainStats train_bc(BcPolicy& policy, const env::TrajectorySet& demos, const TrainConfig& config) {
  if (demos.empty()) throw std::runtime_error("train_bc: no demonstrations");
  for (const auto& t : demos)
    if (t.actions.empty()) throw std::runtime_error("train_bc: demos lack actions");
  return run_training(policy.spec, policy.params, bc_dataset(demos), config,
                      tanh_map(policy.action_bound));
}

TrainStats train_next_state(NextStatePredictor& predictor, const env::TrajectorySet& demos,
                            const TrainConfig& config) {
  if (demos.empty()) throw std::runtime_error("train_next_state: no demonstrations");
  return run_training(predictor.spec, predictor.params, state_pair_dataset(demos), config,
                      residual_map(env::trig_pairs(predictor.task)));
}

double dynamics_mse(const DynamicsModel& model, const env::TrajectorySet& demos) {
  Dataset data = dynamics_dataset(demos);
  MatrixXd pred = model.predict_batch(data.bases, data.inputs.bottomRows(
                                                      data.inputs.rows() - data.bases.rows()));
  return mse_of(pred, data.targets);
}

double bc_mse(const BcPolicy& policy, const env::TrajectorySet& demos) {
  Dataset data = bc_dataset(demos);
  return mse_of(policy.act_batch(data.inputs), data.targets);
}

double next_state_mse(const NextStatePredictor& predictor, const env::TrajectorySet& demos) {
  Dataset data = state_pair_dataset(demos);
  MatrixXd pred(data.targets.rows(), data.targets.cols());
  for (long j = 0; j < data.inputs.cols(); ++j) pred.col(j) = predictor.predict(data.inputs.col(j));
  return mse_of(pred, data.targets);
}

}  // namespace ganmpc::models
