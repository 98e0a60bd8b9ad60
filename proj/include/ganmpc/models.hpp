#pragma once

#include <deque>
#include <vector>

#include "ganmpc/env.hpp"
#include "ganmpc/nn.hpp"

namespace ganmpc::models {

// Per-dimension affine input scaling, fitted once from demonstration
// statistics and frozen afterwards.
struct Normalizer {
  VectorXd mean;
  VectorXd std;

  static Normalizer identity(int dim);
  static Normalizer fit(const MatrixXd& samples);  // samples are columns

  VectorXd normalize(const VectorXd& x) const;
  MatrixXd normalize_batch(const MatrixXd& x) const;
  int dim() const { return static_cast<int>(mean.size()); }
};

// Rescale every (cos, sin) pair of a state batch back onto the unit circle.
// Exposed because the dynamics and predictor models share it and tests probe
// its Jacobian.
MatrixXd renorm_trig(const std::vector<std::pair<int, int>>& pairs, const MatrixXd& states);
// Chain rule through renorm_trig: `pre` is the input it was given.
MatrixXd renorm_trig_backward(const std::vector<std::pair<int, int>>& pairs, const MatrixXd& pre,
                              const MatrixXd& upstream);

struct TrainConfig {
  int epochs = 200;
  int batch_size = 128;
  nn::AdamConfig adam{.learning_rate = 1e-3};
  double holdout_fraction = 0.0;  // >0 enables early stopping
  int patience = 20;
  std::uint64_t seed = 0;
};

struct TrainStats {
  int epochs_run = 0;
  double first_epoch_loss = 0.0;
  double final_epoch_loss = 0.0;
  double best_holdout_loss = 0.0;
};

// Learned imitator transition model: s' = renorm(s + net(normalize([s;a]))).
struct DynamicsModel {
  explicit DynamicsModel(env::Task task);

  void init(std::uint64_t seed);  // Glorot, then zeroed final layer

  VectorXd predict(const VectorXd& s, const VectorXd& a) const;
  MatrixXd predict_batch(const MatrixXd& states, const MatrixXd& actions) const;

  struct Jacobians {
    MatrixXd ds;  // d s' / d s
    MatrixXd da;  // d s' / d a
  };
  Jacobians jacobians(const VectorXd& s, const VectorXd& a) const;

  env::Task task;
  nn::NetworkSpec spec;
  nn::NetworkParams params;
  Normalizer normalizer;
};

// Behavior-cloning policy: a = bound * tanh(net(s)).
struct BcPolicy {
  BcPolicy(env::Task task, double action_bound);

  void init(std::uint64_t seed);
  VectorXd act(const VectorXd& s) const;
  MatrixXd act_batch(const MatrixXd& states) const;

  env::Task task;
  double action_bound;
  nn::NetworkSpec spec;
  nn::NetworkParams params;
};

// Demonstrator next-state model: s' = renorm(s + net(s)).
struct NextStatePredictor {
  explicit NextStatePredictor(env::Task task);

  void init(std::uint64_t seed);  // Glorot, then zeroed final layer
  VectorXd predict(const VectorXd& s) const;

  env::Task task;
  nn::NetworkSpec spec;
  nn::NetworkParams params;
};

// H-fold composition of the predictor, re-normalizing each step.
VectorXd predict_target(const NextStatePredictor& predictor, const VectorXd& s0, int horizon);

enum class Source { kDemonstrator, kImitator };

struct Transition {
  VectorXd s;
  VectorXd a;
  VectorXd s_next;
  Source source = Source::kImitator;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 100000);

  void add(Transition t);
  void add_trajectory(const env::Trajectory& traj, Source source);

  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& operator[](std::size_t i) const { return data_[i]; }
  std::size_t count(Source source) const;
  std::vector<std::size_t> indices(Source source) const;

 private:
  std::size_t capacity_;
  std::deque<Transition> data_;
};

// Eq-style training objectives, all mean squared error under mini-batch Adam.
TrainStats pretrain_dynamics(DynamicsModel& model, const env::TrajectorySet& demos,
                             const TrainConfig& config);
TrainStats finetune_dynamics(DynamicsModel& model, const ReplayBuffer& buffer,
                             const TrainConfig& config);
TrainStats train_bc(BcPolicy& policy, const env::TrajectorySet& demos, const TrainConfig& config);
TrainStats train_next_state(NextStatePredictor& predictor, const env::TrajectorySet& demos,
                            const TrainConfig& config);

// Empirical losses, for tests and training diagnostics.
double dynamics_mse(const DynamicsModel& model, const env::TrajectorySet& demos);
double bc_mse(const BcPolicy& policy, const env::TrajectorySet& demos);
double next_state_mse(const NextStatePredictor& predictor, const env::TrajectorySet& demos);

}  // namespace ganmpc::models
