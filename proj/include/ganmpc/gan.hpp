#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ganmpc/models.hpp"
#include "ganmpc/mpc.hpp"

namespace ganmpc::gan {

enum class Algorithm { kGanMpc, kL2MpcSa, kL2MpcS, kBc };

std::string algorithm_name(Algorithm a);
Algorithm algorithm_from_name(const std::string& name);

struct GanMpcHyper {
  int pretrain_epochs = 2;     // dynamics epochs on demos before the loop
  int finetune_epochs = 2;     // dynamics epochs per iteration
  int iterations = 10;         // outer loop count
  int rollouts_per_iter = 1;   // environment rollouts appended per iteration
  int batch = 128;             // discriminator batch; half real, half generated
  int rollout_states = 10;     // states per generator rollout fed to the critic
  double learning_rate = 1e-5;
  double polyak_rho = 0.95;
  double r1_lambda = 5.0;
  std::optional<double> clip_norm = 10.0;  // global gradient-norm clip
  int disc_steps = 1;
  int gen_steps = 1;
  int hidden_dim = 64;  // trajectory-critic recurrent width

  // auxiliary-model fitting (behavior cloning, next-state predictor)
  int bc_epochs = 60;
  int predictor_epochs = 60;
  double model_learning_rate = 1e-3;

  // simultaneous-perturbation fallback for the generator step
  int spsa_samples = 4;
  double spsa_step = 1e-3;

  std::vector<bool> obs_mask;  // empty = every state dimension visible
  Algorithm algorithm = Algorithm::kGanMpc;

  void validate(int state_dim) const;
  std::vector<bool> resolved_mask(int state_dim) const;
};

// Projects each state onto the coordinates the critic may observe.
std::vector<VectorXd> apply_obs_mask(std::span<const VectorXd> states,
                                     const std::vector<bool>& mask);

// Recurrent trajectory critic: scans a state sequence and emits one logit.
struct Discriminator {
  Discriminator(int input_dim, int hidden_dim);

  void init(std::uint64_t seed);
  double logit(std::span<const VectorXd> states) const;
  double classify(std::span<const VectorXd> states) const;  // sigmoid(logit)

  nn::RecurrentEncoderParams params;
};

struct DiscriminatorLoss {
  double loss = 0.0;
  double real_term = 0.0;  // -mean log Q(real)
  double fake_term = 0.0;  // -mean log(1 - Q(fake))
  double r1_term = 0.0;    // (r1_lambda/2) * mean_real |d logit / d input|^2
  double accuracy = 0.0;
  nn::RecurrentEncoderParams grad;
};

// Non-saturating logistic loss with an R1 gradient penalty on real samples,
// all computed in logit space. Sequences must already be masked.
DiscriminatorLoss discriminator_loss(const Discriminator& disc,
                                     std::span<const std::vector<VectorXd>> real,
                                     std::span<const std::vector<VectorXd>> fake,
                                     double r1_lambda);

struct GeneratorLoss {
  double loss = 0.0;  // mean log(1 - Q(rollout))
  int used = 0;       // rollouts contributing to the mean
  mpc::PhiGrad grad;
};

// Gradient of the generator objective through the critic into the recorded
// rollouts and back to the cost parameters. Critic and model parameters stay
// frozen. Rollouts that failed to record are skipped.
GeneratorLoss generator_loss(const Discriminator& disc,
                             std::span<mpc::DifferentiableRollout> rollouts,
                             const std::vector<bool>& mask);

struct L2Loss {
  double loss = 0.0;  // mean over the batch of squared trajectory distance
  int used = 0;
  mpc::PhiGrad grad;
};

// Squared-distance generator objective against the paired demo trajectories:
// states only (masked), or full states and actions.
L2Loss l2_generator_loss(std::span<mpc::DifferentiableRollout> rollouts,
                         std::span<const env::Trajectory* const> paired,
                         const std::vector<bool>& mask, bool with_actions);

// deployed <- rho * deployed + (1 - rho) * live, entrywise
void polyak_update(VectorXd& deployed, const VectorXd& live, double rho);
void polyak_update(mpc::CostModel& deployed, const mpc::CostModel& live, double rho);

struct IterationMetrics {
  int iteration = 0;  // 1-based, set after the iteration completes
  double disc_loss = 0.0;
  double gen_loss = 0.0;
  double disc_accuracy = 0.0;
  double mean_env_reward = 0.0;
  std::size_t buffer_size = 0;
  double wall_time_s = 0.0;
};

// header + one row per iteration; drop_wall_time yields a deterministic log
std::string metrics_csv(std::span<const IterationMetrics> log, bool drop_wall_time = false);

struct TrainState {
  TrainState(env::Task task, double action_bound, int critic_input_dim, int hidden_dim);

  int iteration = 0;
  long interaction_steps = 0;  // environment steps taken during training
  models::ReplayBuffer buffer;
  models::DynamicsModel dynamics;
  models::BcPolicy bc;
  models::NextStatePredictor predictor;
  mpc::CostModel gen_live;      // updated by the optimizer
  mpc::CostModel gen_deployed;  // Polyak average; the only parameters rolled out
  Discriminator disc;
  nn::AdamState disc_opt, gen_opt;
  std::uint64_t seed = 0;
  std::vector<IterationMetrics> log;
  std::string error;  // non-empty: training aborted, fields hold the checkpoint

  mpc::MpcModels deployed_models() const { return {&dynamics, &gen_deployed, &bc, &predictor}; }
  mpc::MpcModels live_models() const { return {&dynamics, &gen_live, &bc, &predictor}; }
};

// Invoked after every completed training iteration (metrics already logged);
// lets callers checkpoint incrementally.
using IterationCallback = std::function<void(const TrainState&)>;

// Full adversarial training loop: environment rollouts with the deployed
// policy, dynamics fine-tuning, critic and generator updates with Polyak
// averaging of the deployed parameters.
TrainState train_gan_mpc(const env::EnvSpec& imitator, const env::TrajectorySet& demos,
                         const GanMpcHyper& hyper, const mpc::MpcConfig& mpc_config,
                         std::uint64_t seed, const IterationCallback& on_iteration = {});

// Same loop with the adversarial steps replaced by one squared-distance
// generator update against the paired demo trajectory (states only, or states
// and actions). Direct updates, no critic, no Polyak averaging.
TrainState train_l2_mpc(const env::EnvSpec& imitator, const env::TrajectorySet& demos,
                        const GanMpcHyper& hyper, const mpc::MpcConfig& mpc_config,
                        std::uint64_t seed, const IterationCallback& on_iteration = {});

// Behavior cloning only: fits the auxiliary models from demos, no environment
// interaction, no adversarial loop.
TrainState train_bc(const env::EnvSpec& imitator, const env::TrajectorySet& demos,
                    const GanMpcHyper& hyper, const mpc::MpcConfig& mpc_config,
                    std::uint64_t seed);

// Dispatch on hyper.algorithm.
TrainState train(const env::EnvSpec& imitator, const env::TrajectorySet& demos,
                 const GanMpcHyper& hyper, const mpc::MpcConfig& mpc_config, std::uint64_t seed,
                 const IterationCallback& on_iteration = {});

}  // namespace ganmpc::gan
