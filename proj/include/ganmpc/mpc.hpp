#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ganmpc/models.hpp"
#include "ganmpc/tape.hpp"

namespace ganmpc::mpc {

// Bounding applied to the executed action in the differentiable generator
// path. The plain policy path always hard-clamps.
enum class SquashMode { kTanh, kHardClamp };

// How generator gradients are obtained: reverse-mode through the truncated
// unrolled solver, or simultaneous-perturbation estimation.
enum class GeneratorGrad { kUnrolled, kSpsa };

struct MpcConfig {
  int horizon = 10;  // H: states per solve; H-1 actions
  double gamma = 1.0;
  int max_ilqr_iters = 10;
  int unroll_iters = 2;
  double mu_init = 1e-6;
  double mu_factor = 10.0;
  double mu_max = 1e6;
  std::vector<double> line_search_alphas = {1.0, 0.5, 0.25, 0.125, 0.0625};
  double convergence_tol = 1e-6;  // absolute cost improvement
  double action_bound = 0.0;      // <= 0 leaves actions unbounded
  SquashMode squash = SquashMode::kTanh;
  GeneratorGrad generator_grad = GeneratorGrad::kUnrolled;

  void validate() const;
};

// Control-effort staging cost plus a learnable terminal cost: an engineered
// quadratic distance to the predicted target state and a network term, mixed
// by two softplus-reparameterized scalars that train along with the network.
struct CostModel {
  explicit CostModel(env::Task task);

  void init(std::uint64_t seed);

  double c_a = 0.01;
  double lambda_eng_raw = 0.0;
  double lambda_lrn_raw = 0.0;
  env::Task task;
  nn::NetworkSpec spec;
  nn::NetworkParams params;

  // learnables in one vector: network entries, then the two mix logits
  long num_learnables() const;
  VectorXd flatten() const;
  void unflatten(const VectorXd& flat);
};

double staging_cost(const CostModel& cost, const VectorXd& s, const VectorXd& a, int t);
double terminal_cost(const CostModel& cost, const VectorXd& s_H, const VectorXd& s_target);

struct TermQuad {
  VectorXd ms;   // gradient w.r.t. s_H
  MatrixXd mss;  // positive semi-definite curvature estimate
};
TermQuad terminal_quad(const CostModel& cost, const VectorXd& s_H, const VectorXd& s_target);

struct StageQuad {
  VectorXd ls, la;
  MatrixXd lss, laa, las;
};

// Callable adapters so tests can inject analytic dynamics and costs.
struct DynamicsInterface {
  std::function<VectorXd(const VectorXd& s, const VectorXd& a)> predict;
  std::function<std::pair<MatrixXd, MatrixXd>(const VectorXd& s, const VectorXd& a)> jacobians;
};
struct CostInterface {
  std::function<double(const VectorXd& s, const VectorXd& a, int t)> stage_value;
  std::function<StageQuad(const VectorXd& s, const VectorXd& a, int t)> stage_quad;
  std::function<double(const VectorXd& s)> term_value;
  std::function<TermQuad(const VectorXd& s)> term_quad;
};

DynamicsInterface make_dynamics_interface(const models::DynamicsModel& model);
CostInterface make_cost_interface(const CostModel& cost, const VectorXd& s_target);

struct IlqrSolution {
  std::vector<VectorXd> actions;  // H-1 entries, clamped to the action bound
  std::vector<VectorXd> states;   // H entries, nominal rollout of the solve
  std::vector<double> cost_trace;  // initial cost, then one entry per accepted iteration
  bool converged = false;
  double mu_final = 0.0;
  int iterations = 0;
};

IlqrSolution ilqr_solve(const DynamicsInterface& dyn, const CostInterface& cost,
                        const MpcConfig& config, const VectorXd& s0,
                        const std::vector<VectorXd>& initial_guess);

std::string trace_to_json(const IlqrSolution& solution);

struct MpcModels {
  const models::DynamicsModel* dynamics = nullptr;
  const CostModel* cost = nullptr;
  const models::BcPolicy* bc = nullptr;
  const models::NextStatePredictor* predictor = nullptr;
};

// Full receding-horizon solve at one state: target from the next-state
// predictor iterated over the horizon, initial guess from the cloned policy
// rolled under the learned dynamics.
IlqrSolution mpc_solve(const MpcModels& m, const MpcConfig& config, const VectorXd& s);

// First action of mpc_solve, hard-clamped.
VectorXd mpc_policy(const MpcModels& m, const MpcConfig& config, const VectorXd& s);

// States from chaining truncated solves under the learned dynamics; the value
// path of differentiable_rollout (honors config.squash and unroll_iters).
std::vector<VectorXd> generator_rollout(const MpcModels& m, const MpcConfig& config,
                                        const VectorXd& s0, int num_states);

// Same rollout with the executed actions alongside the states.
struct GeneratorPath {
  std::vector<VectorXd> states;   // num_states entries
  std::vector<VectorXd> actions;  // num_states - 1 entries
};
GeneratorPath generator_path(const MpcModels& m, const MpcConfig& config, const VectorXd& s0,
                             int num_states);

struct PhiGrad {
  nn::NetworkParams params;
  double lambda_eng_raw = 0.0;
  double lambda_lrn_raw = 0.0;
};

// A recorded generator rollout: states plus the tape that produced them, so a
// scalar loss on the states yields gradients for the cost parameters. The
// dynamics, cloned policy, and predictor parameters are constants here.
struct DifferentiableRollout {
  bool ok = false;
  std::string diagnostic;
  std::vector<VectorXd> states;
  std::vector<VectorXd> actions;  // executed actions, states.size() - 1 entries
  ad::Tape tape;
  std::vector<ad::NodeId> state_nodes;
  std::vector<ad::NodeId> action_nodes;
  std::vector<ad::NodeId> phi_w, phi_b;
  ad::NodeId lambda_eng_node = -1;
  ad::NodeId lambda_lrn_node = -1;
  const CostModel* cost = nullptr;

  // `state_seeds[k]` is d loss / d states[k]; `action_seeds` (optional) is
  // d loss / d actions[k]. Emits onto the tape.
  PhiGrad grad(std::span<const MatrixXd> state_seeds,
               std::span<const MatrixXd> action_seeds = {});
};

DifferentiableRollout differentiable_rollout(const MpcModels& m, const MpcConfig& config,
                                             const VectorXd& s0, int num_states);

}  // namespace ganmpc::mpc
