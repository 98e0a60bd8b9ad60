#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "ganmpc/util.hpp"

namespace ganmpc::env {

enum class Task { kPendulumSwingup, kCartpoleBalance };

// Scale factors on the demonstrator's physical constants. (1,1,1) is the
// demonstrator itself.
struct PhysicalParams {
  double pole_mass_scale = 1.0;
  double cart_mass_scale = 1.0;
  double cart_dim_scale = 1.0;  // pole length (and cart size) multiplier

  bool is_demonstrator() const {
    return pole_mass_scale == 1.0 && cart_mass_scale == 1.0 && cart_dim_scale == 1.0;
  }
  bool operator==(const PhysicalParams&) const = default;
};

struct EnvSpec {
  Task task = Task::kPendulumSwingup;
  PhysicalParams physical;
  double control_dt = 0.02;
  int substeps = 2;
  int max_steps = 500;
  double action_bound = 0.0;        // 0 selects the task default
  double pendulum_damping = 0.1;    // N m s, demonstrator value
  // reset distribution half-widths
  double pendulum_reset_angle_halfwidth = 0.1;   // about hanging (theta = pi)
  double cartpole_reset_angle_halfwidth = 0.05;  // about upright
  double cartpole_reset_pos_halfwidth = 0.1;
  std::uint64_t seed = 0;

  double effective_action_bound() const;
};

EnvSpec make_spec(Task task, PhysicalParams physical = {});

// State layout: pendulum (cos th, sin th, th_dot) with th = 0 upright;
// cartpole (x, cos th, sin th, x_dot, th_dot).
int state_dim(Task task);
int action_dim(Task task);
// Indices of (cos, sin) pairs that must stay on the unit circle.
std::vector<std::pair<int, int>> trig_pairs(Task task);

struct Trajectory {
  std::vector<VectorXd> states;   // length T+1
  std::vector<VectorXd> actions;  // length T
  std::vector<double> rewards;    // length T

  int length() const { return static_cast<int>(actions.size()); }
  double total_reward() const;
  void validate() const;
};

using TrajectorySet = std::vector<Trajectory>;

VectorXd reset(const EnvSpec& spec, std::uint64_t seed);

std::pair<VectorXd, double> step(const EnvSpec& spec, const VectorXd& state,
                                 const VectorXd& action);

// Shaped reward in [0,1]: 1 inside [lo,hi], Gaussian falloff outside, worth
// 0.1 at distance `margin` from the interval.
double reward_tolerance(double x, double lo, double hi, double margin);

double reward_for_state(const EnvSpec& spec, const VectorXd& state);

// Continuous-time accelerations, exposed for linearization and tests.
double pendulum_theta_accel(const EnvSpec& spec, double theta, double theta_dot, double torque);
std::pair<double, double> cartpole_accels(const EnvSpec& spec, double theta, double theta_dot,
                                          double force);  // (x_ddot, theta_ddot)

// Scripted demonstrator policy. Only valid for PhysicalParams (1,1,1).
VectorXd expert_action(const EnvSpec& spec, const VectorXd& state);

// Minimum acceptable mean per-step reward for the scripted expert, frozen
// from measured closed-loop performance. Demo collection refuses experts
// below this floor.
double expert_reward_floor(Task task);

using Policy = std::function<VectorXd(const VectorXd&)>;

Trajectory rollout(const EnvSpec& spec, const Policy& policy, std::uint64_t seed, int max_len);

}  // namespace ganmpc::env
