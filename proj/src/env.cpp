#include "ganmpc/env.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <tuple>

namespace ganmpc::env {
namespace {

constexpr double kGravity = 9.81;

// Demonstrator constants. PhysicalParams scales these.
constexpr double kPendulumMass = 1.0;
constexpr double kPendulumLength = 0.5;
constexpr double kPendulumBound = 2.0;

constexpr double kCartMass = 1.0;
constexpr double kPoleMass = 0.1;
constexpr double kPoleHalfLength = 0.5;
constexpr double kCartpoleBound = 10.0;

double wrap_angle(double theta) {
  theta = std::fmod(theta + M_PI, 2.0 * M_PI);
  if (theta < 0) theta += 2.0 * M_PI;
  return theta - M_PI;
}

double clamp(double v, double bound) { return std::clamp(v, -bound, bound); }

// Internal coordinates: pendulum (theta, theta_dot), cartpole
// (x, theta, x_dot, theta_dot). theta = 0 is upright for both.
VectorXd to_internal(Task task, const VectorXd& state) {
  if (task == Task::kPendulumSwingup) {
    VectorXd y(2);
    y << std::atan2(state[1], state[0]), state[2];
    return y;
  }
  VectorXd y(4);
  y << state[0], std::atan2(state[2], state[1]), state[3], state[4];
  return y;
}

VectorXd to_embedded(Task task, const VectorXd& y) {
  if (task == Task::kPendulumSwingup) {
    VectorXd s(3);
    s << std::cos(y[0]), std::sin(y[0]), y[1];
    return s;
  }
  VectorXd s(5);
  s << y[0], std::cos(y[1]), std::sin(y[1]), y[2], y[3];
  return s;
}

VectorXd derivatives(const EnvSpec& spec, const VectorXd& y, double u) {
  if (spec.task == Task::kPendulumSwingup) {
    VectorXd dy(2);
    dy << y[1], pendulum_theta_accel(spec, y[0], y[1], u);
    return dy;
  }
  auto [x_ddot, theta_ddot] = cartpole_accels(spec, y[1], y[3], u);
  VectorXd dy(4);
  dy << y[2], y[3], x_ddot, theta_ddot;
  return dy;
}

VectorXd rk4_step(const EnvSpec& spec, const VectorXd& y, double u, double h) {
  VectorXd k1 = derivatives(spec, y, u);
  VectorXd k2 = derivatives(spec, y + 0.5 * h * k1, u);
  VectorXd k3 = derivatives(spec, y + 0.5 * h * k2, u);
  VectorXd k4 = derivatives(spec, y + h * k3, u);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Discrete-time LQR gain by iterating the Riccati difference equation to a
// fixed point.
Eigen::RowVectorXd dlqr_gain(const MatrixXd& a, const VectorXd& b, const MatrixXd& q, double r) {
  MatrixXd p = q;
  for (int i = 0; i < 100000; ++i) {
    VectorXd pb = p * b;
    double s = r + b.dot(pb);
    MatrixXd ap = a.transpose() * p;
    MatrixXd next = q + ap * a - (ap * b) * (b.transpose() * p * a) / s;
    next = 0.5 * (next + next.transpose());
    if ((next - p).cwiseAbs().maxCoeff() < 1e-12) {
      p = next;
      break;
    }
    p = next;
  }
  VectorXd pb = p * b;
  double s = r + b.dot(pb);
  return (b.transpose() * p * a) / s;
}

struct ExpertGains {
  Eigen::RowVectorXd k;
};

const ExpertGains& expert_gains(const EnvSpec& spec) {
  static std::map<std::tuple<int, double, double>, ExpertGains> cache;
  auto key = std::make_tuple(static_cast<int>(spec.task), spec.control_dt, spec.pendulum_damping);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  double dt = spec.control_dt;
  ExpertGains gains;
  if (spec.task == Task::kPendulumSwingup) {
    double m = kPendulumMass, l = kPendulumLength, b = spec.pendulum_damping;
    MatrixXd ac(2, 2);
    ac << 0, 1, kGravity / l, -b / (m * l * l);
    VectorXd bc(2);
    bc << 0, 1.0 / (m * l * l);
    MatrixXd a = MatrixXd::Identity(2, 2) + dt * ac;
    VectorXd bb = dt * bc;
    MatrixXd q = MatrixXd::Zero(2, 2);
    q.diagonal() << 10.0, 1.0;
    gains.k = dlqr_gain(a, bb, q, 0.5);
  } else {
    double mc = kCartMass, mp = kPoleMass, l = kPoleHalfLength;
    double mt = mc + mp;
    double kappa = 1.0 / (l * (4.0 / 3.0 - mp / mt));
    double a_tt = kappa * kGravity;
    double b_t = -kappa / mt;
    double a_xt = -mp * l * a_tt / mt;
    double b_x = 1.0 / mt + mp * l * kappa / (mt * mt);
    MatrixXd ac = MatrixXd::Zero(4, 4);
    ac(0, 2) = 1;
    ac(1, 3) = 1;
    ac(2, 1) = a_xt;
    ac(3, 1) = a_tt;
    VectorXd bc(4);
    bc << 0, 0, b_x, b_t;
    MatrixXd a = MatrixXd::Identity(4, 4) + dt * ac;
    VectorXd bb = dt * bc;
    MatrixXd q = MatrixXd::Zero(4, 4);
    q.diagonal() << 2.0, 10.0, 0.5, 1.0;
    gains.k = dlqr_gain(a, bb, q, 0.05);
  }
  return cache.emplace(key, std::move(gains)).first->second;
}

}  // namespace

double EnvSpec::effective_action_bound() const {
  if (action_bound > 0) return action_bound;
  return task == Task::kPendulumSwingup ? kPendulumBound : kCartpoleBound;
}

EnvSpec make_spec(Task task, PhysicalParams physical) {
  EnvSpec spec;
  spec.task = task;
  spec.physical = physical;
  return spec;
}

int state_dim(Task task) { return task == Task::kPendulumSwingup ? 3 : 5; }

int action_dim(Task) { return 1; }

std::vector<std::pair<int, int>> trig_pairs(Task task) {
  if (task == Task::kPendulumSwingup) return {{0, 1}};
  return {{1, 2}};
}

double Trajectory::total_reward() const {
  double sum = 0;
  for (double r : rewards) sum += r;
  return sum;
}

void Trajectory::validate() const {
  if (states.size() != actions.size() + 1 || rewards.size() != actions.size())
    throw std::runtime_error("trajectory: inconsistent lengths");
  for (const auto& s : states)
    if (!all_finite(s)) throw std::runtime_error("trajectory: non-finite state");
  for (const auto& a : actions)
    if (!all_finite(a)) throw std::runtime_error("trajectory: non-finite action");
  for (double r : rewards)
    if (!std::isfinite(r)) throw std::runtime_error("trajectory: non-finite reward");
}

VectorXd reset(const EnvSpec& spec, std::uint64_t seed) {
  Rng rng(derive_seed(spec.seed, 0x7265736574ULL, seed));  // "reset" stream
  if (spec.task == Task::kPendulumSwingup) {
    double hw = spec.pendulum_reset_angle_halfwidth;
    double theta = M_PI + rng.uniform(-hw, hw);
    VectorXd y(2);
    y << wrap_angle(theta), 0.0;
    return to_embedded(spec.task, y);
  }
  double theta = rng.uniform(-spec.cartpole_reset_angle_halfwidth, spec.cartpole_reset_angle_halfwidth);
  double x = rng.uniform(-spec.cartpole_reset_pos_halfwidth, spec.cartpole_reset_pos_halfwidth);
  VectorXd y(4);
  y << x, theta, 0.0, 0.0;
  return to_embedded(spec.task, y);
}

double pendulum_theta_accel(const EnvSpec& spec, double theta, double theta_dot, double torque) {
  double m = kPendulumMass * spec.physical.pole_mass_scale;
  double l = kPendulumLength * spec.physical.cart_dim_scale;
  return (m * kGravity * l * std::sin(theta) - spec.pendulum_damping * theta_dot + torque) /
         (m * l * l);
}

std::pair<double, double> cartpole_accels(const EnvSpec& spec, double theta, double theta_dot,
                                          double force) {
  double mc = kCartMass * spec.physical.cart_mass_scale;
  double mp = kPoleMass * spec.physical.pole_mass_scale;
  double l = kPoleHalfLength * spec.physical.cart_dim_scale;
  double mt = mc + mp;
  double sin_t = std::sin(theta), cos_t = std::cos(theta);
  double theta_ddot = (kGravity * sin_t + cos_t * (-force - mp * l * theta_dot * theta_dot * sin_t) / mt) /
                      (l * (4.0 / 3.0 - mp * cos_t * cos_t / mt));
  double x_ddot = (force + mp * l * (theta_dot * theta_dot * sin_t - theta_ddot * cos_t)) / mt;
  return {x_ddot, theta_ddot};
}

std::pair<VectorXd, double> step(const EnvSpec& spec, const VectorXd& state,
                                 const VectorXd& action) {
  if (state.size() != state_dim(spec.task)) throw std::runtime_error("step: bad state dim");
  if (action.size() != 1) throw std::runtime_error("step: bad action dim");
  double u = clamp(action[0], spec.effective_action_bound());
  VectorXd y = to_internal(spec.task, state);
  double h = spec.control_dt / spec.substeps;
  for (int i = 0; i < spec.substeps; ++i) y = rk4_step(spec, y, u, h);
  VectorXd next = to_embedded(spec.task, y);
  return {next, reward_for_state(spec, next)};
}

double reward_tolerance(double x, double lo, double hi, double margin) {
  if (x >= lo && x <= hi) return 1.0;
  if (margin <= 0) return 0.0;
  double d = x < lo ? lo - x : x - hi;
  // scale chosen so the reward is 0.1 at distance `margin` outside the bounds
  static const double kScale = std::sqrt(-2.0 * std::log(0.1));
  double z = d * kScale / margin;
  return std::exp(-0.5 * z * z);
}

double reward_for_state(const EnvSpec& spec, const VectorXd& state) {
  if (spec.task == Task::kPendulumSwingup) {
    return reward_tolerance(state[0], 0.95, 1.0, 1.0);
  }
  double upright = reward_tolerance(state[1], 0.995, 1.0, 0.25);
  double centered = reward_tolerance(state[0], -0.25, 0.25, 1.0);
  return upright * centered;
}

VectorXd expert_action(const EnvSpec& spec, const VectorXd& state) {
  if (!spec.physical.is_demonstrator())
    throw std::runtime_error("expert_action: scripted expert only fits the demonstrator plant");
  double bound = spec.effective_action_bound();
  VectorXd action(1);
  if (spec.task == Task::kPendulumSwingup) {
    VectorXd y = to_internal(spec.task, state);
    double theta = y[0], theta_dot = y[1];
    if (std::abs(theta) <= 0.3) {
      VectorXd z(2);
      z << theta, theta_dot;
      action[0] = clamp(-expert_gains(spec).k.dot(z), bound);
      return action;
    }
    double m = kPendulumMass, l = kPendulumLength;
    double energy = 0.5 * m * l * l * theta_dot * theta_dot + m * kGravity * l * std::cos(theta);
    double energy_up = m * kGravity * l;
    double u = 2.0 * theta_dot * (energy_up - energy);
    if (std::abs(theta_dot) < 1e-2 && energy < 0) u = bound;  // break the hanging rest point
    action[0] = clamp(u, bound);
    return action;
  }
  VectorXd y = to_internal(spec.task, state);
  y[1] = wrap_angle(y[1]);
  action[0] = clamp(-expert_gains(spec).k.dot(y), bound);
  return action;
}

double expert_reward_floor(Task task) {
  return task == Task::kPendulumSwingup ? 0.75 : 0.98;
}

Trajectory rollout(const EnvSpec& spec, const Policy& policy, std::uint64_t seed, int max_len) {
  Trajectory traj;
  VectorXd s = reset(spec, seed);
  traj.states.push_back(s);
  double bound = spec.effective_action_bound();
  for (int t = 0; t < max_len; ++t) {
    VectorXd a = policy(s);
    if (!all_finite(a)) throw std::runtime_error("rollout: policy produced non-finite action");
    a[0] = clamp(a[0], bound);
    auto [next, r] = step(spec, s, a);
    traj.states.push_back(next);
    traj.actions.push_back(a);
    traj.rewards.push_back(r);
    s = next;
  }
  traj.validate();
  return traj;
}

}  // namespace ganmpc::env
