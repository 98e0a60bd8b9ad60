#include "ganmpc/mpc.hpp"

#include <cmath>
#include <stdexcept>

#include "ganmpc/serialize.hpp"
#include "ilqr_core.hpp"

namespace ganmpc::mpc {

using detail::PlainEngine;
using detail::TapeEngine;

void MpcConfig::validate() const {
  if (horizon < 2) throw std::invalid_argument("mpc: horizon must be >= 2");
  if (gamma < 0.0) throw std::invalid_argument("mpc: gamma must be non-negative");
  if (max_ilqr_iters < 1) throw std::invalid_argument("mpc: max_ilqr_iters must be positive");
  if (unroll_iters < 1 || unroll_iters > max_ilqr_iters)
    throw std::invalid_argument("mpc: unroll_iters must be in [1, max_ilqr_iters]");
  if (mu_init <= 0.0 || mu_factor <= 1.0 || mu_max < mu_init)
    throw std::invalid_argument("mpc: bad regularization schedule");
  if (line_search_alphas.empty() || line_search_alphas.front() != 1.0)
    throw std::invalid_argument("mpc: line search must start at alpha = 1");
  for (std::size_t i = 0; i < line_search_alphas.size(); ++i) {
    if (line_search_alphas[i] <= 0.0)
      throw std::invalid_argument("mpc: line search alphas must be positive");
    if (i > 0 && line_search_alphas[i] >= line_search_alphas[i - 1])
      throw std::invalid_argument("mpc: line search alphas must be strictly decreasing");
  }
  if (convergence_tol <= 0.0) throw std::invalid_argument("mpc: convergence_tol must be positive");
}

CostModel::CostModel(env::Task task_)
    : task(task_),
      spec({2 * env::state_dim(task_), 128, 128, 128, 1}, nn::Activation::kRelu,
           nn::OutputActivation::kSoftplus),
      params(nn::NetworkParams::zeros(spec)) {}

void CostModel::init(std::uint64_t seed) { params = nn::glorot_init(spec, seed); }

long CostModel::num_learnables() const { return params.num_entries() + 2; }

VectorXd CostModel::flatten() const {
  VectorXd flat(num_learnables());
  flat.head(params.num_entries()) = params.flatten();
  flat[flat.size() - 2] = lambda_eng_raw;
  flat[flat.size() - 1] = lambda_lrn_raw;
  return flat;
}

void CostModel::unflatten(const VectorXd& flat) {
  if (flat.size() != num_learnables()) throw std::invalid_argument("cost model: flat size mismatch");
  params.unflatten(flat.head(params.num_entries()));
  lambda_eng_raw = flat[flat.size() - 2];
  lambda_lrn_raw = flat[flat.size() - 1];
}

double staging_cost(const CostModel& cost, const VectorXd&, const VectorXd& a, int) {
  return cost.c_a * a.squaredNorm();
}

double terminal_cost(const CostModel& cost, const VectorXd& s_H, const VectorXd& s_target) {
  VectorXd x(s_H.size() + s_target.size());
  x << s_H, s_target;
  const double f = nn::forward(cost.spec, cost.params, x)(0);
  return nn::softplus(cost.lambda_eng_raw) * (s_H - s_target).squaredNorm() +
         nn::softplus(cost.lambda_lrn_raw) * f;
}

TermQuad terminal_quad(const CostModel& cost, const VectorXd& s_H, const VectorXd& s_target) {
  PlainEngine eng;
  detail::CostRef<PlainEngine> ref = detail::register_cost(eng, cost, false);
  detail::EngineCost<PlainEngine> ec = detail::model_cost(
      ref, eng.constant(MatrixXd(s_target)), static_cast<int>(s_H.size()),
      env::action_dim(cost.task));
  detail::TermQuadT<PlainEngine> q = ec.term_quad(eng, eng.constant(MatrixXd(s_H)));
  return {VectorXd(q.ms.col(0)), q.mss};
}

DynamicsInterface make_dynamics_interface(const models::DynamicsModel& model) {
  DynamicsInterface iface;
  iface.predict = [&model](const VectorXd& s, const VectorXd& a) { return model.predict(s, a); };
  iface.jacobians = [&model](const VectorXd& s, const VectorXd& a) {
    models::DynamicsModel::Jacobians j = model.jacobians(s, a);
    return std::pair<MatrixXd, MatrixXd>(std::move(j.ds), std::move(j.da));
  };
  return iface;
}

CostInterface make_cost_interface(const CostModel& cost, const VectorXd& s_target) {
  CostInterface iface;
  const int sd = env::state_dim(cost.task);
  const int ad = env::action_dim(cost.task);
  iface.stage_value = [&cost](const VectorXd& s, const VectorXd& a, int t) {
    return staging_cost(cost, s, a, t);
  };
  iface.stage_quad = [&cost, sd, ad](const VectorXd&, const VectorXd& a, int) {
    StageQuad q;
    q.ls = VectorXd::Zero(sd);
    q.la = 2.0 * cost.c_a * a;
    q.lss = MatrixXd::Zero(sd, sd);
    q.laa = 2.0 * cost.c_a * MatrixXd::Identity(ad, ad);
    q.las = MatrixXd::Zero(ad, sd);
    return q;
  };
  iface.term_value = [&cost, s_target](const VectorXd& s) {
    return terminal_cost(cost, s, s_target);
  };
  iface.term_quad = [&cost, s_target](const VectorXd& s) {
    return terminal_quad(cost, s, s_target);
  };
  return iface;
}

namespace {

IlqrSolution to_solution(const detail::CoreResult<PlainEngine>& core, double action_bound) {
  IlqrSolution sol;
  sol.actions.reserve(core.actions.size());
  for (const MatrixXd& a : core.actions) {
    VectorXd av = a.col(0);
    if (action_bound > 0.0) av = av.cwiseMax(-action_bound).cwiseMin(action_bound);
    sol.actions.push_back(std::move(av));
  }
  sol.states.reserve(core.states.size());
  for (const MatrixXd& s : core.states) sol.states.push_back(s.col(0));
  sol.cost_trace = core.cost_trace;
  sol.converged = core.converged;
  sol.mu_final = core.mu_final;
  sol.iterations = core.iterations;
  return sol;
}

}  // namespace

IlqrSolution ilqr_solve(const DynamicsInterface& dyn, const CostInterface& cost,
                        const MpcConfig& config, const VectorXd& s0,
                        const std::vector<VectorXd>& initial_guess) {
  config.validate();
  if (static_cast<int>(initial_guess.size()) != config.horizon - 1)
    throw std::invalid_argument("ilqr: initial guess must have horizon - 1 actions");
  if (!all_finite(s0)) throw std::invalid_argument("ilqr: non-finite initial state");

  PlainEngine eng;
  detail::EngineDyn<PlainEngine> ed;
  ed.step = [&dyn](PlainEngine&, MatrixXd s, MatrixXd a) -> MatrixXd {
    return dyn.predict(s.col(0), a.col(0));
  };
  ed.jacobians = [&dyn](PlainEngine&, MatrixXd s, MatrixXd a) {
    return dyn.jacobians(s.col(0), a.col(0));
  };

  detail::EngineCost<PlainEngine> ec;
  ec.stage_value = [&cost](PlainEngine&, MatrixXd s, MatrixXd a, int t) -> MatrixXd {
    return MatrixXd::Constant(1, 1, cost.stage_value(s.col(0), a.col(0), t));
  };
  ec.stage_quad = [&cost](PlainEngine&, MatrixXd s, MatrixXd a, int t) {
    StageQuad q = cost.stage_quad(s.col(0), a.col(0), t);
    detail::StageQuadT<PlainEngine> out;
    out.ls = std::move(q.ls);
    out.la = std::move(q.la);
    out.lss = std::move(q.lss);
    out.laa = std::move(q.laa);
    out.las = std::move(q.las);
    return out;
  };
  ec.term_value = [&cost](PlainEngine&, MatrixXd s) -> MatrixXd {
    return MatrixXd::Constant(1, 1, cost.term_value(s.col(0)));
  };
  ec.term_quad = [&cost](PlainEngine&, MatrixXd s) {
    TermQuad q = cost.term_quad(s.col(0));
    detail::TermQuadT<PlainEngine> out;
    out.ms = std::move(q.ms);
    out.mss = std::move(q.mss);
    return out;
  };

  std::vector<MatrixXd> guess;
  guess.reserve(initial_guess.size());
  for (const VectorXd& a : initial_guess) {
    if (!all_finite(a)) throw std::invalid_argument("ilqr: non-finite initial guess");
    guess.push_back(a);
  }

  detail::CoreResult<PlainEngine> core = detail::ilqr_core(
      eng, ed, ec, detail::core_config(config, config.max_ilqr_iters), MatrixXd(s0),
      std::move(guess));
  if (!core.initial_finite) throw std::runtime_error("ilqr: non-finite rollout from initial guess");
  return to_solution(core, config.action_bound);
}

std::string trace_to_json(const IlqrSolution& solution) {
  serialize::json j;
  j["converged"] = solution.converged;
  j["iterations"] = solution.iterations;
  j["mu_final"] = double_to_string(solution.mu_final);
  serialize::json trace = serialize::json::array();
  for (double c : solution.cost_trace) trace.push_back(double_to_string(c));
  j["cost_trace"] = std::move(trace);
  serialize::json states = serialize::json::array();
  for (const VectorXd& s : solution.states) states.push_back(serialize::vector_to_json(s));
  j["states"] = std::move(states);
  serialize::json actions = serialize::json::array();
  for (const VectorXd& a : solution.actions) actions.push_back(serialize::vector_to_json(a));
  j["actions"] = std::move(actions);
  return j.dump(2);
}

namespace {

void check_models(const MpcModels& m) {
  if (!m.dynamics || !m.cost || !m.bc || !m.predictor)
    throw std::invalid_argument("mpc: all models must be provided");
}

}  // namespace

IlqrSolution mpc_solve(const MpcModels& m, const MpcConfig& config, const VectorXd& s) {
  config.validate();
  check_models(m);
  if (!all_finite(s)) throw std::invalid_argument("mpc: non-finite state");
  PlainEngine eng;
  detail::ModelRefs<PlainEngine> refs = detail::register_models(eng, m, false);
  detail::SolveOut<PlainEngine> sol =
      detail::solve_at(eng, refs, config, config.max_ilqr_iters, MatrixXd(s));
  if (!sol.ok) throw std::runtime_error(std::string("mpc: ") + sol.what);
  return to_solution(sol.core, config.action_bound);
}

VectorXd mpc_policy(const MpcModels& m, const MpcConfig& config, const VectorXd& s) {
  return mpc_solve(m, config, s).actions.front();
}

GeneratorPath generator_path(const MpcModels& m, const MpcConfig& config, const VectorXd& s0,
                             int num_states) {
  config.validate();
  check_models(m);
  if (num_states < 1) throw std::invalid_argument("generator rollout: need at least one state");
  if (!all_finite(s0)) throw std::invalid_argument("generator rollout: non-finite initial state");

  GeneratorPath path;
  path.states.push_back(s0);
  if (num_states == 1) return path;

  PlainEngine eng;
  detail::ModelRefs<PlainEngine> refs = detail::register_models(eng, m, false);
  MatrixXd cur = s0;
  for (int k = 1; k < num_states; ++k) {
    detail::StepOut<PlainEngine> step =
        detail::mpc_step_e(eng, refs, config, config.unroll_iters, cur);
    if (!step.ok) throw std::runtime_error(std::string("generator rollout: ") + step.what);
    cur = step.next;
    path.states.push_back(cur.col(0));
    path.actions.push_back(step.action.col(0));
  }
  return path;
}

std::vector<VectorXd> generator_rollout(const MpcModels& m, const MpcConfig& config,
                                        const VectorXd& s0, int num_states) {
  return generator_path(m, config, s0, num_states).states;
}

DifferentiableRollout differentiable_rollout(const MpcModels& m, const MpcConfig& config,
                                             const VectorXd& s0, int num_states) {
  config.validate();
  check_models(m);
  if (num_states < 1) throw std::invalid_argument("rollout: need at least one state");
  if (!all_finite(s0)) throw std::invalid_argument("rollout: non-finite initial state");

  DifferentiableRollout res;
  res.cost = m.cost;
  TapeEngine eng{&res.tape};
  detail::ModelRefs<TapeEngine> refs = detail::register_models(eng, m, true);
  res.phi_w = refs.cost.net.w;
  res.phi_b = refs.cost.net.b;
  res.lambda_eng_node = refs.cost.lam_eng;
  res.lambda_lrn_node = refs.cost.lam_lrn;

  ad::NodeId cur = eng.constant(MatrixXd(s0));
  res.state_nodes.push_back(cur);
  res.states.push_back(s0);
  for (int k = 1; k < num_states; ++k) {
    detail::StepOut<TapeEngine> step =
        detail::mpc_step_e(eng, refs, config, config.unroll_iters, cur);
    if (!step.ok) {
      res.diagnostic = step.what;
      return res;
    }
    cur = step.next;
    res.state_nodes.push_back(cur);
    res.states.push_back(res.tape.value(cur).col(0));
    res.action_nodes.push_back(step.action);
    res.actions.push_back(res.tape.value(step.action).col(0));
  }
  res.ok = true;
  return res;
}

PhiGrad DifferentiableRollout::grad(std::span<const MatrixXd> state_seeds,
                                    std::span<const MatrixXd> action_seeds) {
  if (!ok) throw std::logic_error("rollout: gradient of a failed rollout");
  if (state_seeds.size() != state_nodes.size())
    throw std::invalid_argument("rollout: one seed per state required");
  if (!action_seeds.empty() && action_seeds.size() != action_nodes.size())
    throw std::invalid_argument("rollout: one seed per action required");

  std::vector<std::pair<ad::NodeId, MatrixXd>> seeds;
  seeds.reserve(state_seeds.size() + action_seeds.size());
  for (std::size_t i = 0; i < state_seeds.size(); ++i)
    seeds.emplace_back(state_nodes[i], state_seeds[i]);
  for (std::size_t i = 0; i < action_seeds.size(); ++i)
    seeds.emplace_back(action_nodes[i], action_seeds[i]);

  std::vector<ad::NodeId> wrt = phi_w;
  wrt.insert(wrt.end(), phi_b.begin(), phi_b.end());
  wrt.push_back(lambda_eng_node);
  wrt.push_back(lambda_lrn_node);

  std::vector<ad::NodeId> grads = tape.backward(seeds, wrt);

  PhiGrad g;
  g.params = nn::NetworkParams::zeros(cost->spec);
  std::size_t i = 0;
  for (std::size_t l = 0; l < phi_w.size(); ++l) g.params.w[l] = tape.value(grads[i++]);
  for (std::size_t l = 0; l < phi_b.size(); ++l) g.params.b[l] = tape.value(grads[i++]).col(0);
  g.lambda_eng_raw = tape.value(grads[i++])(0, 0);
  g.lambda_lrn_raw = tape.value(grads[i++])(0, 0);
  return g;
}

}  // namespace ganmpc::mpc
