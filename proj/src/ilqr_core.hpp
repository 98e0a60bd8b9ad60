#pragma once

// Solver internals shared by the plain policy path and the differentiable
// generator path. Everything is templated over a value engine so both paths
// execute the same arithmetic in the same order; the tape engine records it,
// the plain engine just computes.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "ganmpc/mpc.hpp"

namespace ganmpc::mpc::detail {

struct PlainEngine {
  using V = MatrixXd;

  V constant(MatrixXd m) const { return m; }
  V leaf(MatrixXd m) const { return m; }
  const MatrixXd& val(const V& v) const { return v; }

  V add(const V& a, const V& b) const { return a + b; }
  V sub(const V& a, const V& b) const { return a - b; }
  V scale(const V& a, double k) const { return k * a; }
  V matmul(const V& a, const V& b) const { return a * b; }
  V transpose(const V& a) const { return a.transpose(); }
  V cwise_mul(const V& a, const V& b) const { return a.cwiseProduct(b); }
  V cwise_div(const V& a, const V& b) const { return a.cwiseQuotient(b); }
  V mul_scalar(const V& m, const V& s) const { return s(0, 0) * m; }
  V tanh(const V& a) const { return a.array().tanh().matrix(); }
  V relu(const V& a) const { return a.cwiseMax(0.0); }
  V softplus(const V& a) const {
    return a.unaryExpr([](double v) { return nn::softplus(v); });
  }
  V sqrt(const V& a) const { return a.cwiseSqrt(); }
  V sum_squares(const V& a) const { return MatrixXd::Constant(1, 1, a.squaredNorm()); }
  V concat_rows(std::span<const V> parts) const {
    long rows = 0;
    for (const V& p : parts) rows += p.rows();
    MatrixXd out(rows, parts[0].cols());
    long off = 0;
    for (const V& p : parts) {
      out.middleRows(off, p.rows()) = p;
      off += p.rows();
    }
    return out;
  }
  V slice_rows(const V& a, int begin, int rows) const { return a.middleRows(begin, rows); }
  V pad_rows(const V& a, int begin, int total_rows) const {
    MatrixXd out = MatrixXd::Zero(total_rows, a.cols());
    out.middleRows(begin, a.rows()) = a;
    return out;
  }
  V solve_psd(const V& a, const V& b) const {
    Eigen::LLT<MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("solve_psd: matrix is not positive definite");
    return llt.solve(b);
  }
  V clamp(const V& a, double bound) const { return a.cwiseMax(-bound).cwiseMin(bound); }

  V net_input_grad(const nn::NetworkSpec& spec, const nn::NetworkParams& params, const V& x,
                   const V& out) const {
    return nn::backward(spec, params, x, MatrixXd::Ones(out.rows(), out.cols())).input_grad;
  }
};

struct TapeEngine {
  using V = ad::NodeId;
  ad::Tape* t;

  V constant(MatrixXd m) const { return t->constant(std::move(m)); }
  V leaf(MatrixXd m) const { return t->leaf(std::move(m)); }
  const MatrixXd& val(V v) const { return t->value(v); }

  V add(V a, V b) const { return t->add(a, b); }
  V sub(V a, V b) const { return t->sub(a, b); }
  V scale(V a, double k) const { return t->scale(a, k); }
  V matmul(V a, V b) const { return t->matmul(a, b); }
  V transpose(V a) const { return t->transpose(a); }
  V cwise_mul(V a, V b) const { return t->cwise_mul(a, b); }
  V cwise_div(V a, V b) const { return t->cwise_div(a, b); }
  V mul_scalar(V m, V s) const { return t->mul_scalar(m, s); }
  V tanh(V a) const { return t->tanh(a); }
  V relu(V a) const { return t->relu(a); }
  V softplus(V a) const { return t->softplus(a); }
  V sqrt(V a) const { return t->sqrt(a); }
  V sum_squares(V a) const { return t->sum_squares(a); }
  V concat_rows(std::span<const V> parts) const { return t->concat_rows(parts); }
  V slice_rows(V a, int begin, int rows) const { return t->slice_rows(a, begin, rows); }
  V pad_rows(V a, int begin, int total_rows) const { return t->pad_rows(a, begin, total_rows); }
  V solve_psd(V a, V b) const { return t->solve_psd(a, b); }
  V clamp(V a, double bound) const { return t->clamp(a, bound); }

  V net_input_grad(const nn::NetworkSpec&, const nn::NetworkParams&, V x, V out) const {
    std::pair<ad::NodeId, MatrixXd> seed{out, MatrixXd::Ones(t->value(out).rows(),
                                                             t->value(out).cols())};
    std::array<ad::NodeId, 1> wrt{x};
    return t->backward(std::span<const std::pair<ad::NodeId, MatrixXd>>(&seed, 1), wrt)[0];
  }
};

// ---------------------------------------------------------------------------
// model wiring

template <class E>
struct NetRef {
  const nn::NetworkSpec* spec = nullptr;
  const nn::NetworkParams* params = nullptr;
  std::vector<typename E::V> w, b;
};

template <class E>
NetRef<E> register_net(E& eng, const nn::NetworkSpec& spec, const nn::NetworkParams& params,
                       bool learnable) {
  NetRef<E> net;
  net.spec = &spec;
  net.params = &params;
  for (int l = 0; l < spec.num_layers(); ++l) {
    if (learnable) {
      net.w.push_back(eng.leaf(params.w[l]));
      net.b.push_back(eng.leaf(MatrixXd(params.b[l])));
    } else {
      net.w.push_back(eng.constant(params.w[l]));
      net.b.push_back(eng.constant(MatrixXd(params.b[l])));
    }
  }
  return net;
}

template <class E>
typename E::V net_forward(E& eng, const NetRef<E>& net, typename E::V x) {
  typename E::V a = x;
  const int layers = net.spec->num_layers();
  for (int l = 0; l < layers; ++l) {
    typename E::V z = eng.add(eng.matmul(net.w[l], a), net.b[l]);
    if (l + 1 < layers) {
      switch (net.spec->hidden_activations()[l]) {
        case nn::Activation::kRelu:
          a = eng.relu(z);
          break;
        case nn::Activation::kTanh:
          a = eng.tanh(z);
          break;
        case nn::Activation::kIdentity:
          a = z;
          break;
      }
    } else {
      a = net.spec->output_activation() == nn::OutputActivation::kSoftplus ? eng.softplus(z) : z;
    }
  }
  return a;
}

template <class E>
typename E::V renorm(E& eng, const std::vector<std::pair<int, int>>& pairs, typename E::V pre,
                     int dim) {
  if (pairs.empty()) return pre;
  VectorXd keep = VectorXd::Ones(dim);
  for (auto [ci, si] : pairs) {
    keep[ci] = 0.0;
    keep[si] = 0.0;
  }
  typename E::V out = eng.cwise_mul(pre, eng.constant(MatrixXd(keep)));
  for (auto [ci, si] : pairs) {
    typename E::V c = eng.slice_rows(pre, ci, 1);
    typename E::V s = eng.slice_rows(pre, si, 1);
    typename E::V n = eng.sqrt(eng.add(eng.cwise_mul(c, c), eng.cwise_mul(s, s)));
    out = eng.add(out, eng.pad_rows(eng.cwise_div(c, n), ci, dim));
    out = eng.add(out, eng.pad_rows(eng.cwise_div(s, n), si, dim));
  }
  return out;
}

// Jacobian of renorm at `pre`: identity outside the trig pairs, the exact
// 2x2 unit-circle projection blocks inside.
template <class E>
typename E::V renorm_jacobian(E& eng, const std::vector<std::pair<int, int>>& pairs,
                              typename E::V pre, int dim) {
  MatrixXd base = MatrixXd::Identity(dim, dim);
  for (auto [ci, si] : pairs) {
    base(ci, ci) = 0.0;
    base(si, si) = 0.0;
  }
  typename E::V out = eng.constant(base);
  for (auto [ci, si] : pairs) {
    typename E::V c = eng.slice_rows(pre, ci, 1);
    typename E::V s = eng.slice_rows(pre, si, 1);
    typename E::V n2 = eng.add(eng.cwise_mul(c, c), eng.cwise_mul(s, s));
    typename E::V n3 = eng.cwise_mul(n2, eng.sqrt(n2));
    typename E::V b_cc = eng.cwise_div(eng.cwise_mul(s, s), n3);
    typename E::V b_ss = eng.cwise_div(eng.cwise_mul(c, c), n3);
    typename E::V b_cs = eng.scale(eng.cwise_div(eng.cwise_mul(c, s), n3), -1.0);
    auto unit = [&](int r, int cidx) {
      MatrixXd e = MatrixXd::Zero(dim, dim);
      e(r, cidx) = 1.0;
      return eng.constant(std::move(e));
    };
    out = eng.add(out, eng.mul_scalar(unit(ci, ci), b_cc));
    out = eng.add(out, eng.mul_scalar(unit(ci, si), b_cs));
    out = eng.add(out, eng.mul_scalar(unit(si, ci), b_cs));
    out = eng.add(out, eng.mul_scalar(unit(si, si), b_ss));
  }
  return out;
}

template <class E>
struct DynRef {
  NetRef<E> net;
  typename E::V mean, std;
  const models::DynamicsModel* model = nullptr;
  std::vector<std::pair<int, int>> pairs;
  int sd = 0, ad = 0;
};

template <class E>
DynRef<E> register_dynamics(E& eng, const models::DynamicsModel& m) {
  DynRef<E> d;
  d.net = register_net(eng, m.spec, m.params, false);
  d.mean = eng.constant(MatrixXd(m.normalizer.mean));
  d.std = eng.constant(MatrixXd(m.normalizer.std));
  d.model = &m;
  d.pairs = env::trig_pairs(m.task);
  d.sd = env::state_dim(m.task);
  d.ad = env::action_dim(m.task);
  return d;
}

template <class E>
struct DynStepOut {
  typename E::V next, pre, xn;
};

template <class E>
DynStepOut<E> dyn_step(E& eng, const DynRef<E>& d, typename E::V s, typename E::V a) {
  std::array<typename E::V, 2> parts{s, a};
  typename E::V x = eng.concat_rows(parts);
  typename E::V xn = eng.cwise_div(eng.sub(x, d.mean), d.std);
  typename E::V delta = net_forward(eng, d.net, xn);
  typename E::V pre = eng.add(s, delta);
  return {renorm(eng, d.pairs, pre, d.sd), pre, xn};
}

// Linearization: the network sensitivities are frozen at the nominal point
// (constants on the tape); only the renorm blocks stay differentiable.
template <class E>
std::pair<typename E::V, typename E::V> dyn_jacobians(E& eng, const DynRef<E>& d,
                                                      typename E::V s, typename E::V a) {
  DynStepOut<E> st = dyn_step(eng, d, s, a);
  const int sd = d.sd, ad = d.ad;
  VectorXd xn = eng.val(st.xn).col(0);
  MatrixXd rep(sd + ad, sd);
  for (int j = 0; j < sd; ++j) rep.col(j) = xn;
  nn::BackwardResult back =
      nn::backward(*d.net.spec, *d.net.params, rep, MatrixXd::Identity(sd, sd));
  MatrixXd net_jac = back.input_grad.transpose();
  net_jac = net_jac * d.model->normalizer.std.cwiseInverse().asDiagonal();
  MatrixXd j_pre_s = MatrixXd::Identity(sd, sd) + net_jac.leftCols(sd);
  MatrixXd j_pre_a = net_jac.rightCols(ad);

  typename E::V jren = renorm_jacobian(eng, d.pairs, st.pre, sd);
  return {eng.matmul(jren, eng.constant(std::move(j_pre_s))),
          eng.matmul(jren, eng.constant(std::move(j_pre_a)))};
}

template <class E>
typename E::V bc_act(E& eng, const NetRef<E>& net, typename E::V s, double bound) {
  return eng.scale(eng.tanh(net_forward(eng, net, s)), bound);
}

template <class E>
typename E::V predictor_step(E& eng, const NetRef<E>& net,
                             const std::vector<std::pair<int, int>>& pairs, typename E::V s,
                             int dim) {
  return renorm(eng, pairs, eng.add(s, net_forward(eng, net, s)), dim);
}

template <class E>
std::pair<typename E::V, bool> predict_target_e(E& eng, const NetRef<E>& net,
                                                const std::vector<std::pair<int, int>>& pairs,
                                                typename E::V s, int horizon, int dim) {
  typename E::V cur = s;
  for (int k = 0; k < horizon; ++k) {
    cur = predictor_step(eng, net, pairs, cur, dim);
    if (!eng.val(cur).allFinite()) return {cur, false};
  }
  return {cur, true};
}

template <class E>
struct CostRef {
  NetRef<E> net;
  typename E::V lam_eng, lam_lrn;  // raw 1x1 logits
  typename E::V w_eng, w_lrn;      // softplus of the logits
  const CostModel* model = nullptr;
};

template <class E>
CostRef<E> register_cost(E& eng, const CostModel& c, bool learnable) {
  CostRef<E> r;
  r.net = register_net(eng, c.spec, c.params, learnable);
  MatrixXd le = MatrixXd::Constant(1, 1, c.lambda_eng_raw);
  MatrixXd ll = MatrixXd::Constant(1, 1, c.lambda_lrn_raw);
  r.lam_eng = learnable ? eng.leaf(std::move(le)) : eng.constant(std::move(le));
  r.lam_lrn = learnable ? eng.leaf(std::move(ll)) : eng.constant(std::move(ll));
  r.w_eng = eng.softplus(r.lam_eng);
  r.w_lrn = eng.softplus(r.lam_lrn);
  r.model = &c;
  return r;
}

template <class E>
struct StageQuadT {
  typename E::V ls, la, lss, laa, las;
};
template <class E>
struct TermQuadT {
  typename E::V ms, mss;
};

template <class E>
struct EngineCost {
  std::function<typename E::V(E&, typename E::V s, typename E::V a, int t)> stage_value;
  std::function<StageQuadT<E>(E&, typename E::V s, typename E::V a, int t)> stage_quad;
  std::function<typename E::V(E&, typename E::V s)> term_value;
  std::function<TermQuadT<E>(E&, typename E::V s)> term_quad;
};

template <class E>
EngineCost<E> model_cost(const CostRef<E>& cost, typename E::V target, int sd, int ad) {
  EngineCost<E> ec;
  const double c_a = cost.model->c_a;
  ec.stage_value = [c_a](E& eng, typename E::V, typename E::V a, int) {
    return eng.scale(eng.sum_squares(a), c_a);
  };
  ec.stage_quad = [c_a, sd, ad](E& eng, typename E::V, typename E::V a, int) {
    StageQuadT<E> q;
    q.ls = eng.constant(MatrixXd::Zero(sd, 1));
    q.la = eng.scale(a, 2.0 * c_a);
    q.lss = eng.constant(MatrixXd::Zero(sd, sd));
    q.laa = eng.constant(2.0 * c_a * MatrixXd::Identity(ad, ad));
    q.las = eng.constant(MatrixXd::Zero(ad, sd));
    return q;
  };
  ec.term_value = [cost, target](E& eng, typename E::V s) {
    typename E::V d = eng.sub(s, target);
    std::array<typename E::V, 2> parts{s, target};
    typename E::V f = net_forward(eng, cost.net, eng.concat_rows(parts));
    return eng.add(eng.mul_scalar(eng.sum_squares(d), cost.w_eng),
                   eng.mul_scalar(f, cost.w_lrn));
  };
  ec.term_quad = [cost, target, sd](E& eng, typename E::V s) {
    typename E::V d = eng.sub(s, target);
    std::array<typename E::V, 2> parts{s, target};
    typename E::V x = eng.concat_rows(parts);
    typename E::V f = net_forward(eng, cost.net, x);
    typename E::V gfull = eng.net_input_grad(*cost.net.spec, *cost.net.params, x, f);
    typename E::V gs = eng.slice_rows(gfull, 0, sd);
    typename E::V wg = eng.mul_scalar(gs, cost.w_lrn);
    TermQuadT<E> q;
    q.ms = eng.add(eng.mul_scalar(eng.scale(d, 2.0), cost.w_eng), wg);
    q.mss = eng.add(eng.mul_scalar(eng.constant(2.0 * MatrixXd::Identity(sd, sd)), cost.w_eng),
                    eng.matmul(wg, eng.transpose(wg)));
    return q;
  };
  return ec;
}

template <class E>
struct EngineDyn {
  std::function<typename E::V(E&, typename E::V s, typename E::V a)> step;
  std::function<std::pair<typename E::V, typename E::V>(E&, typename E::V s, typename E::V a)>
      jacobians;
};

template <class E>
EngineDyn<E> model_dyn(const DynRef<E>& d) {
  EngineDyn<E> ed;
  ed.step = [d](E& eng, typename E::V s, typename E::V a) { return dyn_step(eng, d, s, a).next; };
  ed.jacobians = [d](E& eng, typename E::V s, typename E::V a) {
    return dyn_jacobians(eng, d, s, a);
  };
  return ed;
}

// ---------------------------------------------------------------------------
// the solver

struct CoreConfig {
  int horizon;
  double gamma;
  int iter_cap;
  double mu_init, mu_factor, mu_max;
  std::vector<double> alphas;
  double tol;
};

template <class E>
struct CoreResult {
  std::vector<typename E::V> states, actions;
  std::vector<double> cost_trace;
  bool converged = false;
  double mu_final = 0.0;
  int iterations = 0;
  bool initial_finite = true;
};

template <class E>
CoreResult<E> ilqr_core(E& eng, const EngineDyn<E>& dyn, const EngineCost<E>& cost,
                        const CoreConfig& cfg, typename E::V s0,
                        std::vector<typename E::V> guess) {
  using V = typename E::V;
  const int n = cfg.horizon - 1;

  CoreResult<E> res;
  res.actions = std::move(guess);
  res.mu_final = cfg.mu_init;

  auto rollout = [&](const std::vector<V>& acts, std::vector<V>& states_out,
                     double& total) -> bool {
    states_out.clear();
    states_out.reserve(cfg.horizon);
    states_out.push_back(s0);
    total = 0.0;
    for (int t = 0; t < n; ++t) {
      total += eng.val(cost.stage_value(eng, states_out[t], acts[t], t))(0, 0);
      V nxt = dyn.step(eng, states_out[t], acts[t]);
      if (!eng.val(nxt).allFinite()) return false;
      states_out.push_back(nxt);
    }
    total += cfg.gamma * eng.val(cost.term_value(eng, states_out[n]))(0, 0);
    return std::isfinite(total);
  };

  double cur_cost = 0.0;
  if (!rollout(res.actions, res.states, cur_cost)) {
    res.initial_finite = false;
    return res;
  }
  res.cost_trace.push_back(cur_cost);

  double mu = cfg.mu_init;
  for (int iter = 0; iter < cfg.iter_cap; ++iter) {
    res.iterations = iter + 1;

    std::vector<std::pair<V, V>> jac(n);
    std::vector<StageQuadT<E>> squad(n);
    for (int t = 0; t < n; ++t) {
      jac[t] = dyn.jacobians(eng, res.states[t], res.actions[t]);
      squad[t] = cost.stage_quad(eng, res.states[t], res.actions[t], t);
    }
    TermQuadT<E> tq = cost.term_quad(eng, res.states[n]);

    std::vector<V> ks(n), kgains(n);
    double dv1 = 0.0, dv2 = 0.0;
    while (true) {
      bool factorized = true;
      dv1 = dv2 = 0.0;
      V vs = eng.scale(tq.ms, cfg.gamma);
      V vss = eng.scale(tq.mss, cfg.gamma);
      for (int t = n - 1; t >= 0; --t) {
        const V& a_jac = jac[t].first;
        const V& b_jac = jac[t].second;
        V at = eng.transpose(a_jac);
        V bt = eng.transpose(b_jac);
        V qs = eng.add(squad[t].ls, eng.matmul(at, vs));
        V qa = eng.add(squad[t].la, eng.matmul(bt, vs));
        V qss = eng.add(squad[t].lss, eng.matmul(eng.matmul(at, vss), a_jac));
        V qaa = eng.add(squad[t].laa, eng.matmul(eng.matmul(bt, vss), b_jac));
        V qas = eng.add(squad[t].las, eng.matmul(eng.matmul(bt, vss), a_jac));

        const long adim = eng.val(qaa).rows();
        MatrixXd reg = mu * MatrixXd::Identity(adim, adim);
        MatrixXd qaa_reg_val = eng.val(qaa) + reg;
        Eigen::LLT<MatrixXd> llt(qaa_reg_val);
        if (llt.info() != Eigen::Success) {
          factorized = false;
          break;
        }
        V qaa_reg = eng.add(qaa, eng.constant(std::move(reg)));
        ks[t] = eng.scale(eng.solve_psd(qaa_reg, qa), -1.0);
        kgains[t] = eng.scale(eng.solve_psd(qaa_reg, qas), -1.0);

        V kt = eng.transpose(kgains[t]);
        V qast = eng.transpose(qas);
        vs = eng.add(eng.add(qs, eng.matmul(kt, eng.add(eng.matmul(qaa, ks[t]), qa))),
                     eng.matmul(qast, ks[t]));
        V vss_raw = eng.add(eng.add(qss, eng.matmul(kt, eng.add(eng.matmul(qaa, kgains[t]), qas))),
                            eng.matmul(qast, kgains[t]));
        vss = eng.scale(eng.add(vss_raw, eng.transpose(vss_raw)), 0.5);

        const MatrixXd& kv = eng.val(ks[t]);
        dv1 += (kv.transpose() * eng.val(qa))(0, 0);
        dv2 += 0.5 * (kv.transpose() * qaa_reg_val * kv)(0, 0);
      }
      if (factorized) break;
      mu *= cfg.mu_factor;
      if (mu > cfg.mu_max) {
        res.mu_final = mu;
        return res;
      }
    }

    if (std::abs(dv1 + dv2) < cfg.tol) {
      res.converged = true;
      break;
    }

    bool accepted = false;
    for (double alpha : cfg.alphas) {
      std::vector<V> cand_a;
      cand_a.reserve(n);
      std::vector<V> cand_s;
      cand_s.reserve(cfg.horizon);
      cand_s.push_back(s0);
      double cand_cost = 0.0;
      bool good = true;
      for (int t = 0; t < n && good; ++t) {
        V ds = eng.sub(cand_s[t], res.states[t]);
        V a = eng.add(res.actions[t],
                      eng.add(eng.scale(ks[t], alpha), eng.matmul(kgains[t], ds)));
        cand_a.push_back(a);
        cand_cost += eng.val(cost.stage_value(eng, cand_s[t], a, t))(0, 0);
        V nxt = dyn.step(eng, cand_s[t], a);
        good = eng.val(nxt).allFinite();
        cand_s.push_back(nxt);
      }
      if (good) {
        cand_cost += cfg.gamma * eng.val(cost.term_value(eng, cand_s[n]))(0, 0);
        good = std::isfinite(cand_cost);
      }
      if (good && cand_cost < cur_cost) {
        const double improvement = cur_cost - cand_cost;
        res.actions = std::move(cand_a);
        res.states = std::move(cand_s);
        cur_cost = cand_cost;
        res.cost_trace.push_back(cand_cost);
        mu = std::max(mu / cfg.mu_factor, cfg.mu_init);
        accepted = true;
        if (improvement < cfg.tol) res.converged = true;
        break;
      }
    }
    if (!accepted) {
      mu *= cfg.mu_factor;
      if (mu > cfg.mu_max) break;
    } else if (res.converged) {
      break;
    }
  }
  res.mu_final = mu;
  return res;
}

// ---------------------------------------------------------------------------
// one receding-horizon step over the learned models

template <class E>
struct ModelRefs {
  DynRef<E> dyn;
  CostRef<E> cost;
  NetRef<E> bc;
  NetRef<E> pred;
  double bc_bound = 0.0;
};

template <class E>
ModelRefs<E> register_models(E& eng, const MpcModels& m, bool cost_learnable) {
  ModelRefs<E> r;
  r.dyn = register_dynamics(eng, *m.dynamics);
  r.cost = register_cost(eng, *m.cost, cost_learnable);
  r.bc = register_net(eng, m.bc->spec, m.bc->params, false);
  r.pred = register_net(eng, m.predictor->spec, m.predictor->params, false);
  r.bc_bound = m.bc->action_bound;
  return r;
}

inline CoreConfig core_config(const MpcConfig& cfg, int iter_cap) {
  return {cfg.horizon, cfg.gamma,           iter_cap, cfg.mu_init,
          cfg.mu_factor, cfg.mu_max, cfg.line_search_alphas, cfg.convergence_tol};
}

template <class E>
struct SolveOut {
  CoreResult<E> core;
  bool ok = false;
  const char* what = nullptr;
};

template <class E>
SolveOut<E> solve_at(E& eng, const ModelRefs<E>& r, const MpcConfig& cfg, int iter_cap,
                     typename E::V s) {
  using V = typename E::V;
  SolveOut<E> out;

  auto [target, target_ok] = predict_target_e(eng, r.pred, r.dyn.pairs, s, cfg.horizon, r.dyn.sd);
  if (!target_ok) {
    out.what = "non-finite target prediction";
    return out;
  }

  std::vector<V> guess;
  guess.reserve(cfg.horizon - 1);
  V cur = s;
  for (int t = 0; t < cfg.horizon - 1; ++t) {
    V g = bc_act(eng, r.bc, cur, r.bc_bound);
    guess.push_back(g);
    cur = dyn_step(eng, r.dyn, cur, g).next;
    if (!eng.val(cur).allFinite()) {
      out.what = "non-finite guess rollout";
      return out;
    }
  }

  EngineCost<E> ec = model_cost(r.cost, target, r.dyn.sd, r.dyn.ad);
  EngineDyn<E> ed = model_dyn(r.dyn);
  out.core = ilqr_core(eng, ed, ec, core_config(cfg, iter_cap), s, std::move(guess));
  if (!out.core.initial_finite) {
    out.what = "non-finite nominal rollout";
    return out;
  }
  out.ok = true;
  return out;
}

template <class E>
struct StepOut {
  typename E::V next{};
  typename E::V action{};  // executed (squashed) first action
  bool ok = false;
  const char* what = nullptr;
};

template <class E>
StepOut<E> mpc_step_e(E& eng, const ModelRefs<E>& r, const MpcConfig& cfg, int iter_cap,
                      typename E::V s) {
  StepOut<E> out;
  SolveOut<E> sol = solve_at(eng, r, cfg, iter_cap, s);
  if (!sol.ok) {
    out.what = sol.what;
    return out;
  }
  typename E::V a = sol.core.actions[0];
  if (cfg.action_bound > 0.0) {
    a = cfg.squash == SquashMode::kTanh
            ? eng.scale(eng.tanh(eng.scale(a, 1.0 / cfg.action_bound)), cfg.action_bound)
            : eng.clamp(a, cfg.action_bound);
  }
  typename E::V nxt = dyn_step(eng, r.dyn, s, a).next;
  if (!eng.val(nxt).allFinite()) {
    out.what = "non-finite dynamics step";
    return out;
  }
  out.next = nxt;
  out.action = a;
  out.ok = true;
  return out;
}

}  // namespace ganmpc::mpc::detail
