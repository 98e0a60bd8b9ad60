#include "ganmpc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <tuple>

#include "ganmpc/toml.hpp"
#include "ganmpc/util.hpp"

namespace ganmpc::harness {
namespace {

namespace fs = std::filesystem;

std::string dts(double v) { return double_to_string(v); }

toml::Value float_array(const std::vector<double>& v) {
  std::vector<toml::Value> items;
  items.reserve(v.size());
  for (double x : v) items.emplace_back(x);
  return toml::Value(std::move(items));
}

std::vector<double> floats_from(const toml::Value& v, const std::string& what) {
  std::vector<double> out;
  for (const auto& item : v.as_array()) {
    try {
      out.push_back(item.as_float());
    } catch (const std::exception&) {
      throw std::runtime_error("config: " + what + " must hold numbers");
    }
  }
  return out;
}

// Section-by-section key whitelists so a typo fails loudly instead of
// silently falling back to a default.
const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"experiment",
       {"task", "algorithms", "imitators", "train_seeds", "n_demos", "eval_episodes",
        "base_seed", "output_dir", "demo_file"}},
      {"env",
       {"control_dt", "substeps", "max_steps", "action_bound", "pendulum_damping",
        "pendulum_reset_angle_halfwidth", "cartpole_reset_angle_halfwidth",
        "cartpole_reset_pos_halfwidth"}},
      {"hyper",
       {"pretrain_epochs", "finetune_epochs", "iterations", "rollouts_per_iter", "batch",
        "rollout_states", "learning_rate", "polyak_rho", "r1_lambda", "clip_norm",
        "disc_steps", "gen_steps", "hidden_dim", "bc_epochs", "predictor_epochs",
        "model_learning_rate", "spsa_samples", "spsa_step", "obs_mask"}},
      {"mpc",
       {"horizon", "gamma", "max_ilqr_iters", "unroll_iters", "mu_init", "mu_factor", "mu_max",
        "line_search_alphas", "convergence_tol", "action_bound", "squash", "generator_grad"}},
  };
  return keys;
}

void reject_unknown(const toml::Document& doc) {
  for (const auto& [section, entries] : doc.sections) {
    auto it = known_keys().find(section);
    if (it == known_keys().end()) {
      throw std::runtime_error("config: unknown section [" + section + "]");
    }
    for (const auto& [key, value] : entries) {
      if (it->second.count(key) == 0) {
        throw std::runtime_error("config: unknown key '" + key + "' in [" + section + "]");
      }
    }
  }
}

std::string squash_name(mpc::SquashMode m) {
  return m == mpc::SquashMode::kTanh ? "tanh" : "hard_clamp";
}

mpc::SquashMode squash_from_name(const std::string& s) {
  if (s == "tanh") return mpc::SquashMode::kTanh;
  if (s == "hard_clamp") return mpc::SquashMode::kHardClamp;
  throw std::runtime_error("config: unknown squash mode '" + s + "'");
}

std::string grad_name(mpc::GeneratorGrad g) {
  return g == mpc::GeneratorGrad::kUnrolled ? "unrolled" : "spsa";
}

mpc::GeneratorGrad grad_from_name(const std::string& s) {
  if (s == "unrolled") return mpc::GeneratorGrad::kUnrolled;
  if (s == "spsa") return mpc::GeneratorGrad::kSpsa;
  throw std::runtime_error("config: unknown generator gradient mode '" + s + "'");
}

toml::Document config_to_doc(const ExperimentConfig& cfg, bool include_paths) {
  toml::Document doc;
  const std::string ex = "experiment";
  doc.set(ex, "task", toml::Value(serialize::task_name(cfg.demonstrator.task)));
  {
    std::vector<toml::Value> algos;
    for (auto a : cfg.algorithms) algos.emplace_back(gan::algorithm_name(a));
    doc.set(ex, "algorithms", toml::Value(std::move(algos)));
  }
  {
    std::vector<toml::Value> rows;
    for (const auto& p : cfg.imitators) {
      rows.push_back(float_array({p.pole_mass_scale, p.cart_mass_scale, p.cart_dim_scale}));
    }
    doc.set(ex, "imitators", toml::Value(std::move(rows)));
  }
  {
    std::vector<toml::Value> seeds;
    for (auto s : cfg.train_seeds) seeds.emplace_back(static_cast<std::int64_t>(s));
    doc.set(ex, "train_seeds", toml::Value(std::move(seeds)));
  }
  doc.set(ex, "n_demos", toml::Value(static_cast<std::int64_t>(cfg.n_demos)));
  doc.set(ex, "eval_episodes", toml::Value(static_cast<std::int64_t>(cfg.eval_episodes)));
  doc.set(ex, "base_seed", toml::Value(static_cast<std::int64_t>(cfg.base_seed)));
  if (include_paths) {
    doc.set(ex, "output_dir", toml::Value(cfg.output_dir.generic_string()));
    doc.set(ex, "demo_file", toml::Value(cfg.demo_file.generic_string()));
  }

  const env::EnvSpec& e = cfg.demonstrator;
  doc.set("env", "control_dt", toml::Value(e.control_dt));
  doc.set("env", "substeps", toml::Value(static_cast<std::int64_t>(e.substeps)));
  doc.set("env", "max_steps", toml::Value(static_cast<std::int64_t>(e.max_steps)));
  doc.set("env", "action_bound", toml::Value(e.action_bound));
  doc.set("env", "pendulum_damping", toml::Value(e.pendulum_damping));
  doc.set("env", "pendulum_reset_angle_halfwidth", toml::Value(e.pendulum_reset_angle_halfwidth));
  doc.set("env", "cartpole_reset_angle_halfwidth", toml::Value(e.cartpole_reset_angle_halfwidth));
  doc.set("env", "cartpole_reset_pos_halfwidth", toml::Value(e.cartpole_reset_pos_halfwidth));

  const gan::GanMpcHyper& h = cfg.hyper;
  doc.set("hyper", "pretrain_epochs", toml::Value(static_cast<std::int64_t>(h.pretrain_epochs)));
  doc.set("hyper", "finetune_epochs", toml::Value(static_cast<std::int64_t>(h.finetune_epochs)));
  doc.set("hyper", "iterations", toml::Value(static_cast<std::int64_t>(h.iterations)));
  doc.set("hyper", "rollouts_per_iter",
          toml::Value(static_cast<std::int64_t>(h.rollouts_per_iter)));
  doc.set("hyper", "batch", toml::Value(static_cast<std::int64_t>(h.batch)));
  doc.set("hyper", "rollout_states", toml::Value(static_cast<std::int64_t>(h.rollout_states)));
  doc.set("hyper", "learning_rate", toml::Value(h.learning_rate));
  doc.set("hyper", "polyak_rho", toml::Value(h.polyak_rho));
  doc.set("hyper", "r1_lambda", toml::Value(h.r1_lambda));
  doc.set("hyper", "clip_norm", toml::Value(h.clip_norm.value_or(0.0)));
  doc.set("hyper", "disc_steps", toml::Value(static_cast<std::int64_t>(h.disc_steps)));
  doc.set("hyper", "gen_steps", toml::Value(static_cast<std::int64_t>(h.gen_steps)));
  doc.set("hyper", "hidden_dim", toml::Value(static_cast<std::int64_t>(h.hidden_dim)));
  doc.set("hyper", "bc_epochs", toml::Value(static_cast<std::int64_t>(h.bc_epochs)));
  doc.set("hyper", "predictor_epochs",
          toml::Value(static_cast<std::int64_t>(h.predictor_epochs)));
  doc.set("hyper", "model_learning_rate", toml::Value(h.model_learning_rate));
  doc.set("hyper", "spsa_samples", toml::Value(static_cast<std::int64_t>(h.spsa_samples)));
  doc.set("hyper", "spsa_step", toml::Value(h.spsa_step));
  if (!h.obs_mask.empty()) {
    std::vector<toml::Value> mask;
    for (bool b : h.obs_mask) mask.emplace_back(b);
    doc.set("hyper", "obs_mask", toml::Value(std::move(mask)));
  }

  const mpc::MpcConfig& m = cfg.mpc;
  doc.set("mpc", "horizon", toml::Value(static_cast<std::int64_t>(m.horizon)));
  doc.set("mpc", "gamma", toml::Value(m.gamma));
  doc.set("mpc", "max_ilqr_iters", toml::Value(static_cast<std::int64_t>(m.max_ilqr_iters)));
  doc.set("mpc", "unroll_iters", toml::Value(static_cast<std::int64_t>(m.unroll_iters)));
  doc.set("mpc", "mu_init", toml::Value(m.mu_init));
  doc.set("mpc", "mu_factor", toml::Value(m.mu_factor));
  doc.set("mpc", "mu_max", toml::Value(m.mu_max));
  doc.set("mpc", "line_search_alphas", float_array(m.line_search_alphas));
  doc.set("mpc", "convergence_tol", toml::Value(m.convergence_tol));
  doc.set("mpc", "action_bound", toml::Value(m.action_bound));
  doc.set("mpc", "squash", toml::Value(squash_name(m.squash)));
  doc.set("mpc", "generator_grad", toml::Value(grad_name(m.generator_grad)));
  return doc;
}

json physical_to_json(const env::PhysicalParams& p) {
  return json{{"pole_mass_scale", dts(p.pole_mass_scale)},
              {"cart_mass_scale", dts(p.cart_mass_scale)},
              {"cart_dim_scale", dts(p.cart_dim_scale)}};
}

env::PhysicalParams physical_from_json(const json& j) {
  env::PhysicalParams p;
  p.pole_mass_scale = string_to_double(j.at("pole_mass_scale").get<std::string>());
  p.cart_mass_scale = string_to_double(j.at("cart_mass_scale").get<std::string>());
  p.cart_dim_scale = string_to_double(j.at("cart_dim_scale").get<std::string>());
  return p;
}

json net_layers(const nn::NetworkSpec& spec) {
  json out = json::array();
  for (int d : spec.layer_sizes()) out.push_back(d);
  return out;
}

mpc::MpcConfig resolved_mpc(const ExperimentConfig& cfg, const env::EnvSpec& spec) {
  mpc::MpcConfig m = cfg.mpc;
  if (m.action_bound <= 0.0) m.action_bound = spec.effective_action_bound();
  return m;
}

json cost_to_json(const mpc::CostModel& c) {
  return json{{"net", serialize::params_to_json(c.spec, c.params)},
              {"c_a", dts(c.c_a)},
              {"lambda_eng_raw", dts(c.lambda_eng_raw)},
              {"lambda_lrn_raw", dts(c.lambda_lrn_raw)}};
}

void cost_from_json(const json& j, mpc::CostModel& c) {
  auto [spec, params] = serialize::params_from_json(j.at("net"));
  c.spec = spec;
  c.params = std::move(params);
  c.c_a = string_to_double(j.at("c_a").get<std::string>());
  c.lambda_eng_raw = string_to_double(j.at("lambda_eng_raw").get<std::string>());
  c.lambda_lrn_raw = string_to_double(j.at("lambda_lrn_raw").get<std::string>());
}

json read_json_file(const fs::path& path) {
  return json::parse(serialize::read_text_file(path));
}

void write_json_file(const fs::path& path, const json& j) {
  serialize::write_text_file(path, j.dump(2) + "\n");
}

json make_manifest(const ExperimentConfig& cfg, gan::Algorithm algorithm,
                   const env::PhysicalParams& imitator, std::uint64_t seed,
                   std::uint64_t demo_hash, const gan::TrainState& st, bool completed) {
  json seed_plan{
      {"demo_first", cfg.base_seed},
      {"demo_count", cfg.n_demos},
      {"train_env_first", seed + 10000},
      {"train_env_count", cfg.hyper.iterations * cfg.hyper.rollouts_per_iter},
      {"eval_first", cfg.base_seed + 20000},
      {"eval_count", cfg.eval_episodes},
  };
  json layers{
      {"dynamics", net_layers(st.dynamics.spec)},
      {"bc", net_layers(st.bc.spec)},
      {"predictor", net_layers(st.predictor.spec)},
      {"generator_cost", net_layers(st.gen_live.spec)},
      {"critic_hidden", cfg.hyper.hidden_dim},
  };
  return json{
      {"format_version", 1},
      {"task", serialize::task_name(cfg.demonstrator.task)},
      {"algorithm", gan::algorithm_name(algorithm)},
      {"imitator", physical_to_json(imitator)},
      {"seed", seed},
      {"config_hash", hex64(config_hash(cfg))},
      {"demo_file_hash", hex64(demo_hash)},
      {"demos_used", cfg.n_demos},
      {"iterations_completed", st.iteration},
      {"interaction_steps", st.interaction_steps},
      {"error", st.error},
      {"completed", completed},
      {"seed_plan", seed_plan},
      {"model_layers", layers},
  };
}

struct RunInfo {
  std::string task;
  env::PhysicalParams imitator;
  gan::Algorithm algorithm = gan::Algorithm::kBc;
  std::uint64_t seed = 0;
  bool has_results = false;
  double rel_reward = 0.0;
};

std::string table_cell(double mean, double std_dev) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f +/- %.3f", mean, std_dev);
  return std::string(buf);
}

}  // namespace

void ExperimentConfig::validate() const {
  if (!demonstrator.physical.is_demonstrator()) {
    throw std::invalid_argument("config: demonstrator must use unit physical scales");
  }
  if (demonstrator.max_steps <= 0 || demonstrator.control_dt <= 0.0 ||
      demonstrator.substeps <= 0) {
    throw std::invalid_argument("config: bad environment timing");
  }
  if (imitators.empty()) throw std::invalid_argument("config: no imitators");
  for (const auto& p : imitators) {
    if (p.pole_mass_scale <= 0.0 || p.cart_mass_scale <= 0.0 || p.cart_dim_scale <= 0.0) {
      throw std::invalid_argument("config: imitator scales must be positive");
    }
  }
  if (algorithms.empty()) throw std::invalid_argument("config: no algorithms");
  {
    std::set<gan::Algorithm> seen(algorithms.begin(), algorithms.end());
    if (seen.size() != algorithms.size()) {
      throw std::invalid_argument("config: duplicate algorithm");
    }
  }
  if (train_seeds.empty()) throw std::invalid_argument("config: no training seeds");
  {
    std::set<std::uint64_t> seen(train_seeds.begin(), train_seeds.end());
    if (seen.size() != train_seeds.size()) {
      throw std::invalid_argument("config: duplicate training seed");
    }
  }
  if (n_demos <= 0) throw std::invalid_argument("config: n_demos must be positive");
  if (n_demos > 20000) {
    throw std::invalid_argument("config: n_demos above 20000 collides with evaluation seeds");
  }
  if (eval_episodes <= 0) throw std::invalid_argument("config: eval_episodes must be positive");
  if (demo_file.empty()) throw std::invalid_argument("config: demo_file not set");

  hyper.validate(env::state_dim(demonstrator.task));
  mpc.validate();

  // Seed streams must stay disjoint: demos draw base_seed..base_seed+n-1,
  // evaluation draws base_seed+20000.., and each training run draws
  // seed+10000.. for its environment rollouts.
  const auto overlaps = [](std::uint64_t lo1, std::uint64_t hi1, std::uint64_t lo2,
                           std::uint64_t hi2) { return lo1 < hi2 && lo2 < hi1; };
  const std::uint64_t demo_lo = base_seed;
  const std::uint64_t demo_hi = base_seed + static_cast<std::uint64_t>(n_demos);
  const std::uint64_t eval_lo = base_seed + 20000;
  const std::uint64_t eval_hi = eval_lo + static_cast<std::uint64_t>(eval_episodes);
  for (std::uint64_t s : train_seeds) {
    const std::uint64_t run_lo = s + 10000;
    const std::uint64_t run_hi =
        run_lo + static_cast<std::uint64_t>(hyper.iterations) *
                     static_cast<std::uint64_t>(hyper.rollouts_per_iter);
    if (overlaps(run_lo, run_hi, demo_lo, demo_hi) || overlaps(run_lo, run_hi, eval_lo, eval_hi)) {
      throw std::invalid_argument(
          "config: training seed " + std::to_string(s) +
          " produces rollout seeds that collide with demo or evaluation seeds");
    }
  }
}

env::EnvSpec ExperimentConfig::imitator_spec(const env::PhysicalParams& p) const {
  env::EnvSpec spec = demonstrator;
  spec.physical = p;
  return spec;
}

ExperimentConfig config_from_toml(const std::string& text, const std::filesystem::path& base_dir) {
  toml::Document doc = toml::parse(text);
  reject_unknown(doc);
  ExperimentConfig cfg;

  const std::string ex = "experiment";
  cfg.demonstrator =
      env::make_spec(serialize::task_from_name(doc.get_string(ex, "task", "pendulum_swingup")));
  if (doc.has(ex, "algorithms")) {
    cfg.algorithms.clear();
    for (const auto& v : doc.at(ex, "algorithms").as_array()) {
      cfg.algorithms.push_back(gan::algorithm_from_name(v.as_string()));
    }
  }
  if (doc.has(ex, "imitators")) {
    cfg.imitators.clear();
    for (const auto& row : doc.at(ex, "imitators").as_array()) {
      std::vector<double> scales = floats_from(row, "imitators rows");
      if (scales.size() != 3) {
        throw std::runtime_error(
            "config: each imitator needs [pole_mass, cart_mass, cart_dim] scales");
      }
      cfg.imitators.push_back({scales[0], scales[1], scales[2]});
    }
  }
  if (doc.has(ex, "train_seeds")) {
    cfg.train_seeds.clear();
    for (const auto& v : doc.at(ex, "train_seeds").as_array()) {
      cfg.train_seeds.push_back(static_cast<std::uint64_t>(v.as_int()));
    }
  }
  cfg.n_demos = static_cast<int>(doc.get_int(ex, "n_demos", cfg.n_demos));
  cfg.eval_episodes = static_cast<int>(doc.get_int(ex, "eval_episodes", cfg.eval_episodes));
  cfg.base_seed = static_cast<std::uint64_t>(
      doc.get_int(ex, "base_seed", static_cast<std::int64_t>(cfg.base_seed)));
  cfg.output_dir = doc.get_string(ex, "output_dir", cfg.output_dir.generic_string());
  cfg.demo_file = doc.get_string(ex, "demo_file", cfg.demo_file.generic_string());

  env::EnvSpec& e = cfg.demonstrator;
  e.control_dt = doc.get_float("env", "control_dt", e.control_dt);
  e.substeps = static_cast<int>(doc.get_int("env", "substeps", e.substeps));
  e.max_steps = static_cast<int>(doc.get_int("env", "max_steps", e.max_steps));
  e.action_bound = doc.get_float("env", "action_bound", e.action_bound);
  e.pendulum_damping = doc.get_float("env", "pendulum_damping", e.pendulum_damping);
  e.pendulum_reset_angle_halfwidth =
      doc.get_float("env", "pendulum_reset_angle_halfwidth", e.pendulum_reset_angle_halfwidth);
  e.cartpole_reset_angle_halfwidth =
      doc.get_float("env", "cartpole_reset_angle_halfwidth", e.cartpole_reset_angle_halfwidth);
  e.cartpole_reset_pos_halfwidth =
      doc.get_float("env", "cartpole_reset_pos_halfwidth", e.cartpole_reset_pos_halfwidth);

  gan::GanMpcHyper& h = cfg.hyper;
  h.pretrain_epochs = static_cast<int>(doc.get_int("hyper", "pretrain_epochs", h.pretrain_epochs));
  h.finetune_epochs = static_cast<int>(doc.get_int("hyper", "finetune_epochs", h.finetune_epochs));
  h.iterations = static_cast<int>(doc.get_int("hyper", "iterations", h.iterations));
  h.rollouts_per_iter =
      static_cast<int>(doc.get_int("hyper", "rollouts_per_iter", h.rollouts_per_iter));
  h.batch = static_cast<int>(doc.get_int("hyper", "batch", h.batch));
  h.rollout_states = static_cast<int>(doc.get_int("hyper", "rollout_states", h.rollout_states));
  h.learning_rate = doc.get_float("hyper", "learning_rate", h.learning_rate);
  h.polyak_rho = doc.get_float("hyper", "polyak_rho", h.polyak_rho);
  h.r1_lambda = doc.get_float("hyper", "r1_lambda", h.r1_lambda);
  {
    double clip = doc.get_float("hyper", "clip_norm", h.clip_norm.value_or(0.0));
    h.clip_norm = clip > 0.0 ? std::optional<double>(clip) : std::nullopt;
  }
  h.disc_steps = static_cast<int>(doc.get_int("hyper", "disc_steps", h.disc_steps));
  h.gen_steps = static_cast<int>(doc.get_int("hyper", "gen_steps", h.gen_steps));
  h.hidden_dim = static_cast<int>(doc.get_int("hyper", "hidden_dim", h.hidden_dim));
  h.bc_epochs = static_cast<int>(doc.get_int("hyper", "bc_epochs", h.bc_epochs));
  h.predictor_epochs =
      static_cast<int>(doc.get_int("hyper", "predictor_epochs", h.predictor_epochs));
  h.model_learning_rate = doc.get_float("hyper", "model_learning_rate", h.model_learning_rate);
  h.spsa_samples = static_cast<int>(doc.get_int("hyper", "spsa_samples", h.spsa_samples));
  h.spsa_step = doc.get_float("hyper", "spsa_step", h.spsa_step);
  if (doc.has("hyper", "obs_mask")) {
    h.obs_mask.clear();
    for (const auto& v : doc.at("hyper", "obs_mask").as_array()) {
      h.obs_mask.push_back(v.as_bool());
    }
  }

  mpc::MpcConfig& m = cfg.mpc;
  m.horizon = static_cast<int>(doc.get_int("mpc", "horizon", m.horizon));
  m.gamma = doc.get_float("mpc", "gamma", m.gamma);
  m.max_ilqr_iters = static_cast<int>(doc.get_int("mpc", "max_ilqr_iters", m.max_ilqr_iters));
  m.unroll_iters = static_cast<int>(doc.get_int("mpc", "unroll_iters", m.unroll_iters));
  m.mu_init = doc.get_float("mpc", "mu_init", m.mu_init);
  m.mu_factor = doc.get_float("mpc", "mu_factor", m.mu_factor);
  m.mu_max = doc.get_float("mpc", "mu_max", m.mu_max);
  if (doc.has("mpc", "line_search_alphas")) {
    m.line_search_alphas = floats_from(doc.at("mpc", "line_search_alphas"), "line_search_alphas");
  }
  m.convergence_tol = doc.get_float("mpc", "convergence_tol", m.convergence_tol);
  m.action_bound = doc.get_float("mpc", "action_bound", m.action_bound);
  m.squash = squash_from_name(doc.get_string("mpc", "squash", squash_name(m.squash)));
  m.generator_grad =
      grad_from_name(doc.get_string("mpc", "generator_grad", grad_name(m.generator_grad)));

  if (!base_dir.empty()) {
    if (cfg.output_dir.is_relative()) cfg.output_dir = base_dir / cfg.output_dir;
    if (cfg.demo_file.is_relative()) cfg.demo_file = base_dir / cfg.demo_file;
  }
  cfg.validate();
  return cfg;
}

std::string config_to_toml(const ExperimentConfig& cfg) {
  return toml::serialize(config_to_doc(cfg, /*include_paths=*/true));
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  ExperimentConfig cfg =
      config_from_toml(serialize::read_text_file(path), fs::absolute(path).parent_path());
  if (const char* out = std::getenv("GANMPC_OUT"); out != nullptr && *out != '\0') {
    cfg.output_dir = out;
  }
  return cfg;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  return fnv1a(toml::serialize(config_to_doc(cfg, /*include_paths=*/false)));
}

std::string imitator_tag(const env::PhysicalParams& p) {
  return "p" + dts(p.pole_mass_scale) + "c" + dts(p.cart_mass_scale) + "d" +
         dts(p.cart_dim_scale);
}

RunPaths run_paths(const ExperimentConfig& cfg, gan::Algorithm algorithm,
                   const env::PhysicalParams& imitator, std::uint64_t seed) {
  const std::string name = serialize::task_name(cfg.demonstrator.task) + "-" +
                           gan::algorithm_name(algorithm) + "-" + imitator_tag(imitator) + "-s" +
                           std::to_string(seed) + "-" + hex64(config_hash(cfg)).substr(0, 8);
  RunPaths rp;
  rp.dir = cfg.output_dir / name;
  rp.manifest = rp.dir / "manifest.json";
  rp.metrics = rp.dir / "metrics.csv";
  rp.checkpoint = rp.dir / "checkpoint.json";
  rp.results = rp.dir / "results.json";
  rp.config = rp.dir / "config.toml";
  return rp;
}

std::filesystem::path collect_demos(const ExperimentConfig& cfg) {
  cfg.validate();
  const env::EnvSpec& spec = cfg.demonstrator;
  std::vector<serialize::TrajectoryRecord> records;
  records.reserve(cfg.n_demos);
  double reward_sum = 0.0;
  long step_sum = 0;
  for (int i = 0; i < cfg.n_demos; ++i) {
    const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(i);
    env::Trajectory tr = env::rollout(
        spec, [&spec](const VectorXd& s) { return env::expert_action(spec, s); }, seed,
        spec.max_steps);
    reward_sum += tr.total_reward();
    step_sum += tr.length();
    records.push_back({spec.task, spec.physical, seed, std::move(tr)});
  }
  const double mean_step_reward = reward_sum / static_cast<double>(step_sum);
  const double floor = env::expert_reward_floor(spec.task);
  if (mean_step_reward < floor) {
    throw std::runtime_error("demo collection: scripted policy averaged " +
                             dts(mean_step_reward) + " reward per step, below the floor " +
                             dts(floor));
  }
  if (!cfg.demo_file.parent_path().empty()) {
    fs::create_directories(cfg.demo_file.parent_path());
  }
  serialize::write_trajectory_file(cfg.demo_file, records);
  return cfg.demo_file;
}

json checkpoint_to_json(const gan::TrainState& st, gan::Algorithm algorithm) {
  return json{
      {"format_version", 1},
      {"algorithm", gan::algorithm_name(algorithm)},
      {"task", serialize::task_name(st.dynamics.task)},
      {"action_bound", dts(st.bc.action_bound)},
      {"critic_input_dim", st.disc.params.input_dim()},
      {"hidden_dim", st.disc.params.hidden_dim()},
      {"iteration", st.iteration},
      {"interaction_steps", st.interaction_steps},
      {"seed", st.seed},
      {"error", st.error},
      {"dynamics",
       {{"net", serialize::params_to_json(st.dynamics.spec, st.dynamics.params)},
        {"norm_mean", serialize::vector_to_json(st.dynamics.normalizer.mean)},
        {"norm_std", serialize::vector_to_json(st.dynamics.normalizer.std)}}},
      {"bc", {{"net", serialize::params_to_json(st.bc.spec, st.bc.params)}}},
      {"predictor", {{"net", serialize::params_to_json(st.predictor.spec, st.predictor.params)}}},
      {"gen_live", cost_to_json(st.gen_live)},
      {"gen_deployed", cost_to_json(st.gen_deployed)},
      {"critic", serialize::encoder_to_json(st.disc.params)},
  };
}

std::pair<gan::TrainState, gan::Algorithm> checkpoint_from_json(const json& j) {
  if (j.at("format_version").get<int>() != 1) {
    throw std::runtime_error("checkpoint: unknown format version");
  }
  const env::Task task = serialize::task_from_name(j.at("task").get<std::string>());
  const double action_bound = string_to_double(j.at("action_bound").get<std::string>());
  const int critic_input = j.at("critic_input_dim").get<int>();
  const int hidden = j.at("hidden_dim").get<int>();
  gan::TrainState st(task, action_bound, critic_input, hidden);
  st.iteration = j.at("iteration").get<int>();
  st.interaction_steps = j.at("interaction_steps").get<long>();
  st.seed = j.at("seed").get<std::uint64_t>();
  st.error = j.at("error").get<std::string>();

  {
    const json& d = j.at("dynamics");
    auto [spec, params] = serialize::params_from_json(d.at("net"));
    st.dynamics.spec = spec;
    st.dynamics.params = std::move(params);
    st.dynamics.normalizer.mean = serialize::vector_from_json(d.at("norm_mean"));
    st.dynamics.normalizer.std = serialize::vector_from_json(d.at("norm_std"));
  }
  {
    auto [spec, params] = serialize::params_from_json(j.at("bc").at("net"));
    st.bc.spec = spec;
    st.bc.params = std::move(params);
  }
  {
    auto [spec, params] = serialize::params_from_json(j.at("predictor").at("net"));
    st.predictor.spec = spec;
    st.predictor.params = std::move(params);
  }
  cost_from_json(j.at("gen_live"), st.gen_live);
  cost_from_json(j.at("gen_deployed"), st.gen_deployed);
  st.disc.params = serialize::encoder_from_json(j.at("critic"));
  return {std::move(st), gan::algorithm_from_name(j.at("algorithm").get<std::string>())};
}

env::Policy policy_from_state(const gan::TrainState& st, gan::Algorithm algorithm,
                              const ExperimentConfig& cfg, const env::EnvSpec& imitator_spec) {
  if (algorithm == gan::Algorithm::kBc) {
    models::BcPolicy bc = st.bc;
    return [bc](const VectorXd& s) { return bc.act(s); };
  }
  auto held = std::make_shared<gan::TrainState>(st);
  mpc::MpcConfig mc = resolved_mpc(cfg, imitator_spec);
  return [held, mc](const VectorXd& s) {
    return mpc::mpc_policy(held->deployed_models(), mc, s);
  };
}

std::filesystem::path run_training(const ExperimentConfig& cfg, gan::Algorithm algorithm,
                                   const env::PhysicalParams& imitator, std::uint64_t seed) {
  cfg.validate();
  const env::EnvSpec ispec = cfg.imitator_spec(imitator);
  const mpc::MpcConfig mc = resolved_mpc(cfg, ispec);

  std::vector<serialize::TrajectoryRecord> records =
      serialize::read_trajectory_file(cfg.demo_file);
  if (static_cast<int>(records.size()) < cfg.n_demos) {
    throw std::runtime_error("demo file holds " + std::to_string(records.size()) +
                             " trajectories, config wants " + std::to_string(cfg.n_demos));
  }
  env::TrajectorySet demos;
  demos.reserve(cfg.n_demos);
  for (int i = 0; i < cfg.n_demos; ++i) {
    if (records[i].task != cfg.demonstrator.task) {
      throw std::runtime_error("demo file task does not match the config");
    }
    demos.push_back(std::move(records[i].trajectory));
  }
  const std::uint64_t demo_hash = serialize::hash_file(cfg.demo_file);

  RunPaths rp = run_paths(cfg, algorithm, imitator, seed);
  fs::create_directories(rp.dir);
  fs::remove(rp.results);  // stale evaluations never outlive a retrain
  serialize::write_text_file(rp.config, config_to_toml(cfg));

  gan::GanMpcHyper hyper = cfg.hyper;
  hyper.algorithm = algorithm;

  {
    const std::vector<bool> mask = hyper.resolved_mask(env::state_dim(ispec.task));
    const int visible = static_cast<int>(std::count(mask.begin(), mask.end(), true));
    gan::TrainState blank(ispec.task, ispec.effective_action_bound(), visible, hyper.hidden_dim);
    write_json_file(rp.manifest,
                    make_manifest(cfg, algorithm, imitator, seed, demo_hash, blank, false));
  }

  const auto persist = [&rp, algorithm](const gan::TrainState& st) {
    write_json_file(rp.checkpoint, checkpoint_to_json(st, algorithm));
    serialize::write_text_file(rp.metrics, gan::metrics_csv(st.log));
  };

  gan::TrainState st = gan::train(ispec, demos, hyper, mc, seed, persist);
  persist(st);
  write_json_file(rp.manifest,
                  make_manifest(cfg, algorithm, imitator, seed, demo_hash, st, st.error.empty()));
  return rp.dir;
}

json eval_to_json(const EvalResult& r) {
  json imit = json::array();
  json demo = json::array();
  for (double v : r.imitator_rewards) imit.push_back(dts(v));
  for (double v : r.demonstrator_rewards) demo.push_back(dts(v));
  return json{
      {"format_version", 1},
      {"episodes", static_cast<int>(r.imitator_rewards.size())},
      {"imitator_rewards", imit},
      {"demonstrator_rewards", demo},
      {"mean_imitator", dts(r.mean_imitator)},
      {"mean_demonstrator", dts(r.mean_demonstrator)},
      {"rel_reward", dts(r.rel_reward)},
  };
}

EvalResult eval_from_json(const json& j) {
  EvalResult r;
  for (const auto& v : j.at("imitator_rewards")) {
    r.imitator_rewards.push_back(string_to_double(v.get<std::string>()));
  }
  for (const auto& v : j.at("demonstrator_rewards")) {
    r.demonstrator_rewards.push_back(string_to_double(v.get<std::string>()));
  }
  r.mean_imitator = string_to_double(j.at("mean_imitator").get<std::string>());
  r.mean_demonstrator = string_to_double(j.at("mean_demonstrator").get<std::string>());
  r.rel_reward = string_to_double(j.at("rel_reward").get<std::string>());
  return r;
}

EvalResult evaluate(const ExperimentConfig& cfg, const std::filesystem::path& run_dir) {
  cfg.validate();
  const json manifest = read_json_file(run_dir / "manifest.json");
  if (manifest.at("config_hash").get<std::string>() != hex64(config_hash(cfg))) {
    throw std::runtime_error("evaluate: run was trained under a different config");
  }
  const std::string err = manifest.at("error").get<std::string>();
  if (!err.empty()) {
    throw std::runtime_error("evaluate: training failed: " + err);
  }
  auto [st, algorithm] = checkpoint_from_json(read_json_file(run_dir / "checkpoint.json"));
  const env::PhysicalParams imitator = physical_from_json(manifest.at("imitator"));

  const env::EnvSpec ispec = cfg.imitator_spec(imitator);
  const env::EnvSpec& dspec = cfg.demonstrator;
  const env::Policy policy = policy_from_state(st, algorithm, cfg, ispec);
  const env::Policy expert = [&dspec](const VectorXd& s) {
    return env::expert_action(dspec, s);
  };

  EvalResult r;
  r.imitator_rewards.reserve(cfg.eval_episodes);
  r.demonstrator_rewards.reserve(cfg.eval_episodes);
  for (int j = 0; j < cfg.eval_episodes; ++j) {
    const std::uint64_t seed = cfg.base_seed + 20000 + static_cast<std::uint64_t>(j);
    r.imitator_rewards.push_back(
        env::rollout(ispec, policy, seed, ispec.max_steps).total_reward());
    r.demonstrator_rewards.push_back(
        env::rollout(dspec, expert, seed, dspec.max_steps).total_reward());
  }
  const auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  r.mean_imitator = mean(r.imitator_rewards);
  r.mean_demonstrator = mean(r.demonstrator_rewards);
  if (r.mean_demonstrator <= 0.0) {
    throw std::runtime_error("evaluate: demonstrator reference reward is not positive");
  }
  r.rel_reward = r.mean_imitator / r.mean_demonstrator;
  write_json_file(run_dir / "results.json", eval_to_json(r));
  return r;
}

std::filesystem::path ensure_run(const ExperimentConfig& cfg, gan::Algorithm algorithm,
                                 const env::PhysicalParams& imitator, std::uint64_t seed) {
  RunPaths rp = run_paths(cfg, algorithm, imitator, seed);
  if (fs::exists(rp.manifest) && fs::exists(rp.results)) {
    try {
      const json manifest = read_json_file(rp.manifest);
      if (manifest.at("config_hash").get<std::string>() == hex64(config_hash(cfg)) &&
          manifest.at("completed").get<bool>() &&
          manifest.at("error").get<std::string>().empty()) {
        return rp.dir;
      }
    } catch (const std::exception&) {
      // fall through to retrain
    }
  }
  run_training(cfg, algorithm, imitator, seed);
  evaluate(cfg, rp.dir);
  return rp.dir;
}

Report report(std::span<const std::filesystem::path> run_dirs) {
  std::vector<RunInfo> runs;
  runs.reserve(run_dirs.size());
  for (const auto& dir : run_dirs) {
    const json manifest = read_json_file(dir / "manifest.json");
    RunInfo info;
    info.task = manifest.at("task").get<std::string>();
    info.imitator = physical_from_json(manifest.at("imitator"));
    info.algorithm = gan::algorithm_from_name(manifest.at("algorithm").get<std::string>());
    info.seed = manifest.at("seed").get<std::uint64_t>();
    if (fs::exists(dir / "results.json")) {
      info.rel_reward = eval_from_json(read_json_file(dir / "results.json")).rel_reward;
      info.has_results = true;
    }
    runs.push_back(std::move(info));
  }

  using Key = std::tuple<std::string, double, double, double, int>;
  struct Agg {
    std::vector<double> rels;
    int missing = 0;
  };
  std::map<Key, Agg> groups;
  for (const auto& run : runs) {
    Key key{run.task, run.imitator.pole_mass_scale, run.imitator.cart_mass_scale,
            run.imitator.cart_dim_scale, static_cast<int>(run.algorithm)};
    Agg& agg = groups[key];
    if (run.has_results) {
      agg.rels.push_back(run.rel_reward);
    } else {
      ++agg.missing;
    }
  }

  Report rep;
  for (const auto& [key, agg] : groups) {
    ReportRow row;
    row.task = std::get<0>(key);
    row.imitator = {std::get<1>(key), std::get<2>(key), std::get<3>(key)};
    row.algorithm = static_cast<gan::Algorithm>(std::get<4>(key));
    row.seeds = static_cast<int>(agg.rels.size());
    if (!agg.rels.empty()) {
      double sum = 0.0;
      for (double r : agg.rels) sum += r;
      row.rel_mean = sum / static_cast<double>(agg.rels.size());
      double var = 0.0;
      for (double r : agg.rels) var += (r - row.rel_mean) * (r - row.rel_mean);
      row.rel_std = std::sqrt(var / static_cast<double>(agg.rels.size()));
    }
    row.complete = agg.missing == 0 && !agg.rels.empty();
    if (!row.complete) rep.complete = false;
    rep.rows.push_back(std::move(row));
  }

  rep.csv = "task,imitator,algorithm,seeds,rel_mean,rel_std,complete\n";
  rep.plot_csv =
      "task,pole_mass_scale,cart_mass_scale,cart_dim_scale,algorithm,rel_mean,rel_std\n";
  for (const auto& row : rep.rows) {
    rep.csv += row.task + "," + imitator_tag(row.imitator) + "," +
               gan::algorithm_name(row.algorithm) + "," + std::to_string(row.seeds) + "," +
               dts(row.rel_mean) + "," + dts(row.rel_std) + "," +
               (row.complete ? "true" : "false") + "\n";
    rep.plot_csv += row.task + "," + dts(row.imitator.pole_mass_scale) + "," +
                    dts(row.imitator.cart_mass_scale) + "," + dts(row.imitator.cart_dim_scale) +
                    "," + gan::algorithm_name(row.algorithm) + "," + dts(row.rel_mean) + "," +
                    dts(row.rel_std) + "\n";
  }

  // Text table: one block per task, imitators as rows, algorithms as columns.
  std::vector<std::string> tasks;
  for (const auto& row : rep.rows) {
    if (std::find(tasks.begin(), tasks.end(), row.task) == tasks.end()) tasks.push_back(row.task);
  }
  for (const auto& task : tasks) {
    std::vector<gan::Algorithm> algos;
    std::vector<env::PhysicalParams> imits;
    for (const auto& row : rep.rows) {
      if (row.task != task) continue;
      if (std::find(algos.begin(), algos.end(), row.algorithm) == algos.end()) {
        algos.push_back(row.algorithm);
      }
      bool seen = false;
      for (const auto& p : imits) seen = seen || p == row.imitator;
      if (!seen) imits.push_back(row.imitator);
    }
    std::sort(algos.begin(), algos.end());

    const std::size_t cell_w = 18;
    const auto pad = [cell_w](std::string s) {
      while (s.size() < cell_w) s.push_back(' ');
      return s;
    };
    rep.table += task + " (reward relative to the demonstrator)\n";
    std::string header = pad("imitator");
    for (auto a : algos) header += pad(gan::algorithm_name(a));
    rep.table += header + "\n";
    for (const auto& p : imits) {
      std::string line = pad(imitator_tag(p));
      for (auto a : algos) {
        const ReportRow* found = nullptr;
        for (const auto& row : rep.rows) {
          if (row.task == task && row.imitator == p && row.algorithm == a) found = &row;
        }
        if (found != nullptr && found->seeds > 0) {
          std::string cell = table_cell(found->rel_mean, found->rel_std);
          if (!found->complete) cell += " *";
          line += pad(cell);
        } else {
          line += pad("--");
        }
      }
      rep.table += line + "\n";
    }
    rep.table += "\n";
  }
  if (!rep.complete) rep.table += "* at least one run in this row is missing results\n";
  return rep;
}

}  // namespace ganmpc::harness
