#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ganmpc/env.hpp"
#include "ganmpc/gan.hpp"
#include "ganmpc/harness.hpp"
#include "ganmpc/mpc.hpp"
#include "ganmpc/serialize.hpp"
#include "ganmpc/util.hpp"

namespace fs = std::filesystem;
using namespace ganmpc;

namespace {

env::PhysicalParams parse_imitator(const std::string& text) {
  std::vector<double> scales;
  std::string cur;
  for (char c : text + ",") {
    if (c == ',') {
      if (!cur.empty()) scales.push_back(string_to_double(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (scales.size() != 3) {
    throw std::runtime_error("imitator must be three comma-separated scales, e.g. 2,1,1");
  }
  return {scales[0], scales[1], scales[2]};
}

int cmd_demo_collect(const std::string& config_path) {
  harness::ExperimentConfig cfg = harness::load_config(config_path);
  fs::path out = harness::collect_demos(cfg);
  std::cout << "wrote " << cfg.n_demos << " demonstrations to " << out.string() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& algo_flag,
              const std::string& imitator_flag, const std::vector<std::uint64_t>& seed_flag,
              bool eval_after) {
  harness::ExperimentConfig cfg = harness::load_config(config_path);
  const std::vector<gan::Algorithm> algos =
      algo_flag.empty() ? cfg.algorithms
                        : std::vector<gan::Algorithm>{gan::algorithm_from_name(algo_flag)};
  const std::vector<env::PhysicalParams> imitators =
      imitator_flag.empty() ? cfg.imitators
                            : std::vector<env::PhysicalParams>{parse_imitator(imitator_flag)};
  const std::vector<std::uint64_t>& seeds = seed_flag.empty() ? cfg.train_seeds : seed_flag;

  int failures = 0;
  for (const auto& p : imitators) {
    for (auto a : algos) {
      for (auto s : seeds) {
        fs::path dir = harness::run_training(cfg, a, p, s);
        const auto manifest =
            harness::json::parse(serialize::read_text_file(dir / "manifest.json"));
        const std::string err = manifest.at("error").get<std::string>();
        if (!err.empty()) {
          ++failures;
          std::cerr << "FAILED " << dir.string() << ": " << err << "\n";
          continue;
        }
        std::cout << "trained " << dir.string() << " (interaction steps: "
                  << manifest.at("interaction_steps").get<long>() << ")\n";
        if (eval_after) {
          harness::EvalResult r = harness::evaluate(cfg, dir);
          std::cout << "  relative reward " << double_to_string(r.rel_reward) << " over "
                    << r.imitator_rewards.size() << " episodes\n";
        }
      }
    }
  }
  return failures > 0 ? 3 : 0;
}

int cmd_eval(const std::string& run_flag, const std::string& trace_path) {
  const fs::path run = run_flag;
  harness::ExperimentConfig cfg =
      harness::config_from_toml(serialize::read_text_file(run / "config.toml"));
  harness::EvalResult r = harness::evaluate(cfg, run);
  std::cout << "episodes:            " << r.imitator_rewards.size() << "\n"
            << "mean policy reward:  " << double_to_string(r.mean_imitator) << "\n"
            << "mean expert reward:  " << double_to_string(r.mean_demonstrator) << "\n"
            << "relative reward:     " << double_to_string(r.rel_reward) << "\n";

  if (!trace_path.empty()) {
    const auto manifest = harness::json::parse(serialize::read_text_file(run / "manifest.json"));
    auto [st, algorithm] =
        harness::checkpoint_from_json(harness::json::parse(serialize::read_text_file(run / "checkpoint.json")));
    env::PhysicalParams p;
    p.pole_mass_scale =
        string_to_double(manifest.at("imitator").at("pole_mass_scale").get<std::string>());
    p.cart_mass_scale =
        string_to_double(manifest.at("imitator").at("cart_mass_scale").get<std::string>());
    p.cart_dim_scale =
        string_to_double(manifest.at("imitator").at("cart_dim_scale").get<std::string>());
    env::EnvSpec ispec = cfg.imitator_spec(p);
    mpc::MpcConfig mc = cfg.mpc;
    if (mc.action_bound <= 0.0) mc.action_bound = ispec.effective_action_bound();
    const VectorXd s0 = env::reset(ispec, cfg.base_seed + 20000);
    mpc::IlqrSolution sol = mpc::mpc_solve(st.deployed_models(), mc, s0);
    serialize::write_text_file(trace_path, mpc::trace_to_json(sol));
    std::cout << "wrote solve trace to " << trace_path << "\n";
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& run_flags, const std::string& out_dir,
               bool check) {
  std::vector<fs::path> dirs(run_flags.begin(), run_flags.end());
  harness::Report rep = harness::report(dirs);
  std::cout << rep.table;
  const fs::path out = out_dir;
  fs::create_directories(out);
  serialize::write_text_file(out / "report.csv", rep.csv);
  serialize::write_text_file(out / "plot_data.csv", rep.plot_csv);
  serialize::write_text_file(out / "report.txt", rep.table);
  if (check && !rep.complete) {
    std::cerr << "check failed: at least one run is missing results\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial MPC imitation learning across mismatched dynamics"};
  app.require_subcommand(1);

  std::string demo_config;
  auto* demo = app.add_subcommand("demo-collect", "Roll the scripted expert and save demos");
  demo->add_option("--config", demo_config, "experiment TOML file")->required();

  std::string train_config, train_algo, train_imitator;
  std::vector<std::uint64_t> train_seeds;
  bool train_eval = false;
  auto* train = app.add_subcommand("train", "Train (algorithm, imitator, seed) cells");
  train->add_option("--config", train_config, "experiment TOML file")->required();
  train->add_option("--algorithm", train_algo,
                    "bc, l2_mpc_sa, l2_mpc_s, or gan_mpc (default: all from the config)");
  train->add_option("--imitator", train_imitator,
                    "physical scales as pole_mass,cart_mass,cart_dim (default: config grid)");
  train->add_option("--seed", train_seeds, "training seed, repeatable (default: config seeds)");
  train->add_flag("--eval", train_eval, "evaluate each run right after training");

  std::string eval_run, eval_trace;
  auto* ev = app.add_subcommand("eval", "Roll a trained policy against the demonstrator");
  ev->add_option("--run", eval_run, "run directory produced by train")->required();
  ev->add_option("--dump-ilqr-trace", eval_trace,
                 "also write one receding-horizon solve trace to this JSON file");

  std::vector<std::string> report_runs;
  std::string report_out = ".";
  bool report_check = false;
  auto* rep = app.add_subcommand("report", "Aggregate run directories into a results table");
  rep->add_option("--runs", report_runs, "run directories")->required()->expected(-1);
  rep->add_option("--out", report_out, "directory for report.csv / plot_data.csv / report.txt");
  rep->add_flag("--check", report_check, "exit 2 when any run is missing results");

  CLI11_PARSE(app, argc, argv);

  try {
    if (demo->parsed()) return cmd_demo_collect(demo_config);
    if (train->parsed()) {
      return cmd_train(train_config, train_algo, train_imitator, train_seeds, train_eval);
    }
    if (ev->parsed()) return cmd_eval(eval_run, eval_trace);
    if (rep->parsed()) return cmd_report(report_runs, report_out, report_check);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
