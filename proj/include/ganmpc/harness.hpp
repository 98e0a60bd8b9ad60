#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ganmpc/env.hpp"
#include "ganmpc/gan.hpp"
#include "ganmpc/mpc.hpp"
#include "ganmpc/serialize.hpp"

namespace ganmpc::harness {

using serialize::json;

// One experiment = demonstrator task + imitator grid + algorithm list +
// shared hyperparameters. Loads from a single TOML document and serializes
// back canonically, so a config hashes to a stable run identity.
struct ExperimentConfig {
  env::EnvSpec demonstrator;  // physical params forced to (1,1,1)
  std::vector<env::PhysicalParams> imitators{{}};
  std::vector<gan::Algorithm> algorithms{gan::Algorithm::kGanMpc};
  std::vector<std::uint64_t> train_seeds{1};
  gan::GanMpcHyper hyper;
  mpc::MpcConfig mpc;
  int n_demos = 50;
  int eval_episodes = 50;
  std::uint64_t base_seed = 1000;
  std::filesystem::path output_dir = "runs";
  std::filesystem::path demo_file = "demos.jsonl";

  void validate() const;

  // Imitator env for one grid point: demonstrator spec with scaled physical
  // constants.
  env::EnvSpec imitator_spec(const env::PhysicalParams& p) const;
};

ExperimentConfig config_from_toml(const std::string& text,
                                  const std::filesystem::path& base_dir = {});
std::string config_to_toml(const ExperimentConfig& cfg);

// Reads the file, resolves demo/output paths against its directory, and lets
// the GANMPC_OUT environment variable override output_dir.
ExperimentConfig load_config(const std::filesystem::path& path);

// Hash of the canonical serialization minus the two path fields, so moving
// outputs does not change run identity.
std::uint64_t config_hash(const ExperimentConfig& cfg);

// "p1c1d1", "p2.5c1d1.5", ... : compact grid-point label used in run names.
std::string imitator_tag(const env::PhysicalParams& p);

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path manifest;    // manifest.json
  std::filesystem::path metrics;     // metrics.csv
  std::filesystem::path checkpoint;  // checkpoint.json
  std::filesystem::path results;     // results.json
  std::filesystem::path config;      // config.toml, canonical copy for later eval
};

RunPaths run_paths(const ExperimentConfig& cfg, gan::Algorithm algorithm,
                   const env::PhysicalParams& imitator, std::uint64_t seed);

// Collects scripted-expert demonstrations on the demonstrator env, episode
// seeds base_seed .. base_seed + n_demos - 1, and writes them to demo_file.
// Throws if the expert's mean per-step reward is below the task floor.
// Reruns produce a byte-identical file.
std::filesystem::path collect_demos(const ExperimentConfig& cfg);

// Trains one (algorithm, imitator, seed) cell. Writes manifest.json,
// metrics.csv, and checkpoint.json into the run directory; the checkpoint is
// rewritten after every iteration so a failed run keeps its last good state.
// Returns the run directory.
std::filesystem::path run_training(const ExperimentConfig& cfg, gan::Algorithm algorithm,
                                   const env::PhysicalParams& imitator, std::uint64_t seed);

struct EvalResult {
  std::vector<double> imitator_rewards;      // trained policy, one per episode
  std::vector<double> demonstrator_rewards;  // scripted expert, same episode seeds
  double mean_imitator = 0.0;
  double mean_demonstrator = 0.0;
  double rel_reward = 0.0;  // mean_imitator / mean_demonstrator
};

// Paired evaluation: the trained policy rolls on its imitator env while the
// scripted expert rolls on the demonstrator env with the same episode seeds
// (base_seed + 20000 + j, disjoint from demo and training seeds, shared by
// every algorithm). Writes results.json into the run directory.
EvalResult evaluate(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

EvalResult eval_from_json(const json& j);
json eval_to_json(const EvalResult& r);

// Train + evaluate, reusing the run directory when it already holds a
// completed run for the same config hash.
std::filesystem::path ensure_run(const ExperimentConfig& cfg, gan::Algorithm algorithm,
                                 const env::PhysicalParams& imitator, std::uint64_t seed);

struct ReportRow {
  std::string task;
  env::PhysicalParams imitator;
  gan::Algorithm algorithm = gan::Algorithm::kBc;
  int seeds = 0;  // runs aggregated into this row
  double rel_mean = 0.0;
  double rel_std = 0.0;
  bool complete = false;  // every contributing run has results
};

struct Report {
  std::vector<ReportRow> rows;
  std::string csv;       // one line per row, machine readable
  std::string table;     // aligned text, one block per task
  std::string plot_csv;  // task,imitator,algorithm,mean,std for plotting
  bool complete = true;  // false when any run is missing results
};

// Aggregates run directories into per-(task, imitator, algorithm) rows with
// seed means and population deviations. Ordering is deterministic: task name,
// then imitator scales, then algorithm. Runs without results.json mark their
// row incomplete instead of failing.
Report report(std::span<const std::filesystem::path> run_dirs);

// Full parameter snapshot of a training state; enough to rebuild the policy.
json checkpoint_to_json(const gan::TrainState& st, gan::Algorithm algorithm);
std::pair<gan::TrainState, gan::Algorithm> checkpoint_from_json(const json& j);

// Deployable policy for one run: the cloned network for behavior cloning,
// receding-horizon planning over the deployed generator otherwise.
env::Policy policy_from_state(const gan::TrainState& st, gan::Algorithm algorithm,
                              const ExperimentConfig& cfg, const env::EnvSpec& imitator_spec);

}  // namespace ganmpc::harness
