#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ganmpc/env.hpp"
#include "ganmpc/nn.hpp"

// JSON persistence for parameters, environment specs, and trajectory sets.
// All floating-point values are stored as shortest round-trip decimal
// strings, so write/read cycles are bit-exact and file hashes are stable.
namespace ganmpc::serialize {

using nlohmann::json;

json vector_to_json(const VectorXd& v);
VectorXd vector_from_json(const json& j);

// row-major flattening of the matrix entries
json matrix_to_json(const MatrixXd& m);
MatrixXd matrix_from_json(const json& j, long rows, long cols);

json params_to_json(const nn::NetworkSpec& spec, const nn::NetworkParams& params);
std::pair<nn::NetworkSpec, nn::NetworkParams> params_from_json(const json& j);

json encoder_to_json(const nn::RecurrentEncoderParams& params);
nn::RecurrentEncoderParams encoder_from_json(const json& j);

std::string task_name(env::Task task);
env::Task task_from_name(const std::string& name);

json env_spec_to_json(const env::EnvSpec& spec);
env::EnvSpec env_spec_from_json(const json& j);
// hash of the canonical JSON encoding
std::uint64_t env_spec_hash(const env::EnvSpec& spec);

// Demonstration interchange format: one JSON record per line preceded by a
// header line carrying the format version.
struct TrajectoryRecord {
  env::Task task = env::Task::kPendulumSwingup;
  env::PhysicalParams physical;
  std::uint64_t seed = 0;
  env::Trajectory trajectory;
};

void write_trajectory_file(const std::filesystem::path& path,
                           std::span<const TrajectoryRecord> records);
std::vector<TrajectoryRecord> read_trajectory_file(const std::filesystem::path& path);

void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);
std::uint64_t hash_file(const std::filesystem::path& path);

}  // namespace ganmpc::serialize
