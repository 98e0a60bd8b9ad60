#include "ganmpc/serialize.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ganmpc::serialize {
namespace {

constexpr int kTrajectoryFormatVersion = 1;
constexpr int kParamsFormatVersion = 1;

std::string activation_name(nn::Activation a) {
  switch (a) {
    case nn::Activation::kRelu:
      return "relu";
    case nn::Activation::kTanh:
      return "tanh";
    case nn::Activation::kIdentity:
      return "identity";
  }
  throw std::logic_error("unknown activation");
}

nn::Activation activation_from_name(const std::string& s) {
  if (s == "relu") return nn::Activation::kRelu;
  if (s == "tanh") return nn::Activation::kTanh;
  if (s == "identity") return nn::Activation::kIdentity;
  throw std::runtime_error("unknown activation name: " + s);
}

std::string output_name(nn::OutputActivation a) {
  return a == nn::OutputActivation::kSoftplus ? "softplus" : "identity";
}

nn::OutputActivation output_from_name(const std::string& s) {
  if (s == "softplus") return nn::OutputActivation::kSoftplus;
  if (s == "identity") return nn::OutputActivation::kIdentity;
  throw std::runtime_error("unknown output activation name: " + s);
}

}  // namespace

json vector_to_json(const VectorXd& v) {
  json arr = json::array();
  for (long i = 0; i < v.size(); ++i) arr.push_back(double_to_string(v[i]));
  return arr;
}

VectorXd vector_from_json(const json& j) {
  VectorXd v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v[i] = string_to_double(j[i].get<std::string>());
  return v;
}

json matrix_to_json(const MatrixXd& m) {
  json arr = json::array();
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) arr.push_back(double_to_string(m(r, c)));
  return arr;
}

MatrixXd matrix_from_json(const json& j, long rows, long cols) {
  if (static_cast<long>(j.size()) != rows * cols)
    throw std::runtime_error("matrix entry count mismatch");
  MatrixXd m(rows, cols);
  size_t k = 0;
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = string_to_double(j[k++].get<std::string>());
  return m;
}

json params_to_json(const nn::NetworkSpec& spec, const nn::NetworkParams& params) {
  if (!params.shapes_match(spec)) throw std::runtime_error("params do not match spec");
  json j;
  j["version"] = kParamsFormatVersion;
  j["layer_sizes"] = spec.layer_sizes();
  json acts = json::array();
  for (auto a : spec.hidden_activations()) acts.push_back(activation_name(a));
  j["hidden_activations"] = acts;
  j["output_activation"] = output_name(spec.output_activation());
  json w = json::array(), b = json::array();
  for (size_t l = 0; l < params.w.size(); ++l) {
    w.push_back(matrix_to_json(params.w[l]));
    b.push_back(vector_to_json(params.b[l]));
  }
  j["w"] = w;
  j["b"] = b;
  return j;
}

std::pair<nn::NetworkSpec, nn::NetworkParams> params_from_json(const json& j) {
  if (j.at("version").get<int>() != kParamsFormatVersion)
    throw std::runtime_error("unsupported params format version");
  std::vector<int> sizes = j.at("layer_sizes").get<std::vector<int>>();
  std::vector<nn::Activation> acts;
  for (const auto& a : j.at("hidden_activations")) acts.push_back(activation_from_name(a.get<std::string>()));
  nn::NetworkSpec spec(sizes, acts, output_from_name(j.at("output_activation").get<std::string>()));
  nn::NetworkParams params;
  const json& w = j.at("w");
  const json& b = j.at("b");
  for (int l = 0; l < spec.num_layers(); ++l) {
    params.w.push_back(matrix_from_json(w.at(l), sizes[l + 1], sizes[l]));
    params.b.push_back(vector_from_json(b.at(l)));
  }
  if (!params.shapes_match(spec)) throw std::runtime_error("decoded params do not match spec");
  return {spec, params};
}

json encoder_to_json(const nn::RecurrentEncoderParams& p) {
  json j;
  j["version"] = kParamsFormatVersion;
  j["input_dim"] = p.input_dim();
  j["hidden_dim"] = p.hidden_dim();
  j["wz"] = matrix_to_json(p.wz);
  j["uz"] = matrix_to_json(p.uz);
  j["wr"] = matrix_to_json(p.wr);
  j["ur"] = matrix_to_json(p.ur);
  j["wc"] = matrix_to_json(p.wc);
  j["uc"] = matrix_to_json(p.uc);
  j["bz"] = vector_to_json(p.bz);
  j["br"] = vector_to_json(p.br);
  j["bc"] = vector_to_json(p.bc);
  j["readout_w"] = vector_to_json(p.readout_w);
  j["readout_b"] = double_to_string(p.readout_b);
  return j;
}

nn::RecurrentEncoderParams encoder_from_json(const json& j) {
  int in = j.at("input_dim").get<int>();
  int hidden = j.at("hidden_dim").get<int>();
  nn::RecurrentEncoderParams p = nn::RecurrentEncoderParams::zeros(in, hidden);
  p.wz = matrix_from_json(j.at("wz"), hidden, in);
  p.uz = matrix_from_json(j.at("uz"), hidden, hidden);
  p.wr = matrix_from_json(j.at("wr"), hidden, in);
  p.ur = matrix_from_json(j.at("ur"), hidden, hidden);
  p.wc = matrix_from_json(j.at("wc"), hidden, in);
  p.uc = matrix_from_json(j.at("uc"), hidden, hidden);
  p.bz = vector_from_json(j.at("bz"));
  p.br = vector_from_json(j.at("br"));
  p.bc = vector_from_json(j.at("bc"));
  p.readout_w = vector_from_json(j.at("readout_w"));
  p.readout_b = string_to_double(j.at("readout_b").get<std::string>());
  return p;
}

std::string task_name(env::Task task) {
  return task == env::Task::kPendulumSwingup ? "pendulum_swingup" : "cartpole_balance";
}

env::Task task_from_name(const std::string& name) {
  if (name == "pendulum_swingup") return env::Task::kPendulumSwingup;
  if (name == "cartpole_balance") return env::Task::kCartpoleBalance;
  throw std::runtime_error("unknown task name: " + name);
}

json env_spec_to_json(const env::EnvSpec& spec) {
  json j;
  j["task"] = task_name(spec.task);
  j["physical"] = {double_to_string(spec.physical.pole_mass_scale),
                   double_to_string(spec.physical.cart_mass_scale),
                   double_to_string(spec.physical.cart_dim_scale)};
  j["control_dt"] = double_to_string(spec.control_dt);
  j["substeps"] = spec.substeps;
  j["max_steps"] = spec.max_steps;
  j["action_bound"] = double_to_string(spec.action_bound);
  j["pendulum_damping"] = double_to_string(spec.pendulum_damping);
  j["seed"] = spec.seed;
  return j;
}

env::EnvSpec env_spec_from_json(const json& j) {
  env::EnvSpec spec;
  spec.task = task_from_name(j.at("task").get<std::string>());
  const json& p = j.at("physical");
  spec.physical.pole_mass_scale = string_to_double(p.at(0).get<std::string>());
  spec.physical.cart_mass_scale = string_to_double(p.at(1).get<std::string>());
  spec.physical.cart_dim_scale = string_to_double(p.at(2).get<std::string>());
  spec.control_dt = string_to_double(j.at("control_dt").get<std::string>());
  spec.substeps = j.at("substeps").get<int>();
  spec.max_steps = j.at("max_steps").get<int>();
  spec.action_bound = string_to_double(j.at("action_bound").get<std::string>());
  spec.pendulum_damping = string_to_double(j.at("pendulum_damping").get<std::string>());
  spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

std::uint64_t env_spec_hash(const env::EnvSpec& spec) {
  return fnv1a(env_spec_to_json(spec).dump());
}

void write_trajectory_file(const std::filesystem::path& path,
                           std::span<const TrajectoryRecord> records) {
  std::ostringstream out;
  json header;
  header["format"] = "trajectories";
  header["version"] = kTrajectoryFormatVersion;
  header["count"] = records.size();
  out << header.dump() << "\n";
  for (const auto& rec : records) {
    rec.trajectory.validate();
    json j;
    j["task"] = task_name(rec.task);
    j["physical"] = {double_to_string(rec.physical.pole_mass_scale),
                     double_to_string(rec.physical.cart_mass_scale),
                     double_to_string(rec.physical.cart_dim_scale)};
    j["seed"] = rec.seed;
    json states = json::array(), actions = json::array(), rewards = json::array();
    for (const auto& s : rec.trajectory.states) states.push_back(vector_to_json(s));
    for (const auto& a : rec.trajectory.actions) actions.push_back(vector_to_json(a));
    for (double r : rec.trajectory.rewards) rewards.push_back(double_to_string(r));
    j["states"] = states;
    j["actions"] = actions;
    j["rewards"] = rewards;
    out << j.dump() << "\n";
  }
  write_text_file(path, out.str());
}

std::vector<TrajectoryRecord> read_trajectory_file(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("trajectory file is empty: " + path.string());
  json header = json::parse(line);
  if (header.at("format").get<std::string>() != "trajectories" ||
      header.at("version").get<int>() != kTrajectoryFormatVersion)
    throw std::runtime_error("unsupported trajectory file header: " + path.string());

  std::vector<TrajectoryRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    TrajectoryRecord rec;
    rec.task = task_from_name(j.at("task").get<std::string>());
    const json& p = j.at("physical");
    rec.physical.pole_mass_scale = string_to_double(p.at(0).get<std::string>());
    rec.physical.cart_mass_scale = string_to_double(p.at(1).get<std::string>());
    rec.physical.cart_dim_scale = string_to_double(p.at(2).get<std::string>());
    rec.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("states")) rec.trajectory.states.push_back(vector_from_json(s));
    for (const auto& a : j.at("actions")) rec.trajectory.actions.push_back(vector_from_json(a));
    for (const auto& r : j.at("rewards"))
      rec.trajectory.rewards.push_back(string_to_double(r.get<std::string>()));
    rec.trajectory.validate();
    records.push_back(std::move(rec));
  }
  if (records.size() != header.at("count").get<size_t>())
    throw std::runtime_error("trajectory count does not match header: " + path.string());
  return records;
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::string bytes = read_text_file(path);
  return fnv1a(bytes.data(), bytes.size());
}

}  // namespace ganmpc::serialize
