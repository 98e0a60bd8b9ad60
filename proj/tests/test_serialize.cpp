#include "ganmpc/serialize.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

using namespace ganmpc;
using namespace ganmpc::serialize;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "ganmpc_serialize_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("decimal strings round-trip awkward doubles exactly") {
  VectorXd v(7);
  v << M_PI, 1e-300, -0.0, 0.1, std::nextafter(1.0, 2.0), -1.7976931348623157e308, 5e-324;
  VectorXd back = vector_from_json(vector_to_json(v));
  for (long i = 0; i < v.size(); ++i) {
    CHECK(std::memcmp(&back[i], &v[i], sizeof(double)) == 0);
  }
}

TEST_CASE("network params survive a JSON round trip bit for bit") {
  nn::NetworkSpec spec({4, 7, 5, 2}, {nn::Activation::kRelu, nn::Activation::kTanh},
                       nn::OutputActivation::kSoftplus);
  nn::NetworkParams p = nn::glorot_init(spec, 123);
  p.b[1][0] = 1.0 / 3.0;
  p.w[0](0, 0) = -1e-17;

  auto [spec2, p2] = params_from_json(params_to_json(spec, p));
  CHECK(spec2 == spec);
  CHECK(p2.flatten() == p.flatten());
}

TEST_CASE("mismatched params are rejected") {
  nn::NetworkSpec spec({3, 4, 1}, nn::Activation::kRelu);
  nn::NetworkSpec other({3, 5, 1}, nn::Activation::kRelu);
  nn::NetworkParams p = nn::glorot_init(other, 1);
  CHECK_THROWS(params_to_json(spec, p));
}

TEST_CASE("encoder params survive a JSON round trip bit for bit") {
  nn::RecurrentEncoderParams p = nn::RecurrentEncoderParams::glorot_init(3, 6, 9);
  p.readout_b = std::atan(1.0);
  nn::RecurrentEncoderParams q = encoder_from_json(encoder_to_json(p));
  CHECK(q.flatten() == p.flatten());
  CHECK(q.readout_b == p.readout_b);
}

TEST_CASE("env spec round trip and hash sensitivity") {
  env::EnvSpec spec = env::make_spec(env::Task::kCartpoleBalance,
                                     {.pole_mass_scale = 2.0, .cart_dim_scale = 1.5});
  spec.seed = 77;
  env::EnvSpec back = env_spec_from_json(env_spec_to_json(spec));
  CHECK(back.task == spec.task);
  CHECK(back.physical == spec.physical);
  CHECK(back.seed == spec.seed);
  CHECK(env_spec_hash(back) == env_spec_hash(spec));

  env::EnvSpec tweaked = spec;
  tweaked.physical.pole_mass_scale = 3.0;
  CHECK(env_spec_hash(tweaked) != env_spec_hash(spec));
}

TEST_CASE("task names round trip") {
  for (env::Task t : {env::Task::kPendulumSwingup, env::Task::kCartpoleBalance})
    CHECK(task_from_name(task_name(t)) == t);
  CHECK_THROWS(task_from_name("cheetah_run"));
}

TEST_CASE("trajectory files round trip exactly") {
  env::EnvSpec spec = env::make_spec(env::Task::kPendulumSwingup);
  env::Policy expert = [&](const VectorXd& s) { return env::expert_action(spec, s); };

  std::vector<TrajectoryRecord> records;
  for (std::uint64_t seed : {0, 1, 2}) {
    TrajectoryRecord rec;
    rec.task = spec.task;
    rec.physical = spec.physical;
    rec.seed = seed;
    rec.trajectory = env::rollout(spec, expert, seed, 40);
    records.push_back(std::move(rec));
  }

  auto path = temp_path("demos.ndjson");
  write_trajectory_file(path, records);
  auto loaded = read_trajectory_file(path);
  REQUIRE(loaded.size() == records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    CHECK(loaded[i].task == records[i].task);
    CHECK(loaded[i].physical == records[i].physical);
    CHECK(loaded[i].seed == records[i].seed);
    const auto& a = records[i].trajectory;
    const auto& b = loaded[i].trajectory;
    REQUIRE(b.states.size() == a.states.size());
    for (size_t k = 0; k < a.states.size(); ++k) CHECK(b.states[k] == a.states[k]);
    for (size_t k = 0; k < a.actions.size(); ++k) CHECK(b.actions[k] == a.actions[k]);
    for (size_t k = 0; k < a.rewards.size(); ++k) CHECK(b.rewards[k] == a.rewards[k]);
  }

  // identical content writes identical bytes
  auto path2 = temp_path("demos2.ndjson");
  write_trajectory_file(path2, records);
  CHECK(hash_file(path) == hash_file(path2));

  // corrupt header is rejected
  auto bad = temp_path("bad.ndjson");
  write_text_file(bad, "{\"format\":\"other\",\"version\":1,\"count\":0}\n");
  CHECK_THROWS(read_trajectory_file(bad));

  // count mismatch is rejected
  auto truncated = temp_path("truncated.ndjson");
  std::string text = read_text_file(path);
  text.erase(text.rfind("{\"actions\""));
  write_text_file(truncated, text);
  CHECK_THROWS(read_trajectory_file(truncated));
}

TEST_CASE("missing files raise errors") {
  CHECK_THROWS(read_text_file(temp_path("does_not_exist.json")));
  CHECK_THROWS(read_trajectory_file(temp_path("does_not_exist.ndjson")));
}
