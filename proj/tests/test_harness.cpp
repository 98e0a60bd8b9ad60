#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "ganmpc/env.hpp"
#include "ganmpc/gan.hpp"
#include "ganmpc/harness.hpp"
#include "ganmpc/serialize.hpp"
#include "ganmpc/toml.hpp"
#include "ganmpc/util.hpp"

using namespace ganmpc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("ganmpc_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Small, fast experiment used by the artifact tests. Cartpole balance starts
// near the goal, so even short episodes clear the expert reward floor.
harness::ExperimentConfig tiny_config(const fs::path& dir) {
  harness::ExperimentConfig cfg;
  cfg.demonstrator = env::make_spec(env::Task::kCartpoleBalance);
  cfg.demonstrator.max_steps = 25;
  cfg.imitators = {{1.5, 1.0, 1.0}};
  cfg.algorithms = {gan::Algorithm::kBc, gan::Algorithm::kGanMpc};
  cfg.train_seeds = {1, 2};
  cfg.n_demos = 3;
  cfg.eval_episodes = 2;
  cfg.base_seed = 1000;
  cfg.output_dir = dir / "runs";
  cfg.demo_file = dir / "demos.jsonl";

  cfg.hyper.pretrain_epochs = 1;
  cfg.hyper.finetune_epochs = 1;
  cfg.hyper.iterations = 2;
  cfg.hyper.batch = 8;
  cfg.hyper.rollout_states = 4;
  cfg.hyper.hidden_dim = 8;
  cfg.hyper.bc_epochs = 3;
  cfg.hyper.predictor_epochs = 3;

  cfg.mpc.horizon = 4;
  cfg.mpc.max_ilqr_iters = 2;
  cfg.mpc.unroll_iters = 1;
  return cfg;
}

// Runs fn, returns the exception message ("" when nothing was thrown).
template <typename Fn>
std::string thrown_message(Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

bool throws_containing(const std::string& message, const std::string& needle) {
  return message.find(needle) != std::string::npos;
}

std::string drop_last_column(const std::string& csv) {
  std::string out;
  std::string line;
  for (char c : csv) {
    if (c != '\n') {
      line.push_back(c);
      continue;
    }
    auto comma = line.find_last_of(',');
    out += line.substr(0, comma);
    out += "\n";
    line.clear();
  }
  return out;
}

VectorXd flatten_cost(const mpc::CostModel& c) {
  VectorXd f(c.num_learnables() + 1);
  f << c.flatten(), c.c_a;
  return f;
}

}  // namespace

TEST_CASE("toml scalars, comments, and sections parse") {
  const std::string text =
      "# top comment\n"
      "title = \"desk \\\"lab\\\"\"\n"
      "\n"
      "[first]\n"
      "count = 42        # trailing comment\n"
      "offset = -7\n"
      "big = 1_000\n"
      "ratio = 2.5\n"
      "tiny = 1e-5\n"
      "neg = -0.125\n"
      "on = true\n"
      "off = false\n";
  toml::Document doc = toml::parse(text);
  CHECK(doc.at("", "title").as_string() == "desk \"lab\"");
  CHECK(doc.at("first", "count").as_int() == 42);
  CHECK(doc.at("first", "offset").as_int() == -7);
  CHECK(doc.at("first", "big").as_int() == 1000);
  CHECK(doc.at("first", "ratio").as_float() == 2.5);
  CHECK(doc.at("first", "tiny").as_float() == 1e-5);
  CHECK(doc.at("first", "neg").as_float() == -0.125);
  CHECK(doc.at("first", "on").as_bool());
  CHECK_FALSE(doc.at("first", "off").as_bool());
  // integers promote to float on request, never the other way
  CHECK(doc.at("first", "count").as_float() == 42.0);
  CHECK_THROWS(doc.at("first", "ratio").as_int());
}

TEST_CASE("toml arrays parse flat, nested, and across lines") {
  const std::string text =
      "flat = [1, 2, 3]\n"
      "mixed = [0.5, 2]\n"
      "rows = [[1.0, 1.0, 1.0],\n"
      "        [2.0, 1.0, 1.0],  # a comment inside\n"
      "        [3.5, 2.0, 1.5],]\n"
      "flags = [true, false]\n"
      "empty = []\n";
  toml::Document doc = toml::parse(text);
  CHECK(doc.at("", "flat").as_array().size() == 3);
  CHECK(doc.at("", "flat").as_array()[2].as_int() == 3);
  CHECK(doc.at("", "mixed").as_array()[0].as_float() == 0.5);
  const auto& rows = doc.at("", "rows").as_array();
  REQUIRE(rows.size() == 3);
  CHECK(rows[2].as_array()[0].as_float() == 3.5);
  CHECK(rows[2].as_array()[2].as_float() == 1.5);
  CHECK(doc.at("", "flags").as_array()[1].as_bool() == false);
  CHECK(doc.at("", "empty").as_array().empty());
}

TEST_CASE("toml serialization round-trips every value kind") {
  toml::Document doc;
  doc.set("", "name", toml::Value(std::string("line\nbreak\tand \"quotes\"")));
  doc.set("alpha", "whole", toml::Value(static_cast<std::int64_t>(-12)));
  doc.set("alpha", "exact_float", toml::Value(1.0));  // must stay a float
  doc.set("alpha", "pi", toml::Value(3.141592653589793));
  doc.set("alpha", "tiny", toml::Value(4.9406564584124654e-324));
  doc.set("alpha", "flag", toml::Value(true));
  doc.set("beta", "rows",
          toml::Value(std::vector<toml::Value>{
              toml::Value(std::vector<toml::Value>{toml::Value(1.5), toml::Value(2.0)}),
              toml::Value(std::vector<toml::Value>{toml::Value(static_cast<std::int64_t>(7))})}));

  const std::string text = toml::serialize(doc);
  toml::Document back = toml::parse(text);
  CHECK(back == doc);
  CHECK(back.at("alpha", "exact_float").kind() == toml::Value::Kind::kFloat);
  CHECK(back.at("alpha", "tiny").as_float() == 4.9406564584124654e-324);
  // canonical form is a fixed point
  CHECK(toml::serialize(back) == text);
}

TEST_CASE("toml parser rejects malformed input with line numbers") {
  CHECK(throws_containing(thrown_message([] { toml::parse("a = 1\na = 2\n"); }), "line 2"));
  CHECK(throws_containing(thrown_message([] { toml::parse("[s]\n[s]\n"); }), "redefined"));
  CHECK(throws_containing(thrown_message([] { toml::parse("x = \"unterminated\n"); }),
                          "unterminated string"));
  CHECK(throws_containing(thrown_message([] { toml::parse("x = [1, 2\n"); }),
                          "unterminated array"));
  CHECK(throws_containing(thrown_message([] { toml::parse("[[tables]]\nx = 1\n"); }),
                          "table arrays"));
  CHECK(throws_containing(thrown_message([] { toml::parse("x = 1 2\n"); }),
                          "trailing characters"));
  CHECK(throws_containing(thrown_message([] { toml::parse("x = 1.2.3\n"); }), "bad literal"));
  CHECK_THROWS(toml::parse("just words\n"));
  CHECK_THROWS(toml::parse("x = @\n"));
}

TEST_CASE("experiment config round-trips through its canonical toml") {
  harness::ExperimentConfig cfg;
  cfg.demonstrator = env::make_spec(env::Task::kCartpoleBalance);
  cfg.demonstrator.max_steps = 123;
  cfg.demonstrator.control_dt = 0.025;
  cfg.imitators = {{1.0, 1.0, 1.0}, {3.0, 1.0, 1.0}, {2.0, 2.0, 1.5}};
  cfg.algorithms = {gan::Algorithm::kBc, gan::Algorithm::kGanMpc};
  cfg.train_seeds = {1, 2, 3};
  cfg.n_demos = 7;
  cfg.eval_episodes = 4;
  cfg.base_seed = 512;
  cfg.output_dir = "out/here";
  cfg.demo_file = "demos/file.jsonl";
  cfg.hyper.obs_mask = {true, false, true, true, false};
  cfg.hyper.clip_norm = 3.5;
  cfg.hyper.learning_rate = 2e-5;
  cfg.mpc.squash = mpc::SquashMode::kHardClamp;
  cfg.mpc.generator_grad = mpc::GeneratorGrad::kSpsa;
  cfg.mpc.line_search_alphas = {1.0, 0.3};

  const std::string text = harness::config_to_toml(cfg);
  harness::ExperimentConfig back = harness::config_from_toml(text);
  CHECK(harness::config_to_toml(back) == text);
  CHECK(harness::config_hash(back) == harness::config_hash(cfg));
  CHECK(back.demonstrator.task == env::Task::kCartpoleBalance);
  CHECK(back.demonstrator.max_steps == 123);
  CHECK(back.imitators.size() == 3);
  CHECK(back.imitators[2].cart_dim_scale == 1.5);
  CHECK(back.algorithms == cfg.algorithms);
  CHECK(back.train_seeds == cfg.train_seeds);
  CHECK(back.hyper.obs_mask == cfg.hyper.obs_mask);
  CHECK(back.hyper.clip_norm == cfg.hyper.clip_norm);
  CHECK(back.mpc.squash == mpc::SquashMode::kHardClamp);
  CHECK(back.mpc.generator_grad == mpc::GeneratorGrad::kSpsa);
  CHECK(back.mpc.line_search_alphas == cfg.mpc.line_search_alphas);
  CHECK(back.output_dir == cfg.output_dir);
  CHECK(back.demo_file == cfg.demo_file);

  // clip_norm = 0 means "no clipping" and survives the round trip
  cfg.hyper.clip_norm.reset();
  harness::ExperimentConfig noclip = harness::config_from_toml(harness::config_to_toml(cfg));
  CHECK_FALSE(noclip.hyper.clip_norm.has_value());
}

TEST_CASE("sparse config text fills defaults and rejects unknown keys") {
  const std::string text =
      "[experiment]\n"
      "task = \"cartpole_balance\"\n"
      "imitators = [[2.0, 1.0, 1.0]]\n"
      "n_demos = 5\n";
  harness::ExperimentConfig cfg = harness::config_from_toml(text);
  CHECK(cfg.demonstrator.task == env::Task::kCartpoleBalance);
  CHECK(cfg.n_demos == 5);
  CHECK(cfg.eval_episodes == 50);            // default
  CHECK(cfg.hyper.iterations == 10);         // default
  CHECK(cfg.mpc.horizon == 10);              // default
  CHECK(cfg.imitators.size() == 1);
  CHECK(cfg.imitators[0].pole_mass_scale == 2.0);

  CHECK(throws_containing(
      thrown_message([] { harness::config_from_toml("[experiment]\nn_demoz = 5\n"); }),
      "unknown key"));
  CHECK(throws_containing(thrown_message([] { harness::config_from_toml("[expermient]\n"); }),
                          "unknown section"));
  CHECK_THROWS(harness::config_from_toml("[experiment]\nimitators = [[1.0, 2.0]]\n"));
  CHECK_THROWS(harness::config_from_toml("[experiment]\ntask = \"hopper\"\n"));
  CHECK_THROWS(harness::config_from_toml("[mpc]\nsquash = \"sigmoid\"\n"));
}

TEST_CASE("config hash ignores paths but tracks semantics") {
  harness::ExperimentConfig a;
  harness::ExperimentConfig b = a;
  b.output_dir = "elsewhere";
  b.demo_file = "other.jsonl";
  CHECK(harness::config_hash(a) == harness::config_hash(b));

  b.hyper.r1_lambda = 7.0;
  CHECK(harness::config_hash(a) != harness::config_hash(b));

  harness::ExperimentConfig c = a;
  c.base_seed = a.base_seed + 1;
  CHECK(harness::config_hash(a) != harness::config_hash(c));
}

TEST_CASE("config validation catches grid and seed-plan mistakes") {
  harness::ExperimentConfig good;
  CHECK_NOTHROW(good.validate());

  harness::ExperimentConfig cfg = good;
  cfg.imitators.clear();
  CHECK_THROWS(cfg.validate());

  cfg = good;
  cfg.imitators[0].pole_mass_scale = 0.0;
  CHECK_THROWS(cfg.validate());

  cfg = good;
  cfg.algorithms = {gan::Algorithm::kBc, gan::Algorithm::kBc};
  CHECK(throws_containing(thrown_message([&] { cfg.validate(); }), "duplicate algorithm"));

  cfg = good;
  cfg.demonstrator.physical.pole_mass_scale = 2.0;
  CHECK_THROWS(cfg.validate());

  cfg = good;
  cfg.n_demos = 0;
  CHECK_THROWS(cfg.validate());

  // a training seed whose rollout stream lands inside the demo seed range
  cfg = good;
  cfg.base_seed = 12000;
  cfg.n_demos = 50;
  cfg.hyper.iterations = 10;
  cfg.hyper.rollouts_per_iter = 1;
  cfg.train_seeds = {2005};  // rollouts use 12005..12014
  CHECK(throws_containing(thrown_message([&] { cfg.validate(); }), "collide"));

  // and one that lands inside the evaluation range
  cfg = good;
  cfg.base_seed = 1000;
  cfg.eval_episodes = 50;
  cfg.train_seeds = {11010};  // rollouts use 21020.., eval uses 21000..21049
  CHECK(throws_containing(thrown_message([&] { cfg.validate(); }), "collide"));
}

TEST_CASE("imitator tags are compact and unambiguous") {
  CHECK(harness::imitator_tag({1.0, 1.0, 1.0}) == "p1c1d1");
  CHECK(harness::imitator_tag({2.5, 1.0, 1.5}) == "p2.5c1d1.5");
  CHECK(harness::imitator_tag({3.0, 2.0, 1.0}) == "p3c2d1");
}

TEST_CASE("load_config resolves paths and honors the output override") {
  fs::path dir = fresh_dir("load");
  const std::string text =
      "[experiment]\n"
      "task = \"pendulum_swingup\"\n"
      "output_dir = \"runs\"\n"
      "demo_file = \"demos.jsonl\"\n";
  serialize::write_text_file(dir / "exp.toml", text);

  harness::ExperimentConfig cfg = harness::load_config(dir / "exp.toml");
  CHECK(cfg.output_dir == dir / "runs");
  CHECK(cfg.demo_file == dir / "demos.jsonl");

  setenv("GANMPC_OUT", (dir / "elsewhere").c_str(), 1);
  harness::ExperimentConfig overridden = harness::load_config(dir / "exp.toml");
  unsetenv("GANMPC_OUT");
  CHECK(overridden.output_dir == dir / "elsewhere");
  CHECK(overridden.demo_file == dir / "demos.jsonl");
}

TEST_CASE("demo collection writes a byte-stable expert dataset") {
  fs::path dir = fresh_dir("demos");
  harness::ExperimentConfig cfg = tiny_config(dir);

  fs::path file = harness::collect_demos(cfg);
  CHECK(file == cfg.demo_file);
  REQUIRE(fs::exists(file));
  const std::uint64_t first_hash = serialize::hash_file(file);

  auto records = serialize::read_trajectory_file(file);
  REQUIRE(records.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(records[i].task == env::Task::kCartpoleBalance);
    CHECK(records[i].seed == cfg.base_seed + static_cast<std::uint64_t>(i));
    CHECK(records[i].physical.is_demonstrator());
    CHECK(records[i].trajectory.length() == 25);
  }

  harness::collect_demos(cfg);
  CHECK(serialize::hash_file(file) == first_hash);
}

TEST_CASE("checkpoints restore every learnable bit-for-bit") {
  gan::TrainState st(env::Task::kCartpoleBalance, 9.5, 4, 8);
  st.dynamics.init(11);
  st.dynamics.normalizer.mean = VectorXd::LinSpaced(6, -1.0, 1.0);
  st.dynamics.normalizer.std = VectorXd::LinSpaced(6, 0.5, 2.0);
  st.bc.init(12);
  st.predictor.init(13);
  st.gen_live.init(14);
  st.gen_live.lambda_eng_raw = 0.25;
  st.gen_live.lambda_lrn_raw = -0.5;
  st.gen_live.c_a = 0.02;
  st.gen_deployed.init(15);
  st.disc.init(16);
  st.iteration = 7;
  st.interaction_steps = 321;
  st.seed = 99;
  st.error = "stopped on purpose";

  harness::json j = harness::checkpoint_to_json(st, gan::Algorithm::kGanMpc);
  // a serialization pass must survive printing and re-parsing
  j = harness::json::parse(j.dump(2));
  auto [back, algorithm] = harness::checkpoint_from_json(j);

  CHECK(algorithm == gan::Algorithm::kGanMpc);
  CHECK(back.iteration == 7);
  CHECK(back.interaction_steps == 321);
  CHECK(back.seed == 99);
  CHECK(back.error == "stopped on purpose");
  CHECK(back.bc.action_bound == 9.5);
  CHECK(back.dynamics.params.flatten() == st.dynamics.params.flatten());
  CHECK(back.dynamics.normalizer.mean == st.dynamics.normalizer.mean);
  CHECK(back.dynamics.normalizer.std == st.dynamics.normalizer.std);
  CHECK(back.bc.params.flatten() == st.bc.params.flatten());
  CHECK(back.predictor.params.flatten() == st.predictor.params.flatten());
  CHECK(flatten_cost(back.gen_live) == flatten_cost(st.gen_live));
  CHECK(flatten_cost(back.gen_deployed) == flatten_cost(st.gen_deployed));
  CHECK(back.disc.params.flatten() == st.disc.params.flatten());
  CHECK(back.disc.params.input_dim() == 4);
  CHECK(back.disc.params.hidden_dim() == 8);
}

TEST_CASE("training runs leave a complete, reproducible artifact trail") {
  fs::path dir = fresh_dir("train");
  harness::ExperimentConfig cfg = tiny_config(dir);
  harness::collect_demos(cfg);

  const env::PhysicalParams imitator = cfg.imitators[0];
  fs::path run = harness::run_training(cfg, gan::Algorithm::kGanMpc, imitator, 1);
  harness::RunPaths rp = harness::run_paths(cfg, gan::Algorithm::kGanMpc, imitator, 1);
  CHECK(run == rp.dir);
  REQUIRE(fs::exists(rp.manifest));
  REQUIRE(fs::exists(rp.metrics));
  REQUIRE(fs::exists(rp.checkpoint));
  REQUIRE(fs::exists(rp.config));

  const harness::json manifest = harness::json::parse(serialize::read_text_file(rp.manifest));
  CHECK(manifest.at("task").get<std::string>() == "cartpole_balance");
  CHECK(manifest.at("algorithm").get<std::string>() == "gan_mpc");
  CHECK(manifest.at("error").get<std::string>().empty());
  CHECK(manifest.at("completed").get<bool>());
  CHECK(manifest.at("iterations_completed").get<int>() == 2);
  // every interaction step is accounted for: iterations x rollouts x episode length
  CHECK(manifest.at("interaction_steps").get<long>() == 2 * 1 * 25);
  CHECK(manifest.at("config_hash").get<std::string>() == hex64(harness::config_hash(cfg)));

  // the stored config evaluates the run without the original file
  harness::ExperimentConfig stored =
      harness::config_from_toml(serialize::read_text_file(rp.config));
  CHECK(harness::config_hash(stored) == harness::config_hash(cfg));

  const std::string manifest_a = serialize::read_text_file(rp.manifest);
  const std::string checkpoint_a = serialize::read_text_file(rp.checkpoint);
  const std::string metrics_a = serialize::read_text_file(rp.metrics);

  harness::run_training(cfg, gan::Algorithm::kGanMpc, imitator, 1);
  CHECK(serialize::read_text_file(rp.manifest) == manifest_a);
  CHECK(serialize::read_text_file(rp.checkpoint) == checkpoint_a);
  // metrics differ only in the wall-time column
  CHECK(drop_last_column(serialize::read_text_file(rp.metrics)) == drop_last_column(metrics_a));

  // behavior cloning takes no environment steps
  fs::path bc_run = harness::run_training(cfg, gan::Algorithm::kBc, imitator, 1);
  const harness::json bc_manifest =
      harness::json::parse(serialize::read_text_file(bc_run / "manifest.json"));
  CHECK(bc_manifest.at("interaction_steps").get<long>() == 0);
  CHECK(bc_manifest.at("completed").get<bool>());
}

TEST_CASE("evaluation pairs episodes with the demonstrator and persists results") {
  fs::path dir = fresh_dir("eval");
  harness::ExperimentConfig cfg = tiny_config(dir);
  harness::collect_demos(cfg);
  const env::PhysicalParams imitator = cfg.imitators[0];

  fs::path gan_run = harness::run_training(cfg, gan::Algorithm::kGanMpc, imitator, 1);
  fs::path bc_run = harness::run_training(cfg, gan::Algorithm::kBc, imitator, 1);

  harness::EvalResult gan_res = harness::evaluate(cfg, gan_run);
  harness::EvalResult bc_res = harness::evaluate(cfg, bc_run);

  REQUIRE(gan_res.imitator_rewards.size() == 2);
  REQUIRE(bc_res.imitator_rewards.size() == 2);
  // both algorithms measure against the identical expert episodes
  CHECK(gan_res.demonstrator_rewards == bc_res.demonstrator_rewards);
  CHECK(gan_res.mean_demonstrator > 0.0);
  CHECK(gan_res.rel_reward == gan_res.mean_imitator / gan_res.mean_demonstrator);

  REQUIRE(fs::exists(gan_run / "results.json"));
  harness::EvalResult loaded = harness::eval_from_json(
      harness::json::parse(serialize::read_text_file(gan_run / "results.json")));
  CHECK(loaded.rel_reward == gan_res.rel_reward);
  CHECK(loaded.imitator_rewards == gan_res.imitator_rewards);

  // evaluating under a different config is refused
  harness::ExperimentConfig other = cfg;
  other.hyper.r1_lambda = 99.0;
  CHECK(throws_containing(thrown_message([&] { harness::evaluate(other, gan_run); }),
                          "different config"));
}

TEST_CASE("ensure_run reuses finished runs and retrains on config changes") {
  fs::path dir = fresh_dir("ensure");
  harness::ExperimentConfig cfg = tiny_config(dir);
  cfg.algorithms = {gan::Algorithm::kBc};
  harness::collect_demos(cfg);
  const env::PhysicalParams imitator = cfg.imitators[0];

  fs::path run = harness::ensure_run(cfg, gan::Algorithm::kBc, imitator, 1);
  REQUIRE(fs::exists(run / "results.json"));

  // a sentinel survives the second call because nothing is retrained
  serialize::write_text_file(run / "sentinel.txt", "untouched\n");
  fs::path again = harness::ensure_run(cfg, gan::Algorithm::kBc, imitator, 1);
  CHECK(again == run);
  CHECK(fs::exists(run / "sentinel.txt"));

  harness::ExperimentConfig changed = cfg;
  changed.hyper.bc_epochs += 1;
  fs::path other = harness::ensure_run(changed, gan::Algorithm::kBc, imitator, 1);
  CHECK(other != run);
  REQUIRE(fs::exists(other / "results.json"));
}

TEST_CASE("report aggregates seeds and flags missing results") {
  fs::path dir = fresh_dir("report");
  harness::ExperimentConfig cfg = tiny_config(dir);
  cfg.algorithms = {gan::Algorithm::kBc};
  cfg.hyper.bc_epochs = 2;
  harness::collect_demos(cfg);
  const env::PhysicalParams imitator = cfg.imitators[0];

  std::vector<fs::path> runs;
  runs.push_back(harness::ensure_run(cfg, gan::Algorithm::kBc, imitator, 1));
  runs.push_back(harness::ensure_run(cfg, gan::Algorithm::kBc, imitator, 2));

  harness::Report rep = harness::report(runs);
  CHECK(rep.complete);
  REQUIRE(rep.rows.size() == 1);
  CHECK(rep.rows[0].seeds == 2);
  CHECK(rep.rows[0].algorithm == gan::Algorithm::kBc);
  CHECK(rep.rows[0].complete);
  CHECK(rep.rows[0].task == "cartpole_balance");
  // mean of two per-seed relative rewards
  harness::EvalResult r1 = harness::eval_from_json(
      harness::json::parse(serialize::read_text_file(runs[0] / "results.json")));
  harness::EvalResult r2 = harness::eval_from_json(
      harness::json::parse(serialize::read_text_file(runs[1] / "results.json")));
  CHECK(rep.rows[0].rel_mean == doctest::Approx(0.5 * (r1.rel_reward + r2.rel_reward)));
  const double half_gap = 0.5 * std::abs(r1.rel_reward - r2.rel_reward);
  CHECK(rep.rows[0].rel_std == doctest::Approx(half_gap));

  CHECK(rep.csv.find("cartpole_balance,p1.5c1d1,bc,2,") != std::string::npos);
  CHECK(rep.plot_csv.find("cartpole_balance,1.5,1,1,bc,") != std::string::npos);
  CHECK(rep.table.find("p1.5c1d1") != std::string::npos);

  // a run without results marks its row (and the report) incomplete
  fs::path unevaluated = harness::run_training(cfg, gan::Algorithm::kBc, imitator, 3);
  runs.push_back(unevaluated);
  harness::Report partial = harness::report(runs);
  CHECK_FALSE(partial.complete);
  REQUIRE(partial.rows.size() == 1);
  CHECK_FALSE(partial.rows[0].complete);
  CHECK(partial.rows[0].seeds == 2);  // only evaluated runs contribute numbers
}

TEST_CASE("report ordering is deterministic across input permutations") {
  fs::path dir = fresh_dir("order");
  harness::ExperimentConfig cfg = tiny_config(dir);
  cfg.algorithms = {gan::Algorithm::kBc};
  cfg.hyper.bc_epochs = 2;
  cfg.imitators = {{2.0, 1.0, 1.0}, {1.0, 1.0, 1.0}};
  harness::collect_demos(cfg);

  std::vector<fs::path> runs;
  for (const auto& p : cfg.imitators) {
    runs.push_back(harness::ensure_run(cfg, gan::Algorithm::kBc, p, 1));
  }
  harness::Report forward = harness::report(runs);
  std::vector<fs::path> reversed(runs.rbegin(), runs.rend());
  harness::Report backward = harness::report(reversed);
  CHECK(forward.csv == backward.csv);
  CHECK(forward.table == backward.table);
  REQUIRE(forward.rows.size() == 2);
  // sorted by imitator scales: (1,1,1) before (2,1,1)
  CHECK(forward.rows[0].imitator.pole_mass_scale == 1.0);
  CHECK(forward.rows[1].imitator.pole_mass_scale == 2.0);
}
