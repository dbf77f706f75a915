#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "offrl/dataset_io.hpp"
#include "offrl/harness.hpp"

using namespace offrl;
using namespace offrl::harness;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.name = "tiny";
  c.dataset.episodes = 10;
  c.dataset.behavior.seed = 1;
  c.agent.algorithm = agents::Algorithm::TD3BC;
  c.agent.hidden_dims = {16, 16};
  c.agent.batch_size = 32;
  c.total_steps = 200;
  c.eval_every = 50;
  c.eval_episodes = 3;
  c.anchors = ScoreAnchors{-100.0, -5.0};
  c.seeds = {0, 1, 2};
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("normalized score") {
  CHECK(normalized_score(-3.0, -3.0, 7.0) == 0.0);
  CHECK(normalized_score(7.0, -3.0, 7.0) == 1.0);
  CHECK(normalized_score(50.0, 0.0, 100.0) == 0.5);
  CHECK(normalized_score(150.0, 0.0, 100.0) == 1.5);
  CHECK_THROWS_AS(normalized_score(1.0, 5.0, 5.0), ConfigError);
  CHECK_THROWS_AS(normalized_score(1.0, 6.0, 5.0), ConfigError);

  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int i = 0; i < 500; ++i) {
    const double lo = u(rng), hi = lo + 1.0 + std::abs(u(rng)), raw = u(rng);
    const double a = 0.1 + std::abs(u(rng)), b = u(rng);
    CHECK(normalized_score(a * raw + b, a * lo + b, a * hi + b) ==
          doctest::Approx(normalized_score(raw, lo, hi)).epsilon(1e-9));
  }
}

TEST_CASE("policy evaluation") {
  const auto env = pointmass_env(1);
  const auto anchors = measure_anchors(env, 200, 0);
  BehaviorPolicySpec expert;
  expert.quality = 1.0;
  expert.noise_scale = 0.0;
  const double e = evaluate_policy(env, scripted_behavior(env, expert), 200, 7);
  const double r = evaluate_policy(env, uniform_random_policy(env), 200, 7);
  const double spread = anchors.expert - anchors.random;
  CHECK(std::abs(e - anchors.expert) < 0.05 * spread);
  CHECK(std::abs(r - anchors.random) < 0.1 * spread);

  agents::AgentConfig cfg;
  const auto ac = agents::make_actor_critic(agents::Featurizer::continuous(2, 1), cfg);
  CHECK(evaluate_policy(env, ac, 1, 3) == evaluate_policy(env, ac, 1, 3));
}

TEST_CASE("metrics csv") {
  MetricsRecord a;
  a.step = 10;
  a.phase = agents::Phase::CriticPretrain;
  a.seed = 4;
  a.loss_critic = 0.123456789123;
  a.loss_actor = -2.5;
  a.wall_clock_s = 1.25;
  MetricsRecord b = a;
  b.step = 20;
  b.phase = agents::Phase::RL;
  b.eval_return = -40.0;
  b.normalized_score = 0.6;
  const std::string csv = metrics_to_csv({a, b});
  CHECK(csv.substr(0, csv.find('\n')) ==
        "step,phase,seed,loss_actor,loss_critic,loss_bc,loss_cql,loss_div,eval_return,"
        "normalized_score,wall_clock_s");
  CHECK(csv.find("10,CriticPretrain,4,-2.5,0.123456789,,,,,,1.25") != std::string::npos);

  const auto back = metrics_from_csv(csv);
  REQUIRE(back.size() == 2);
  CHECK(back[0].step == 10);
  CHECK(back[0].phase == agents::Phase::CriticPretrain);
  CHECK(*back[0].loss_critic == 0.123456789);
  CHECK_FALSE(back[0].eval_return.has_value());
  CHECK_FALSE(back[0].loss_bc.has_value());
  CHECK(*back[1].normalized_score == 0.6);
  CHECK(metrics_to_csv(back) == csv);

  const auto dir = std::filesystem::temp_directory_path() / "offrl_metrics_test";
  std::filesystem::create_directories(dir);
  write_metrics({a, b}, (dir / "m.csv").string());
  CHECK(slurp(dir / "m.csv") == csv);
  CHECK(read_metrics((dir / "m.csv").string()).size() == 2);
  CHECK_THROWS(write_metrics({a}, (dir / "missing" / "x" / "m.csv").string()));
  CHECK_THROWS(write_metrics({}, (dir / "empty.csv").string()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("steps to threshold uses a trailing three-eval average") {
  std::vector<MetricsRecord> recs;
  const double scores[] = {0.0, 0.9, 0.9, 0.9, 0.2};
  for (std::size_t i = 0; i < 5; ++i) {
    MetricsRecord r;
    r.step = 100 * i;
    r.normalized_score = scores[i];
    recs.push_back(r);
    MetricsRecord gap;
    gap.step = 100 * i + 50;
    recs.push_back(gap);
  }
  CHECK(steps_to_threshold(recs, 0.6) == 200u);
  CHECK(steps_to_threshold(recs, 0.85) == 300u);
  CHECK_FALSE(steps_to_threshold(recs, 0.95).has_value());
}

TEST_CASE("experiment config json") {
  ExperimentConfig c = tiny_config();
  c.pretrain = agents::PretrainConfig{};
  c.pretrain->value_regularizer = agents::regularizer::CQL{2.0};
  c.pretrain->bc_mode = agents::bcmode::Soft{0.3};
  c.threshold = 0.5;
  const auto j = to_json(c);
  const ExperimentConfig back = experiment_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(std::get<agents::regularizer::CQL>(back.pretrain->value_regularizer).weight == 2.0);

  auto bad = j;
  bad["agent"]["bc_alhpa"] = 1.0;
  CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);
  bad = j;
  bad["total_steps"] = 210;
  CHECK_THROWS_AS(experiment_from_json(bad).validate(), ConfigError);
  c.seeds = {};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.seeds = {1, 1};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("git blob hash") {
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST_CASE("seed order does not change the report") {
  ExperimentConfig c = tiny_config();
  const auto ds = load_dataset(c);
  const auto a = run_experiment(c, ds, 2);
  c.seeds = {2, 0, 1};
  const auto b = run_experiment(c, ds, 1);
  CHECK(a.report.mean == b.report.mean);
  CHECK(a.report.std == b.report.std);
  CHECK(a.report.n_evals == b.report.n_evals);
  CHECK(metrics_to_csv(a.seeds[0].records, false) == metrics_to_csv(b.seeds[1].records, false));
  CHECK(metrics_to_csv(a.seeds[0].records, false) != metrics_to_csv(a.seeds[1].records, false));
  CHECK(a.report.std >= 0.0);
}

TEST_CASE("evaluation does not perturb training") {
  ExperimentConfig c = tiny_config();
  c.seeds = {5};
  const auto ds = load_dataset(c);
  c.eval_every = 50;
  const auto fine = run_experiment(c, ds);
  c.eval_every = 100;
  const auto coarse = run_experiment(c, ds);
  std::size_t compared = 0;
  for (const auto& r : coarse.seeds[0].records) {
    for (const auto& q : fine.seeds[0].records) {
      if (q.step == r.step && r.step > 0) {
        CHECK(*q.loss_critic == *r.loss_critic);
        CHECK(*q.eval_return == *r.eval_return);
        ++compared;
      }
    }
  }
  CHECK(compared == 2);
}

TEST_CASE("pre-training only run reports pre-training performance") {
  ExperimentConfig c = tiny_config();
  c.seeds = {0};
  c.total_steps = 0;
  c.pretrain = agents::PretrainConfig{};
  c.pretrain->pretrain_steps = 120;
  const auto res = run_experiment(c, load_dataset(c));
  REQUIRE(res.seeds[0].ok);
  CHECK(res.report.n_evals == 1);
  CHECK(res.report.mean == *res.seeds[0].records.back().normalized_score);
  CHECK(res.report.mean == *res.seeds[0].pretrain_end_score);
}

TEST_CASE("failed seeds are recorded") {
  ExperimentConfig c = tiny_config();
  auto ds = load_dataset(c);
  ds.trajectories[0].transitions[0].reward = std::nan("");
  const auto res = run_experiment(c, ds);
  CHECK(res.report.failed_seeds == 3);
  for (const auto& s : res.seeds) {
    CHECK_FALSE(s.ok);
    CHECK_FALSE(s.error.empty());
  }
}

TEST_CASE("outputs and manifest") {
  ExperimentConfig c = tiny_config();
  c.seeds = {0};
  c.output_dir = (std::filesystem::temp_directory_path() / "offrl_out_test").string();
  std::filesystem::remove_all(c.output_dir);
  const auto ds = load_dataset(c);
  const auto res = run_experiment(c, ds);
  const auto dir = std::filesystem::path(c.output_dir);
  CHECK(std::filesystem::exists(dir / "tiny_seed0.csv"));
  const auto manifest = nlohmann::json::parse(slurp(dir / "tiny_manifest.json"));
  std::ostringstream ser;
  write_dataset_jsonl(ds, ser);
  CHECK(manifest["dataset_sha1"] == git_blob_sha1(ser.str()));
  CHECK(manifest["config"] == to_json(c));
  std::filesystem::remove_all(dir);
}
