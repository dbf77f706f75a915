#include <cmath>
#include <map>
#include <sstream>

#include "doctest.h"
#include "offrl/dataset_io.hpp"
#include "offrl/envs.hpp"

using namespace offrl;

namespace {

double residual(const TabularMDP& mdp, const QTable& q, double gamma) {
  // independent backup, no shared helpers
  double worst = 0.0;
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      if (!mdp.available[s][a]) continue;
      double backup = mdp.reward[s][a];
      for (std::size_t s2 = 0; s2 < mdp.n_states; ++s2) {
        if (mdp.terminal[s2]) continue;
        double best = -1e300;
        for (std::size_t a2 = 0; a2 < mdp.n_actions; ++a2) {
          if (mdp.available[s2][a2]) best = std::max(best, q.at(s2, a2));
        }
        backup += gamma * mdp.transition[s][a][s2] * best;
      }
      worst = std::max(worst, std::abs(backup - q.at(s, a)));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("motivational mdp") {
  const auto [mdp, ds] = motivational_mdp();
  CHECK(mdp.n_states == 4);
  CHECK(mdp.terminal[3]);
  REQUIRE(ds.trajectories.size() == 1);
  const auto& tr = ds.trajectories[0].transitions;
  REQUIRE(tr.size() == 5);
  std::vector<std::size_t> states;
  std::vector<double> rewards;
  for (const auto& t : tr) {
    states.push_back(std::get<std::size_t>(t.state));
    rewards.push_back(t.reward);
  }
  states.push_back(std::get<std::size_t>(tr.back().next_state));
  CHECK(states == std::vector<std::size_t>{0, 1, 0, 1, 2, 3});
  CHECK(rewards == std::vector<double>{0, -1, 0, -2, 3});
  CHECK(tr.back().done_kind == DoneKind::Termination);

  const QTable q = solve_optimal_tabular(mdp, 1.0);
  CHECK(q.at(0, kRight) == 1.0);
  CHECK(q.at(1, kLeft) == 0.0);
  CHECK(q.at(1, kRight) == 1.0);
  CHECK(q.at(2, kRight) == 3.0);
}

TEST_CASE("random tabular mdp") {
  const auto a = random_tabular_mdp(10, 4, 7);
  const auto b = random_tabular_mdp(10, 4, 7);
  CHECK(a.transition == b.transition);
  CHECK(a.reward == b.reward);
  for (const auto& row : a.transition) {
    for (const auto& p : row) {
      double s = 0.0;
      for (double x : p) s += x;
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  const QTable q = solve_optimal_tabular(a, 0.9, 1e-10);
  CHECK(residual(a, q, 0.9) <= 1e-10);
  CHECK_THROWS_AS(random_tabular_mdp(1, 4, 0), ConfigError);
  CHECK_THROWS_AS(random_tabular_mdp(4, 1, 0), ConfigError);
}

TEST_CASE("myopic solve equals rewards") {
  const auto mdp = random_tabular_mdp(6, 3, 2);
  const QTable q = solve_optimal_tabular(mdp, 0.0);
  for (std::size_t s = 0; s < 6; ++s) {
    for (std::size_t a = 0; a < 3; ++a) CHECK(q.at(s, a) == mdp.reward[s][a]);
  }
}

TEST_CASE("tabular rollouts follow P") {
  const auto mdp = random_tabular_mdp(3, 2, 21);
  BehaviorPolicySpec spec;
  spec.kind = BehaviorKind::EpsilonGreedyTabular;
  spec.quality = 0.0;
  const auto trajs = rollout(mdp, scripted_behavior(mdp, spec, 0.9), 400, 5, 40);
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> counts;
  std::size_t total = 0;
  for (const auto& t : trajs) {
    for (const auto& tr : t.transitions) {
      auto& c = counts[{std::get<std::size_t>(tr.state), std::get<std::size_t>(tr.action)}];
      c.resize(3, 0.0);
      c[std::get<std::size_t>(tr.next_state)] += 1.0;
      ++total;
    }
  }
  CHECK(total >= 10000);
  double chi2 = 0.0;
  std::size_t df = 0;
  for (const auto& [key, c] : counts) {
    double n = 0.0;
    for (double x : c) n += x;
    for (std::size_t s2 = 0; s2 < 3; ++s2) {
      const double e = n * mdp.transition[key.first][key.second][s2];
      chi2 += (c[s2] - e) * (c[s2] - e) / e;
    }
    df += 2;
  }
  REQUIRE(df == 12);
  // 0.999 quantile of chi-square with 12 degrees of freedom
  CHECK(chi2 < 32.909);
}

TEST_CASE("uniform tabular behavior at quality 0") {
  const auto mdp = random_tabular_mdp(4, 4, 1);
  BehaviorPolicySpec spec;
  spec.kind = BehaviorKind::EpsilonGreedyTabular;
  spec.quality = 0.0;
  const auto pi = scripted_behavior(mdp, spec, 0.9);
  Rng rng(0);
  std::vector<double> c(4, 0.0);
  for (int i = 0; i < 40000; ++i) c[pi(0, rng)] += 1.0;
  for (double x : c) CHECK(std::abs(x / 40000.0 - 0.25) < 0.01);
}

TEST_CASE("pointmass dynamics") {
  for (std::size_t dim : {1u, 2u}) {
    const auto env = pointmass_env(dim);
    const auto r = env.dynamics(std::vector<double>(2 * dim, 0.0), std::vector<double>(dim, 0.0));
    CHECK(r.reward == 0.0);
    CHECK(r.done == DoneKind::Termination);
  }
  CHECK_THROWS_AS(pointmass_env(3), ConfigError);

  const auto env = pointmass_env(1);
  const ContinuousPolicy idle = [](const std::vector<double>&, Rng&) {
    return std::vector<double>{0.0};
  };
  for (const auto& t : rollout(env, idle, 20, 3)) {
    CHECK(t.horizon() <= env.timeout_limit);
    if (t.transitions.back().done_kind == DoneKind::Timeout) CHECK(t.horizon() == env.timeout_limit);
  }
}

TEST_CASE("rollouts are deterministic") {
  const auto env = pointmass_env(2);
  BehaviorPolicySpec spec;
  const auto pi = scripted_behavior(env, spec);
  OfflineDataset a, b;
  a.trajectories = rollout(env, pi, 5, 9);
  b.trajectories = rollout(env, pi, 5, 9);
  std::ostringstream sa, sb;
  write_dataset_jsonl(a, sa);
  write_dataset_jsonl(b, sb);
  CHECK(sa.str() == sb.str());
  for (const auto& t : a.trajectories) CHECK(t.horizon() <= env.timeout_limit);
}

TEST_CASE("expert beats medium beats random on pointmass") {
  const auto env = pointmass_env(1);
  const auto anchors = measure_anchors(env, 100, 0);
  CHECK(anchors.expert > anchors.random);

  BehaviorPolicySpec medium;
  medium.quality = 0.5;
  const double m = mean_return(rollout(env, scripted_behavior(env, medium), 100, 1));
  const double score = (m - anchors.random) / (anchors.expert - anchors.random);
  CHECK(score > 0.0);
  CHECK(score < 1.0);

  BehaviorPolicySpec expert;
  expert.quality = 1.0;
  expert.noise_scale = 0.0;
  const double e = mean_return(rollout(env, scripted_behavior(env, expert), 100, 1));
  CHECK(e >= m);
}

TEST_CASE("datasets regenerate identically") {
  const auto env = pointmass_env(1);
  BehaviorPolicySpec spec;
  spec.seed = 13;
  std::ostringstream a, b;
  write_dataset_jsonl(generate_dataset(env, spec, 4), a);
  write_dataset_jsonl(generate_dataset(env, spec, 4), b);
  CHECK(a.str() == b.str());
}

TEST_CASE("behavior kind mismatch is rejected") {
  BehaviorPolicySpec spec;
  spec.kind = BehaviorKind::EpsilonGreedyTabular;
  CHECK_THROWS_AS(scripted_behavior(pointmass_env(1), spec), ConfigError);
  spec.kind = BehaviorKind::NoisyExpert;
  CHECK_THROWS_AS(scripted_behavior(random_tabular_mdp(3, 2, 0), spec, 0.9), ConfigError);
  spec.quality = 1.5;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}
