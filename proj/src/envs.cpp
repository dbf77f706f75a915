#include "offrl/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace offrl {

// ---------------------------------------------------------------------------
// Tabular

void TabularMDP::validate() const {
  if (n_states == 0 || n_actions == 0) throw ConfigError("MDP needs states and actions");
  if (transition.size() != n_states || reward.size() != n_states ||
      terminal.size() != n_states || initial_distribution.size() != n_states ||
      available.size() != n_states) {
    throw ConfigError("MDP tables do not match n_states");
  }
  for (std::size_t s = 0; s < n_states; ++s) {
    if (transition[s].size() != n_actions || reward[s].size() != n_actions ||
        available[s].size() != n_actions) {
      throw ConfigError("MDP tables do not match n_actions");
    }
    for (std::size_t a = 0; a < n_actions; ++a) {
      const auto& row = transition[s][a];
      if (row.size() != n_states) throw ConfigError("transition row has wrong length");
      const double sum = std::accumulate(row.begin(), row.end(), 0.0);
      if (std::abs(sum - 1.0) > 1e-12) {
        throw ConfigError("transition row (" + std::to_string(s) + ", " + std::to_string(a) +
                          ") does not sum to 1");
      }
    }
  }
  const double d0 = std::accumulate(initial_distribution.begin(), initial_distribution.end(), 0.0);
  if (std::abs(d0 - 1.0) > 1e-12) throw ConfigError("initial distribution does not sum to 1");
}

QTable::QTable(std::size_t states, std::size_t actions, double discount)
    : n_states(states),
      n_actions(actions),
      gamma(discount),
      values(states * actions, 0.0),
      visited_mask(states * actions, false),
      available(states * actions, true) {}

double QTable::max_value(std::size_t s) const {
  double best = 0.0;
  bool any = false;
  for (std::size_t a = 0; a < n_actions; ++a) {
    if (!legal(s, a)) continue;
    if (!any || at(s, a) > best) best = at(s, a);
    any = true;
  }
  return best;
}

std::size_t QTable::greedy_action(std::size_t s) const {
  std::size_t best = n_actions;
  for (std::size_t a = 0; a < n_actions; ++a) {
    if (!legal(s, a)) continue;
    if (best == n_actions || at(s, a) > at(s, best)) best = a;
  }
  return best == n_actions ? 0 : best;
}

void QTable::set_available_from(const TabularMDP& mdp) {
  for (std::size_t s = 0; s < n_states; ++s) {
    for (std::size_t a = 0; a < n_actions; ++a) available[s * n_actions + a] = mdp.available[s][a];
  }
}

double sup_norm_distance(const QTable& a, const QTable& b) {
  if (a.values.size() != b.values.size()) throw ConfigError("QTable shape mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    d = std::max(d, std::abs(a.values[i] - b.values[i]));
  }
  return d;
}

QTable bellman_optimality(const TabularMDP& mdp, const QTable& q, double gamma) {
  QTable out = q;
  std::vector<double> v(mdp.n_states, 0.0);
  for (std::size_t s = 0; s < mdp.n_states; ++s) v[s] = mdp.terminal[s] ? 0.0 : q.max_value(s);
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      if (mdp.terminal[s]) {
        out.at(s, a) = 0.0;
        continue;
      }
      const auto& row = mdp.transition[s][a];
      double expect = 0.0;
      for (std::size_t s2 = 0; s2 < mdp.n_states; ++s2) expect += row[s2] * v[s2];
      out.at(s, a) = mdp.reward[s][a] + gamma * expect;
    }
  }
  return out;
}

std::pair<TabularMDP, OfflineDataset> motivational_mdp() {
  TabularMDP mdp;
  mdp.n_states = 4;
  mdp.n_actions = 2;
  mdp.transition.assign(4, std::vector<std::vector<double>>(2, std::vector<double>(4, 0.0)));
  mdp.reward.assign(4, std::vector<double>(2, 0.0));
  mdp.terminal = {false, false, false, true};
  mdp.initial_distribution = {1.0, 0.0, 0.0, 0.0};
  mdp.available = {{false, true}, {true, true}, {false, true}, {true, true}};

  auto edge = [&](std::size_t s, std::size_t a, std::size_t s2, double r) {
    mdp.transition[s][a][s2] = 1.0;
    mdp.reward[s][a] = r;
  };
  edge(0, kLeft, 0, 0.0);  // illegal, self-loop
  edge(0, kRight, 1, 0.0);
  edge(1, kLeft, 0, -1.0);
  edge(1, kRight, 2, -2.0);
  edge(2, kLeft, 2, 0.0);  // illegal, self-loop
  edge(2, kRight, 3, 3.0);
  edge(3, kLeft, 3, 0.0);
  edge(3, kRight, 3, 0.0);
  mdp.validate();

  const std::size_t states[] = {0, 1, 0, 1, 2, 3};
  const std::size_t actions[] = {kRight, kLeft, kRight, kRight, kRight};
  const double rewards[] = {0.0, -1.0, 0.0, -2.0, 3.0};
  Trajectory traj;
  for (std::size_t i = 0; i < 5; ++i) {
    Transition tr;
    tr.state = states[i];
    tr.action = actions[i];
    tr.reward = rewards[i];
    tr.next_state = states[i + 1];
    tr.done_kind = i == 4 ? DoneKind::Termination : DoneKind::NotDone;
    traj.transitions.push_back(tr);
  }
  OfflineDataset ds;
  ds.dataset_id = "motivational";
  ds.trajectories.push_back(std::move(traj));
  return {std::move(mdp), std::move(ds)};
}

TabularMDP random_tabular_mdp(std::size_t n_states, std::size_t n_actions, std::uint64_t seed,
                              double reward_scale) {
  if (n_states < 2 || n_actions < 2) throw ConfigError("random MDP needs >= 2 states and actions");
  Rng rng(seed);
  std::exponential_distribution<double> expo(1.0);
  std::uniform_real_distribution<double> unif(-reward_scale, reward_scale);
  TabularMDP mdp;
  mdp.n_states = n_states;
  mdp.n_actions = n_actions;
  mdp.transition.assign(n_states, std::vector<std::vector<double>>(n_actions));
  mdp.reward.assign(n_states, std::vector<double>(n_actions));
  mdp.terminal.assign(n_states, false);
  mdp.initial_distribution.assign(n_states, 1.0 / static_cast<double>(n_states));
  mdp.available.assign(n_states, std::vector<bool>(n_actions, true));
  for (std::size_t s = 0; s < n_states; ++s) {
    for (std::size_t a = 0; a < n_actions; ++a) {
      // Normalized exponentials are a symmetric Dirichlet(1) draw.
      std::vector<double> row(n_states);
      for (auto& p : row) p = expo(rng);
      const double sum = std::accumulate(row.begin(), row.end(), 0.0);
      for (auto& p : row) p /= sum;
      // Push the rounding residual onto the largest entry.
      const double residual = 1.0 - std::accumulate(row.begin(), row.end(), 0.0);
      *std::max_element(row.begin(), row.end()) += residual;
      mdp.transition[s][a] = std::move(row);
      mdp.reward[s][a] = unif(rng);
    }
  }
  mdp.validate();
  return mdp;
}

QTable solve_optimal_tabular(const TabularMDP& mdp, double gamma, double tol,
                             std::size_t max_iters) {
  mdp.validate();
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (gamma == 1.0 && std::none_of(mdp.terminal.begin(), mdp.terminal.end(),
                                   [](bool t) { return t; })) {
    throw ConfigError("gamma = 1 requires an episodic MDP with absorbing terminals");
  }
  QTable q(mdp.n_states, mdp.n_actions, gamma);
  q.set_available_from(mdp);
  double residual = 0.0;
  for (std::size_t it = 0; it < max_iters; ++it) {
    QTable next = bellman_optimality(mdp, q, gamma);
    residual = sup_norm_distance(next, q);
    q = std::move(next);
    if (residual <= tol) {
      // q is now T(q_prev); report the residual of the returned table itself.
      const double own = sup_norm_distance(bellman_optimality(mdp, q, gamma), q);
      if (own <= tol) return q;
    }
  }
  throw NonConvergence(residual, "value iteration did not converge; residual " +
                                     std::to_string(residual));
}

// ---------------------------------------------------------------------------
// Point mass

namespace {

constexpr double kDt = 0.1;
constexpr double kMaxAccel = 2.0;
constexpr double kMaxVelocity = 2.0;
constexpr double kWall = 2.0;
constexpr double kArrivalSpeed = 0.3;
// Expert proportional-derivative gains.
constexpr double kProportional = 6.0;
constexpr double kDerivative = 3.0;

double norm(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i] * v[i];
  return std::sqrt(s);
}

double clip_unit(double x) { return std::clamp(x, -1.0, 1.0); }

}  // namespace

ContinuousEnvSpec pointmass_env(std::size_t dim, bool sparse) {
  if (dim != 1 && dim != 2) throw ConfigError("pointmass supports dim 1 or 2");
  ContinuousEnvSpec env;
  env.name = "pointmass" + std::to_string(dim) + (sparse ? "-sparse" : "");
  env.obs_dim = 2 * dim;
  env.act_dim = dim;
  env.timeout_limit = 100;
  env.init_noise_scale = 1.0;
  env.dim = dim;
  env.sparse = sparse;
  env.goal_radius = 0.1;
  const double radius = env.goal_radius;

  env.dynamics = [dim, sparse, radius](const std::vector<double>& state,
                                       const std::vector<double>& action) {
    StepResult out;
    out.next_state = state;
    double effort = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double a = clip_unit(action[i]);
      effort += a * a;
      double v = std::clamp(state[dim + i] + kDt * kMaxAccel * a, -kMaxVelocity, kMaxVelocity);
      double p = state[i] + kDt * v;
      if (std::abs(p) > kWall) {
        p = std::copysign(kWall, p);
        v = 0.0;
      }
      out.next_state[i] = p;
      out.next_state[dim + i] = v;
    }
    const double dist = norm(out.next_state, 0, dim);
    const bool at_goal = dist < radius && norm(out.next_state, dim, 2 * dim) < kArrivalSpeed;
    if (sparse) {
      out.reward = at_goal ? 1.0 : 0.0;
    } else {
      out.reward = -dist - 0.01 * effort;
    }
    out.done = at_goal ? DoneKind::Termination : DoneKind::NotDone;
    return out;
  };

  const double scale = env.init_noise_scale;
  env.initial_state = [dim, scale](Rng& rng) {
    std::vector<double> s(2 * dim, 0.0);
    std::uniform_real_distribution<double> radius_dist(0.5, 1.0);
    const double r = scale * radius_dist(rng);
    if (dim == 1) {
      std::bernoulli_distribution coin(0.5);
      s[0] = coin(rng) ? r : -r;
    } else {
      std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
      const double th = angle(rng);
      s[0] = r * std::cos(th);
      s[1] = r * std::sin(th);
    }
    return s;
  };
  return env;
}

ContinuousEnvSpec env_by_name(const std::string& name) {
  if (name == "pointmass1" || name == "pointmass") return pointmass_env(1, false);
  if (name == "pointmass2") return pointmass_env(2, false);
  if (name == "pointmass1-sparse") return pointmass_env(1, true);
  if (name == "pointmass2-sparse") return pointmass_env(2, true);
  throw ConfigError("unknown environment '" + name + "'");
}

// ---------------------------------------------------------------------------
// Behavior policies

std::string to_string(BehaviorKind kind) {
  switch (kind) {
    case BehaviorKind::ScriptedProportional:
      return "scripted_proportional";
    case BehaviorKind::EpsilonGreedyTabular:
      return "epsilon_greedy_tabular";
    case BehaviorKind::NoisyExpert:
      return "noisy_expert";
  }
  return "scripted_proportional";
}

BehaviorKind behavior_kind_from_string(const std::string& s) {
  if (s == "scripted_proportional") return BehaviorKind::ScriptedProportional;
  if (s == "epsilon_greedy_tabular") return BehaviorKind::EpsilonGreedyTabular;
  if (s == "noisy_expert") return BehaviorKind::NoisyExpert;
  throw ConfigError("unknown behavior kind '" + s + "'");
}

void BehaviorPolicySpec::validate() const {
  if (!(quality >= 0.0 && quality <= 1.0)) throw ConfigError("quality must lie in [0, 1]");
  if (noise_scale < 0.0) throw ConfigError("noise_scale must be non-negative");
}

ContinuousPolicy scripted_behavior(const ContinuousEnvSpec& env, const BehaviorPolicySpec& spec) {
  spec.validate();
  if (spec.kind == BehaviorKind::EpsilonGreedyTabular) {
    throw ConfigError("epsilon-greedy behavior needs a tabular MDP");
  }
  const double gain = spec.kind == BehaviorKind::ScriptedProportional
                          ? std::pow(spec.quality, 6.0)
                          : 1.0;
  const double noise_std = (1.0 - spec.quality) * spec.noise_scale;
  const std::size_t dim = env.dim;
  return [gain, noise_std, dim](const std::vector<double>& obs, Rng& rng) {
    std::vector<double> a(dim);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < dim; ++i) {
      const double pd = -kProportional * obs[i] - kDerivative * obs[dim + i];
      double u = gain * pd;
      if (noise_std > 0.0) u += noise_std * noise(rng);
      a[i] = clip_unit(u);
    }
    return a;
  };
}

TabularPolicy scripted_behavior(const TabularMDP& mdp, const BehaviorPolicySpec& spec,
                                double gamma) {
  spec.validate();
  if (spec.kind != BehaviorKind::EpsilonGreedyTabular) {
    throw ConfigError("tabular MDPs need the epsilon-greedy behavior kind");
  }
  const QTable q = solve_optimal_tabular(mdp, gamma, 1e-10);
  const double epsilon = 1.0 - spec.quality;
  std::vector<std::vector<std::size_t>> legal(mdp.n_states);
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      if (mdp.available[s][a]) legal[s].push_back(a);
    }
  }
  return [q, epsilon, legal](std::size_t s, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < epsilon) {
      std::uniform_int_distribution<std::size_t> pick(0, legal[s].size() - 1);
      return legal[s][pick(rng)];
    }
    return q.greedy_action(s);
  };
}

ContinuousPolicy uniform_random_policy(const ContinuousEnvSpec& env) {
  const std::size_t dim = env.act_dim;
  return [dim](const std::vector<double>&, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> a(dim);
    for (auto& x : a) x = u(rng);
    return a;
  };
}

std::vector<Trajectory> rollout(const ContinuousEnvSpec& env, const ContinuousPolicy& policy,
                                std::size_t n_episodes, std::uint64_t seed) {
  if (n_episodes == 0) throw ConfigError("rollout needs at least one episode");
  Rng rng(seed);
  std::vector<Trajectory> out;
  out.reserve(n_episodes);
  for (std::size_t ep = 0; ep < n_episodes; ++ep) {
    Trajectory traj;
    auto state = env.initial_state(rng);
    for (std::size_t t = 0; t < env.timeout_limit; ++t) {
      auto action = policy(state, rng);
      for (auto& a : action) a = clip_unit(a);
      auto step = env.dynamics(state, action);
      Transition tr;
      tr.state = state;
      tr.action = action;
      tr.reward = step.reward;
      tr.next_state = step.next_state;
      tr.done_kind = step.done;
      if (tr.done_kind == DoneKind::NotDone && t + 1 == env.timeout_limit) {
        tr.done_kind = DoneKind::Timeout;
      }
      const bool done = tr.done_kind != DoneKind::NotDone;
      traj.transitions.push_back(std::move(tr));
      state = std::move(step.next_state);
      if (done) break;
    }
    out.push_back(std::move(traj));
  }
  return out;
}

std::vector<Trajectory> rollout(const TabularMDP& mdp, const TabularPolicy& policy,
                                std::size_t n_episodes, std::uint64_t seed,
                                std::size_t timeout_limit) {
  if (n_episodes == 0) throw ConfigError("rollout needs at least one episode");
  if (timeout_limit == 0) throw ConfigError("timeout_limit must be positive");
  mdp.validate();
  Rng rng(seed);
  std::discrete_distribution<std::size_t> init(mdp.initial_distribution.begin(),
                                               mdp.initial_distribution.end());
  std::vector<Trajectory> out;
  for (std::size_t ep = 0; ep < n_episodes; ++ep) {
    Trajectory traj;
    std::size_t s = init(rng);
    for (std::size_t t = 0; t < timeout_limit && !mdp.terminal[s]; ++t) {
      const std::size_t a = policy(s, rng);
      const auto& row = mdp.transition[s][a];
      std::discrete_distribution<std::size_t> next(row.begin(), row.end());
      const std::size_t s2 = next(rng);
      Transition tr;
      tr.state = s;
      tr.action = a;
      tr.reward = mdp.reward[s][a];
      tr.next_state = s2;
      if (mdp.terminal[s2]) {
        tr.done_kind = DoneKind::Termination;
      } else if (t + 1 == timeout_limit) {
        tr.done_kind = DoneKind::Timeout;
      }
      traj.transitions.push_back(tr);
      s = s2;
    }
    if (!traj.empty()) out.push_back(std::move(traj));
  }
  return out;
}

double mean_return(const std::vector<Trajectory>& trajs) {
  if (trajs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& t : trajs) {
    for (const auto& tr : t.transitions) total += tr.reward;
  }
  return total / static_cast<double>(trajs.size());
}

ScoreAnchors measure_anchors(const ContinuousEnvSpec& env, std::size_t episodes,
                             std::uint64_t seed) {
  BehaviorPolicySpec expert;
  expert.kind = BehaviorKind::ScriptedProportional;
  expert.quality = 1.0;
  expert.noise_scale = 0.0;
  ScoreAnchors anchors;
  anchors.random = mean_return(rollout(env, uniform_random_policy(env), episodes, seed));
  anchors.expert = mean_return(rollout(env, scripted_behavior(env, expert), episodes, seed));
  return anchors;
}

OfflineDataset generate_dataset(const ContinuousEnvSpec& env, const BehaviorPolicySpec& spec,
                                std::size_t n_episodes) {
  OfflineDataset ds;
  ds.trajectories = rollout(env, scripted_behavior(env, spec), n_episodes, spec.seed);
  ds.seed = spec.seed;
  ds.dataset_id = env.name + "-" + to_string(spec.kind) + "-q" + std::to_string(spec.quality) +
                  "-n" + std::to_string(n_episodes) + "-s" + std::to_string(spec.seed);
  return ds;
}

}  // namespace offrl
