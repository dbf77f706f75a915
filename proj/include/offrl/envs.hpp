// Built-in environments, scripted behavior policies and exact tabular solvers.
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "offrl/core.hpp"

namespace offrl {

using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Tabular MDPs

struct TabularMDP {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  /// transition[s][a][s'] probabilities.
  std::vector<std::vector<std::vector<double>>> transition;
  std::vector<std::vector<double>> reward;
  std::vector<bool> terminal;
  std::vector<double> initial_distribution;
  /// Actions legal in each state. Illegal actions are self-loops that never
  /// enter a max.
  std::vector<std::vector<bool>> available;

  void validate() const;
  bool is_terminal(std::size_t s) const { return terminal[s]; }
};

/// State-action value table. `available` mirrors the MDP's legal actions and
/// bounds every max over actions.
struct QTable {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  double gamma = 1.0;
  std::vector<double> values;
  std::vector<bool> visited_mask;
  std::vector<bool> available;

  QTable() = default;
  QTable(std::size_t states, std::size_t actions, double discount);

  double& at(std::size_t s, std::size_t a) { return values[s * n_actions + a]; }
  double at(std::size_t s, std::size_t a) const { return values[s * n_actions + a]; }
  bool visited(std::size_t s, std::size_t a) const { return visited_mask[s * n_actions + a]; }
  bool legal(std::size_t s, std::size_t a) const { return available[s * n_actions + a]; }

  /// max over legal actions; 0 when no action is legal.
  double max_value(std::size_t s) const;
  /// argmax over legal actions (lowest index on ties).
  std::size_t greedy_action(std::size_t s) const;

  void set_available_from(const TabularMDP& mdp);
};

double sup_norm_distance(const QTable& a, const QTable& b);

/// Exact Bellman optimality backup (T Q)(s,a) = r + gamma * E[max_a' Q(s',a')].
QTable bellman_optimality(const TabularMDP& mdp, const QTable& q, double gamma);

/// Four-state chain (state 3 terminal) and its single offline trajectory
/// s0 -> s1 -> s0 -> s1 -> s2 -> s3 with rewards (0, -1, 0, -2, +3).
/// Action 0 moves left, action 1 moves right; states 0 and 2 only allow right.
std::pair<TabularMDP, OfflineDataset> motivational_mdp();

inline constexpr std::size_t kLeft = 0;
inline constexpr std::size_t kRight = 1;

TabularMDP random_tabular_mdp(std::size_t n_states, std::size_t n_actions, std::uint64_t seed,
                              double reward_scale = 1.0);

class NonConvergence : public std::runtime_error {
 public:
  NonConvergence(double residual, const std::string& what)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// Value iteration until ||Q - TQ||_inf <= tol.
QTable solve_optimal_tabular(const TabularMDP& mdp, double gamma, double tol = 1e-12,
                             std::size_t max_iters = 100000);

// ---------------------------------------------------------------------------
// Continuous environments

struct StepResult {
  std::vector<double> next_state;
  double reward = 0.0;
  /// NotDone or Termination; rollouts add Timeout.
  DoneKind done = DoneKind::NotDone;
};

struct ContinuousEnvSpec {
  std::string name;
  std::size_t obs_dim = 0;
  std::size_t act_dim = 0;
  std::size_t timeout_limit = 0;
  double init_noise_scale = 1.0;
  /// Deterministic dynamics; actions are clipped to [-1, 1] before use.
  std::function<StepResult(const std::vector<double>&, const std::vector<double>&)> dynamics;
  std::function<std::vector<double>(Rng&)> initial_state;

  // Point-mass parameters used by the scripted controllers.
  std::size_t dim = 1;
  bool sparse = false;
  double goal_radius = 0.1;
};

/// State is (positions, velocities); the goal is the origin.
ContinuousEnvSpec pointmass_env(std::size_t dim, bool sparse = false);

/// Resolves "pointmass1", "pointmass2", "pointmass1-sparse", ...
ContinuousEnvSpec env_by_name(const std::string& name);

// ---------------------------------------------------------------------------
// Behavior policies

enum class BehaviorKind { ScriptedProportional, EpsilonGreedyTabular, NoisyExpert };

std::string to_string(BehaviorKind kind);
BehaviorKind behavior_kind_from_string(const std::string& s);

struct BehaviorPolicySpec {
  BehaviorKind kind = BehaviorKind::ScriptedProportional;
  double quality = 0.5;
  double noise_scale = 0.6;
  std::uint64_t seed = 0;

  void validate() const;
};

using ContinuousPolicy = std::function<std::vector<double>(const std::vector<double>&, Rng&)>;
using TabularPolicy = std::function<std::size_t(std::size_t, Rng&)>;

/// Proportional-derivative goal controller. ScriptedProportional scales the
/// gains by quality^6 (quality 0.5 is a weak, underdamped controller scoring
/// about half of the expert); NoisyExpert keeps expert gains.
/// Both add Gaussian noise with std (1 - quality) * noise_scale.
ContinuousPolicy scripted_behavior(const ContinuousEnvSpec& env, const BehaviorPolicySpec& spec);
/// Epsilon-greedy on Q* with epsilon = 1 - quality.
TabularPolicy scripted_behavior(const TabularMDP& mdp, const BehaviorPolicySpec& spec,
                                double gamma = 0.99);

ContinuousPolicy uniform_random_policy(const ContinuousEnvSpec& env);

std::vector<Trajectory> rollout(const ContinuousEnvSpec& env, const ContinuousPolicy& policy,
                                std::size_t n_episodes, std::uint64_t seed);
std::vector<Trajectory> rollout(const TabularMDP& mdp, const TabularPolicy& policy,
                                std::size_t n_episodes, std::uint64_t seed,
                                std::size_t timeout_limit);

/// Mean undiscounted return of a trajectory set.
double mean_return(const std::vector<Trajectory>& trajs);

struct ScoreAnchors {
  double random = 0.0;
  double expert = 0.0;
};

/// Uniform-random and quality-1 scripted policy returns.
ScoreAnchors measure_anchors(const ContinuousEnvSpec& env, std::size_t episodes,
                             std::uint64_t seed);

/// Behavior dataset for a continuous env.
OfflineDataset generate_dataset(const ContinuousEnvSpec& env, const BehaviorPolicySpec& spec,
                                std::size_t n_episodes);

}  // namespace offrl
