// Training losses and the pre-train-then-improve orchestration.
//
// Every update function performs exactly one optimizer step on the networks
// it touches and returns the scalar losses it measured.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "offrl/core.hpp"
#include "offrl/envs.hpp"
#include "offrl/nn.hpp"

namespace offrl::agents {

using nn::Matrix;
using nn::RowVector;
using nn::Vector;

// ---------------------------------------------------------------------------
// Data plumbing

/// Maps observations/actions to network inputs. Discrete ids become one-hot
/// vectors of size n_states / n_actions.
struct Featurizer {
  std::size_t obs_dim = 0;
  std::size_t act_dim = 0;
  std::size_t n_states = 0;   // > 0 for discrete observations
  std::size_t n_actions = 0;  // > 0 for discrete actions

  static Featurizer continuous(std::size_t obs_dim, std::size_t act_dim);
  static Featurizer discrete(std::size_t n_states, std::size_t n_actions);

  bool discrete_actions() const { return n_actions > 0; }
  Vector encode_obs(const Observation& o) const;
  Vector encode_action(const ActionValue& a) const;
};

/// The dataset flattened into column matrices.
struct TransitionTable {
  Matrix states;
  Matrix actions;
  Matrix next_states;
  RowVector rewards;
  RowVector not_done;  // 0 only for terminations
  RowVector rtg;
  RowVector soft_rtg;
  bool has_rtg = false;
  bool has_soft_rtg = false;
  /// Columns usable as critic pre-training targets.
  std::vector<std::size_t> pretrain_indices;

  std::size_t size() const { return static_cast<std::size_t>(states.cols()); }
};

TransitionTable make_table(const OfflineDataset& ds, const Featurizer& feat,
                           const ReturnConfig& cfg);

struct Batch {
  Matrix s;
  Matrix a;
  Matrix s2;
  RowVector r;
  RowVector not_done;
  RowVector rtg;
  RowVector soft_rtg;
  bool has_rtg = false;
  bool has_soft_rtg = false;

  std::size_t size() const { return static_cast<std::size_t>(s.cols()); }
};

Batch gather(const TransitionTable& table, const std::vector<std::size_t>& idx);
Batch sample_batch(const TransitionTable& table, std::size_t batch_size, nn::Rng& rng,
                   bool pretrain_only = false);

// ---------------------------------------------------------------------------
// Configuration

enum class Algorithm { BC, TD3BC, CQLOnly, TD3BC_CQL, EnsembleSoftAC, EnsembleSoftAC_BC };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);
bool uses_gaussian_actor(Algorithm a);

struct AgentConfig {
  Algorithm algorithm = Algorithm::TD3BC;
  double bc_alpha = 1.0;         // TD3+BC trade-off alpha
  double cql_weight = 1.0;       // c for TD3BC_CQL
  std::size_t cql_n_actions = 10;
  double cql_temperature = 1.0;
  std::size_t num_critics = 2;   // N
  double eta = 1.0;              // ensemble diversification weight
  double temperature = 0.1;      // entropy temperature for soft algorithms
  double bc_weight = 1.0;        // c for EnsembleSoftAC_BC
  double gamma = 0.99;
  /// Multiplies every reward before annotation and training.
  double reward_scale = 1.0;
  double tau = 0.995;            // retention coefficient of the Polyak update
  std::size_t batch_size = 64;
  double policy_noise = 0.2;
  double noise_clip = 0.5;
  std::size_t policy_delay = 2;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  std::vector<std::size_t> hidden_dims = {32, 32};
  bool actor_layernorm = true;
  bool critic_layernorm = true;
  std::uint64_t seed = 0;

  void validate() const;
};

namespace regularizer {
struct None {};
struct CQL {
  double weight = 1.0;
};
struct EnsembleDiversify {
  double eta = 1.0;
};
}  // namespace regularizer

using ValueRegularizer =
    std::variant<regularizer::None, regularizer::CQL, regularizer::EnsembleDiversify>;

namespace bcmode {
struct Hard {};
struct Soft {
  double temperature = 0.1;
};
}  // namespace bcmode

using BCMode = std::variant<bcmode::Hard, bcmode::Soft>;

struct PretrainConfig {
  double lambda_mix = 0.0;
  std::size_t pretrain_steps = 5000;  // per phase cap
  double plateau_tol = 0.01;
  std::size_t plateau_window = 500;
  ValueRegularizer value_regularizer = regularizer::None{};
  BCMode bc_mode = bcmode::Hard{};
  /// Ablation: pre-train the actor only and leave the critic at its
  /// random initialization.
  bool skip_critic = false;
  TimeoutMode timeout_mode = TimeoutMode::TreatAsTerminal;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Networks

struct Network {
  nn::MLPConfig cfg;
  nn::ParamTree params;
  nn::ParamTree target;
  nn::OptimizerState opt;
};

struct ActorCritic {
  Featurizer feat;
  bool gaussian_actor = false;
  Network actor;
  std::vector<Network> critics;
  nn::Rng rng;
  std::uint64_t seed = 0;
  std::size_t updates = 0;

  /// Deterministic action for evaluation (tanh of the mean).
  Vector act(const Vector& obs) const;
  Matrix act_batch(const Matrix& obs) const;
  /// Member i's Q for (obs, action) columns, online or target parameters.
  RowVector q_values(std::size_t member, const Matrix& s, const Matrix& a,
                     bool use_target = false) const;
};

ActorCritic make_actor_critic(const Featurizer& feat, const AgentConfig& cfg);

// ---------------------------------------------------------------------------
// Losses

struct LossReport {
  std::map<std::string, double> losses;
  std::map<std::string, double> grad_norms;
  bool ensemble_collapse_warning = false;

  double get(const std::string& key) const;
};

class PhaseError : public std::runtime_error {
 public:
  PhaseError(std::string phase, const std::string& what)
      : std::runtime_error(what), phase_(std::move(phase)) {}
  const std::string& phase() const noexcept { return phase_; }

 private:
  std::string phase_;
};

/// L = primary / |primary| + c * aux / |aux| with detached magnitudes. A
/// magnitude below 1e-12 is left unnormalized.
struct CombinedLoss {
  double value = 0.0;
  double primary_weight = 1.0;
  double aux_weight = 0.0;
};
CombinedLoss normalize_and_combine(double primary_loss, double aux_loss, double c);

struct ValueAndGrad {
  double value = 0.0;
  nn::ParamTree grad;
};

/// temperature * E_s[logsumexp_j Q(s, u_j) / temperature] - E[Q(s, a_data)]
/// with u_j uniform in [-1, 1]^act_dim.
ValueAndGrad cql_regularizer(const Network& critic, const Batch& batch, std::size_t n_actions,
                             double temperature, nn::Rng& rng);

/// Mean pairwise cosine similarity of the members' action-gradients of Q and
/// its parameter gradient per member (finite-difference Hessian-vector
/// products through the action input).
struct DiversityTerm {
  double value = 0.0;
  std::vector<nn::ParamTree> grads;
};
DiversityTerm ensemble_diversity(const std::vector<Network>& critics, const Batch& batch);

LossReport bc_update(ActorCritic& ac, const Batch& batch);
LossReport soft_bc_update(ActorCritic& ac, const Batch& batch, double temperature);
LossReport critic_pretrain_update(ActorCritic& ac, const Batch& batch, const PretrainConfig& cfg,
                                  const AgentConfig& agent);
/// TD3-family step: TD3BC, CQLOnly and TD3BC_CQL.
LossReport td3bc_update(ActorCritic& ac, const Batch& batch, const AgentConfig& cfg);
/// Ensemble-min soft actor-critic step: EnsembleSoftAC and EnsembleSoftAC_BC.
LossReport ensemble_soft_update(ActorCritic& ac, const Batch& batch, const AgentConfig& cfg);

/// TD target r + gamma * not_done * min_i Q_i^target(s', a') from target
/// networks only.
RowVector clipped_double_q_target(const ActorCritic& ac, const Batch& batch,
                                  const Matrix& next_actions, double gamma);

/// TD3 critic target: target actor at s' plus clipped Gaussian smoothing
/// noise, then clipped_double_q_target.
RowVector td3_target(const ActorCritic& ac, const Batch& batch, const AgentConfig& cfg,
                     nn::Rng& rng);

/// Argmax over legal discrete actions of the ensemble-min Q (discrete
/// featurizers only; lowest index on ties).
std::size_t greedy_discrete_action(const ActorCritic& ac, const Observation& s,
                                   const std::vector<bool>& legal);

/// Sampled entropy estimate -mean log pi(a|s), deterministic per state.
EntropyEstimator make_entropy_estimator(const ActorCritic& ac, std::size_t samples = 16);

// ---------------------------------------------------------------------------
// Orchestration

enum class Phase { ActorPretrain, CriticPretrain, RL };
std::string to_string(Phase p);
Phase phase_from_string(const std::string& s);

struct PhaseSpan {
  Phase phase;
  std::size_t begin_step;  // global step of the first update in the phase
  std::size_t end_step;    // one past the last update
};

struct StepInfo {
  std::size_t step = 0;  // global updates performed so far
  Phase phase = Phase::RL;
  const LossReport* losses = nullptr;
  const ActorCritic* agent = nullptr;
  bool phase_end = false;
};

using Observer = std::function<void(const StepInfo&)>;

struct TrainResult {
  std::vector<PhaseSpan> phases;
  std::size_t total_updates = 0;
  std::size_t soft_annotations = 0;  // number of soft-rtg annotation passes
};

struct TrainOptions {
  std::size_t log_every = 500;
  Observer observer;
};

/// Runs the configured pre-training phases and then `total_steps` updates of
/// the agent's algorithm. Hard mode trains actor and critic jointly (logged as
/// CriticPretrain); Soft mode runs actor soft-BC, annotates soft returns with
/// the pre-trained actor, then trains the critic. Each pre-training phase ends
/// when its losses improve by less than plateau_tol over a window, or after
/// pretrain_steps updates.
TrainResult pretrain_then_train(ActorCritic& ac, const OfflineDataset& ds,
                                const std::optional<PretrainConfig>& pre,
                                const AgentConfig& agent, std::size_t total_steps,
                                const TrainOptions& options = {});

/// Windowed plateau detector over a scalar loss stream.
class PlateauDetector {
 public:
  PlateauDetector(std::size_t window, double tol) : window_(window), tol_(tol) {}
  /// Returns true once a full window improved by less than tol relative to
  /// the previous window.
  bool add(double loss);
  bool plateaued() const { return plateaued_; }

 private:
  std::size_t window_;
  double tol_;
  double sum_ = 0.0;
  std::size_t count_ = 0;
  std::optional<double> previous_;
  bool plateaued_ = false;
};

}  // namespace offrl::agents
