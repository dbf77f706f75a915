// Seeded experiment runs: evaluation, normalized scores, windowed reports,
// CSV metrics and run manifests.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "offrl/agents.hpp"
#include "offrl/core.hpp"
#include "offrl/envs.hpp"

namespace offrl::harness {

/// Mean undiscounted return of the deterministic policy over n_episodes
/// episodes whose start states come from `seed` alone.
double evaluate_policy(const ContinuousEnvSpec& env, const agents::ActorCritic& agent,
                       std::size_t n_episodes, std::uint64_t seed);
double evaluate_policy(const ContinuousEnvSpec& env, const ContinuousPolicy& policy,
                       std::size_t n_episodes, std::uint64_t seed);

/// (raw - random) / (expert - random), unclipped.
double normalized_score(double raw, double random_anchor, double expert_anchor);

struct DatasetRef {
  /// JSON-lines file; when empty the dataset is generated from `behavior`.
  std::string path;
  BehaviorPolicySpec behavior;
  std::size_t episodes = 200;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string env = "pointmass1";
  DatasetRef dataset;
  agents::AgentConfig agent;
  std::optional<agents::PretrainConfig> pretrain;
  std::size_t total_steps = 10000;
  std::size_t eval_every = 500;
  std::size_t eval_episodes = 10;
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir;
  /// Final fraction of the RL phase averaged into the report.
  double window_fraction = 1.0 / 3.0;
  std::size_t anchor_episodes = 200;
  std::optional<ScoreAnchors> anchors;
  std::optional<double> threshold;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json to_json(const agents::AgentConfig& cfg);
agents::AgentConfig agent_from_json(const nlohmann::json& j);
nlohmann::json to_json(const agents::PretrainConfig& cfg);
agents::PretrainConfig pretrain_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BehaviorPolicySpec& spec);
BehaviorPolicySpec behavior_from_json(const nlohmann::json& j);

struct MetricsRecord {
  std::size_t step = 0;
  agents::Phase phase = agents::Phase::RL;
  std::uint64_t seed = 0;
  std::optional<double> loss_actor;
  std::optional<double> loss_critic;
  std::optional<double> loss_bc;
  std::optional<double> loss_cql;
  std::optional<double> loss_div;
  std::optional<double> eval_return;
  std::optional<double> normalized_score;
  double wall_clock_s = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,phase,seed,loss_actor,loss_critic,loss_bc,loss_cql,loss_div,eval_return,"
    "normalized_score,wall_clock_s";

void write_metrics(const std::vector<MetricsRecord>& records, const std::string& path);
std::string metrics_to_csv(const std::vector<MetricsRecord>& records, bool include_wall_clock = true);
std::vector<MetricsRecord> read_metrics(const std::string& path);
std::vector<MetricsRecord> metrics_from_csv(const std::string& text);

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<MetricsRecord> records;
  agents::TrainResult train;
  /// Mean normalized score over evaluations in the final window.
  double window_score = 0.0;
  /// Normalized score at the end of pre-training (or the initial policy).
  std::optional<double> pretrain_end_score;
  std::size_t rl_begin_step = 0;
  std::optional<std::size_t> steps_to_threshold;
  /// Final actor in the nn checkpoint format.
  std::string actor_checkpoint;
};

struct EvalReport {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n_evals = 0;
  std::size_t failed_seeds = 0;
  /// Median over seeds that reached the threshold; absent when none did.
  std::optional<double> steps_to_threshold;
};

struct ExperimentResult {
  ExperimentConfig config;
  ScoreAnchors anchors;
  std::string dataset_sha1;
  std::vector<SeedResult> seeds;
  EvalReport report;
};

/// First evaluation step at which the trailing 3-evaluation moving average
/// of the normalized score reaches `threshold`.
std::optional<std::size_t> steps_to_threshold(const std::vector<MetricsRecord>& records,
                                              double threshold);

/// Mean and population std of the pooled window scores; independent of
/// seed order.
EvalReport aggregate(const std::vector<SeedResult>& seeds, const ExperimentConfig& cfg);

/// Runs every seed (up to `jobs` concurrently); a failing seed is recorded
/// and the others still complete. Writes metrics and a manifest when
/// cfg.output_dir is set.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::size_t jobs = 1);
ExperimentResult run_experiment(const ExperimentConfig& cfg, const OfflineDataset& ds,
                                std::size_t jobs = 1);

/// Loads or generates the dataset named by cfg.dataset.
OfflineDataset load_dataset(const ExperimentConfig& cfg);

struct EfficiencyComparison {
  /// Per seed index: threshold = fraction * scratch window score.
  std::vector<double> thresholds;
  std::vector<std::optional<std::size_t>> scratch_steps;
  std::vector<std::optional<std::size_t>> pretrained_steps;
  /// Medians with runs that never cross counted as their last step + 1.
  double scratch_median = 0.0;
  double pretrained_median = 0.0;
};

/// Pairs seeds by position and measures steps-to-threshold for both runs.
EfficiencyComparison compare_efficiency(const ExperimentResult& scratch,
                                        const ExperimentResult& pretrained,
                                        double fraction = 0.9);

/// Deterministic policy from an actor checkpoint; Gaussian heads (2 * act_dim
/// outputs) act with their squashed mean.
ContinuousPolicy policy_from_checkpoint(const std::string& text, std::size_t act_dim);

/// "blob <len>\0<content>" SHA-1, hex encoded.
std::string git_blob_sha1(const std::string& content);

nlohmann::json run_manifest(const ExperimentResult& result);
void write_outputs(const ExperimentResult& result, const std::string& dir);

double median(std::vector<double> v);

}  // namespace offrl::harness
