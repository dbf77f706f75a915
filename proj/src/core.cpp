#include "offrl/core.hpp"

#include <cmath>
#include <numeric>

namespace offrl {

std::string to_string(DoneKind kind) {
  switch (kind) {
    case DoneKind::NotDone:
      return "not_done";
    case DoneKind::Termination:
      return "termination";
    case DoneKind::Timeout:
      return "timeout";
  }
  return "not_done";
}

DoneKind done_kind_from_string(const std::string& s) {
  if (s == "not_done") return DoneKind::NotDone;
  if (s == "termination") return DoneKind::Termination;
  if (s == "timeout") return DoneKind::Timeout;
  throw ConfigError("unknown done_kind '" + s + "'");
}

void validate_trajectory(const Trajectory& traj) {
  if (traj.empty()) throw ConfigError("empty trajectory");
  const auto& steps = traj.transitions;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const bool last = i + 1 == steps.size();
    if (last && steps[i].done_kind == DoneKind::NotDone) {
      throw TrajectoryBreak(i, "trajectory does not end with termination or timeout");
    }
    if (!last && steps[i].done_kind != DoneKind::NotDone) {
      throw TrajectoryBreak(i, "trajectory ends early at step " + std::to_string(i));
    }
    if (!last && !(steps[i].next_state == steps[i + 1].state)) {
      throw TrajectoryBreak(i + 1, "trajectory is not contiguous at step " + std::to_string(i + 1));
    }
  }
}

std::size_t OfflineDataset::num_transitions() const noexcept {
  return std::accumulate(trajectories.begin(), trajectories.end(), std::size_t{0},
                         [](std::size_t n, const Trajectory& t) { return n + t.horizon(); });
}

void ReturnConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) {
    throw ConfigError("lambda_mix must lie in [0, 1]");
  }
}

std::vector<double> compute_return_to_go(const Trajectory& traj, const ReturnConfig& cfg) {
  cfg.validate();
  validate_trajectory(traj);
  const auto& steps = traj.transitions;
  std::vector<double> out(steps.size());
  // Timeout and termination both end the sum at the last observed reward.
  double running = 0.0;
  for (std::size_t i = steps.size(); i-- > 0;) {
    running = steps[i].reward + cfg.gamma * running;
    out[i] = running;
  }
  return out;
}

double compute_mixed_target(double mc_return, double reward, double gamma, double q_next,
                            double lambda_mix) {
  if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) {
    throw ConfigError("lambda_mix must lie in [0, 1]");
  }
  if (lambda_mix == 0.0) return mc_return;
  const double td = reward + gamma * q_next;
  if (lambda_mix == 1.0) return td;
  return (1.0 - lambda_mix) * mc_return + lambda_mix * td;
}

std::vector<double> compute_soft_return_to_go(const Trajectory& traj, const ReturnConfig& cfg,
                                              double temperature,
                                              const EntropyEstimator& entropy) {
  if (temperature < 0.0) throw ConfigError("temperature must be non-negative");
  cfg.validate();
  validate_trajectory(traj);
  const auto& steps = traj.transitions;
  if (temperature > 0.0 && !entropy) throw ConfigError("soft return needs an entropy estimator");
  std::vector<double> out(steps.size());
  double running = 0.0;
  for (std::size_t i = steps.size(); i-- > 0;) {
    double bonus = 0.0;
    if (i + 1 < steps.size() && temperature > 0.0) {
      bonus = temperature * entropy(steps[i + 1].state);
    }
    running = steps[i].reward + cfg.gamma * (bonus + running);
    out[i] = running;
  }
  return out;
}

std::vector<bool> critic_pretrain_mask(const Trajectory& traj, const ReturnConfig& cfg) {
  const std::size_t n = traj.horizon();
  std::vector<bool> mask(n, true);
  if (n == 0 || cfg.timeout_mode != TimeoutMode::BootstrapExcluded) return mask;
  if (traj.transitions.back().done_kind != DoneKind::Timeout) return mask;
  if (cfg.gamma >= 1.0) return std::vector<bool>(n, false);
  const auto horizon = static_cast<std::size_t>(std::ceil(1.0 / (1.0 - cfg.gamma)));
  for (std::size_t i = 0; i < n; ++i) {
    if (n - 1 - i < horizon) mask[i] = false;
  }
  return mask;
}

OfflineDataset annotate_dataset(const OfflineDataset& ds, const ReturnConfig& cfg,
                                AnnotationMode mode, double temperature,
                                const EntropyEstimator& entropy) {
  if (ds.trajectories.empty()) throw ConfigError("cannot annotate an empty dataset");
  if (mode == AnnotationMode::Soft && !entropy) {
    throw ConfigError("soft annotation requires an entropy estimator");
  }
  OfflineDataset out = ds;
  for (auto& traj : out.trajectories) {
    const auto hard = compute_return_to_go(traj, cfg);
    std::vector<double> soft;
    if (mode == AnnotationMode::Soft) {
      soft = compute_soft_return_to_go(traj, cfg, temperature, entropy);
    }
    for (std::size_t i = 0; i < traj.transitions.size(); ++i) {
      traj.transitions[i].rtg = hard[i];
      traj.transitions[i].soft_rtg =
          mode == AnnotationMode::Soft ? std::optional<double>(soft[i]) : std::nullopt;
    }
  }
  out.annotation_gamma = cfg.gamma;
  return out;
}

}  // namespace offrl
