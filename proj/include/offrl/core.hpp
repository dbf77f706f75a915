// Offline dataset model and return-target computations.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace offrl {

/// Rejected input or configuration. The CLI maps these to exit code 3.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A trajectory whose step i+1 does not start where step i ended.
class TrajectoryBreak : public ConfigError {
 public:
  TrajectoryBreak(std::size_t index, const std::string& what)
      : ConfigError(what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Either a discrete state id or a real feature vector.
using Observation = std::variant<std::size_t, std::vector<double>>;
/// Either a discrete action id or a real vector in [-1, 1]^d.
using ActionValue = std::variant<std::size_t, std::vector<double>>;

enum class DoneKind { NotDone, Termination, Timeout };

std::string to_string(DoneKind kind);
DoneKind done_kind_from_string(const std::string& s);

struct Transition {
  Observation state;
  ActionValue action;
  double reward = 0.0;
  Observation next_state;
  DoneKind done_kind = DoneKind::NotDone;
  std::optional<double> rtg;
  std::optional<double> soft_rtg;
};

struct Trajectory {
  std::vector<Transition> transitions;

  std::size_t horizon() const noexcept { return transitions.size(); }
  bool empty() const noexcept { return transitions.empty(); }
};

/// Throws TrajectoryBreak on the first step whose state differs from the
/// previous next_state, or whose done flags are misplaced.
void validate_trajectory(const Trajectory& traj);

struct OfflineDataset {
  std::vector<Trajectory> trajectories;
  std::string dataset_id;
  std::uint64_t seed = 0;
  /// Discount the rtg annotations were computed with, if annotated.
  std::optional<double> annotation_gamma;

  std::size_t num_transitions() const noexcept;
  bool annotated() const noexcept { return annotation_gamma.has_value(); }
};

enum class TimeoutMode { TreatAsTerminal, BootstrapExcluded };
enum class VisitMode { FirstVisit, EveryVisit };

struct ReturnConfig {
  double gamma = 0.99;
  double lambda_mix = 0.0;
  TimeoutMode timeout_mode = TimeoutMode::TreatAsTerminal;
  VisitMode visit_mode = VisitMode::EveryVisit;

  void validate() const;
};

/// Discounted return-to-go for every step, one backward pass.
std::vector<double> compute_return_to_go(const Trajectory& traj, const ReturnConfig& cfg);

/// (1 - lambda) * R + lambda * (r + gamma * q_next)
double compute_mixed_target(double mc_return, double reward, double gamma, double q_next,
                            double lambda_mix);

using EntropyEstimator = std::function<double(const Observation&)>;

/// Return-to-go plus discounted entropy bonuses of every later state in the
/// trajectory. The entropy at the step's own state is not included.
std::vector<double> compute_soft_return_to_go(const Trajectory& traj, const ReturnConfig& cfg,
                                              double temperature,
                                              const EntropyEstimator& entropy);

/// Steps that may be used as critic pre-training targets. With
/// BootstrapExcluded, the tail of a timed-out trajectory whose return is
/// truncated inside the effective horizon 1/(1-gamma) is masked out.
std::vector<bool> critic_pretrain_mask(const Trajectory& traj, const ReturnConfig& cfg);

enum class AnnotationMode { Hard, Soft };

/// Copy of `ds` with rtg (Hard) or rtg and soft_rtg (Soft) filled in.
OfflineDataset annotate_dataset(const OfflineDataset& ds, const ReturnConfig& cfg,
                                AnnotationMode mode, double temperature = 0.0,
                                const EntropyEstimator& entropy = {});

}  // namespace offrl
