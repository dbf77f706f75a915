// Exact tabular Q-learning with configurable initialization, and fitted
// Q-iteration with measured per-iteration approximation error.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "offrl/core.hpp"
#include "offrl/envs.hpp"

namespace offrl {

namespace init {
struct Zero {};
struct MCFirstVisit {};
struct MCEveryVisit {};
/// beta * anchor + (1 - beta) * 0
struct Interpolated {
  double beta = 0.0;
  QTable anchor;
};
struct Custom {
  QTable table;
};
}  // namespace init

using InitStrategy =
    std::variant<init::Zero, init::MCFirstVisit, init::MCEveryVisit, init::Interpolated, init::Custom>;

/// Mean return-to-go per visited (s, a). The dataset must carry rtg
/// annotations computed with the same gamma.
QTable mc_initialize(const OfflineDataset& ds, std::size_t n_states, std::size_t n_actions,
                     double gamma, VisitMode visit_mode);

/// One in-place sweep of the Q-learning update over the dataset in trajectory
/// order. Terminated next-states contribute 0; timeouts bootstrap.
QTable q_learning_epoch(QTable q, const OfflineDataset& ds, double lr, double gamma);

/// Epoch-0 table for `init`. MC strategies annotate `ds` at `gamma` if needed.
QTable initial_table(const InitStrategy& init, const TabularMDP& mdp, const OfflineDataset& ds,
                     double gamma);

/// Per-epoch history starting with the epoch-0 table. Stops after the first
/// epoch that changes nothing.
std::vector<QTable> run_q_learning(const TabularMDP& mdp, const OfflineDataset& ds,
                                   const InitStrategy& init, double lr, double gamma,
                                   std::size_t max_epochs);

/// Exact equality with `reference` on every visited pair of `q`.
bool values_match_on_visited(const QTable& q, const QTable& reference);
/// True when every visited non-terminal state's greedy action is the unique
/// maximizer and agrees with `reference`'s greedy action.
bool greedy_policy_matches(const QTable& q, const QTable& reference);

struct FqiReport {
  std::size_t iterations = 0;
  /// epsilons[i] = ||Q_{i+1} - T Q_i||_inf as measured.
  std::vector<double> epsilons;
  /// errors[i] = ||Q_i - Q*||_inf, i = 0..iterations.
  std::vector<double> errors;
  double init_error = 0.0;
  double final_error = 0.0;
  double delta_threshold = 0.0;
  bool success = false;
};

struct FqiNoise {
  /// Half-width of the zero-mean uniform noise added after each exact backup.
  double scale = 0.0;
  std::uint64_t seed = 0;
};

/// Iterates Q <- T Q (+ noise) from q0 until ||Q_k - Q*||_inf <= delta.
FqiReport fitted_q_iteration(const TabularMDP& mdp, double gamma, const QTable& q0, double delta,
                             std::size_t max_iters, const FqiNoise& noise = {});
/// Same, with a precomputed Q*.
FqiReport fitted_q_iteration(const TabularMDP& mdp, double gamma, const QTable& q0,
                             const QTable& q_star, double delta, std::size_t max_iters,
                             const FqiNoise& noise = {});

/// Right-hand side of the accumulated-error bound after k iterations:
/// sum_{i<k} gamma^i * eps_{k-i-1} + gamma^k * init_error.
double fqi_error_bound(const FqiReport& report, double gamma, std::size_t k);

/// Runs fitted Q-iteration from each anchor with the same noise seed.
std::vector<FqiReport> fqi_init_sweep(const TabularMDP& mdp, double gamma,
                                      const std::vector<InitStrategy>& anchors, double delta,
                                      const FqiNoise& noise, std::size_t max_iters = 10000);

// ---------------------------------------------------------------------------
// Motivational-example grid

/// Columns: Q(0,R) Q(1,L) Q(1,R) Q(2,R) for zero init, then the same for MC
/// init. Rows: epochs 0..3.
using Table1Grid = std::array<std::array<double, 8>, 4>;

Table1Grid table1_expected(VisitMode visit_mode);
Table1Grid table1_compute(VisitMode visit_mode, double lr = 1.0);

struct Table1Cell {
  std::size_t epoch;
  std::size_t column;
};
std::optional<Table1Cell> table1_first_mismatch(const Table1Grid& got, const Table1Grid& want);

const std::array<std::string, 8>& table1_column_names();

}  // namespace offrl
