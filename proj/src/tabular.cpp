#include "offrl/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace offrl {
namespace {

std::size_t discrete(const Observation& o, const char* what) {
  const auto* idx = std::get_if<std::size_t>(&o);
  if (!idx) throw ConfigError(std::string("tabular methods need discrete ") + what);
  return *idx;
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

}  // namespace

QTable mc_initialize(const OfflineDataset& ds, std::size_t n_states, std::size_t n_actions,
                     double gamma, VisitMode visit_mode) {
  QTable q(n_states, n_actions, gamma);
  if (ds.num_transitions() == 0) return q;
  if (!ds.annotation_gamma || *ds.annotation_gamma != gamma) {
    throw ConfigError("dataset rtg annotations were not computed with gamma " +
                      std::to_string(gamma));
  }
  std::vector<double> sum(n_states * n_actions, 0.0);
  std::vector<std::size_t> count(n_states * n_actions, 0);
  for (const auto& traj : ds.trajectories) {
    std::set<std::size_t> seen;
    for (const auto& tr : traj.transitions) {
      const std::size_t s = discrete(tr.state, "states");
      const std::size_t a = discrete(tr.action, "actions");
      if (s >= n_states || a >= n_actions) throw ConfigError("state or action out of range");
      if (!tr.rtg) throw ConfigError("dataset is missing rtg annotations");
      const std::size_t key = s * n_actions + a;
      if (visit_mode == VisitMode::FirstVisit && !seen.insert(key).second) continue;
      sum[key] += *tr.rtg;
      ++count[key];
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) {
    if (count[i] == 0) continue;
    q.values[i] = sum[i] / static_cast<double>(count[i]);
    q.visited_mask[i] = true;
  }
  return q;
}

QTable q_learning_epoch(QTable q, const OfflineDataset& ds, double lr, double gamma) {
  if (!(lr > 0.0 && lr <= 1.0)) throw ConfigError("learning rate must lie in (0, 1]");
  for (const auto& traj : ds.trajectories) {
    for (const auto& tr : traj.transitions) {
      const std::size_t s = discrete(tr.state, "states");
      const std::size_t a = discrete(tr.action, "actions");
      const std::size_t s2 = discrete(tr.next_state, "states");
      if (s >= q.n_states || s2 >= q.n_states || a >= q.n_actions) {
        throw ConfigError("state or action out of range");
      }
      const double next = tr.done_kind == DoneKind::Termination ? 0.0 : q.max_value(s2);
      double& cell = q.at(s, a);
      cell += lr * (tr.reward + gamma * next - cell);
      q.visited_mask[s * q.n_actions + a] = true;
    }
  }
  return q;
}

QTable initial_table(const InitStrategy& init, const TabularMDP& mdp, const OfflineDataset& ds,
                     double gamma) {
  auto mc = [&](VisitMode mode) {
    const OfflineDataset& annotated =
        ds.annotation_gamma && *ds.annotation_gamma == gamma
            ? ds
            : annotate_dataset(ds, ReturnConfig{gamma, 0.0, TimeoutMode::TreatAsTerminal, mode},
                               AnnotationMode::Hard);
    return mc_initialize(annotated, mdp.n_states, mdp.n_actions, gamma, mode);
  };
  QTable q = std::visit(
      overloaded{
          [&](const init::Zero&) { return QTable(mdp.n_states, mdp.n_actions, gamma); },
          [&](const init::MCFirstVisit&) { return mc(VisitMode::FirstVisit); },
          [&](const init::MCEveryVisit&) { return mc(VisitMode::EveryVisit); },
          [&](const init::Interpolated& in) {
            if (!(in.beta >= 0.0 && in.beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
            if (in.anchor.n_states != mdp.n_states || in.anchor.n_actions != mdp.n_actions) {
              throw ConfigError("anchor table shape does not match the MDP");
            }
            QTable t = in.anchor;
            for (auto& v : t.values) v *= in.beta;
            return t;
          },
          [&](const init::Custom& c) {
            if (c.table.n_states != mdp.n_states || c.table.n_actions != mdp.n_actions) {
              throw ConfigError("custom table shape does not match the MDP");
            }
            return c.table;
          },
      },
      init);
  q.gamma = gamma;
  q.set_available_from(mdp);
  return q;
}

std::vector<QTable> run_q_learning(const TabularMDP& mdp, const OfflineDataset& ds,
                                   const InitStrategy& init, double lr, double gamma,
                                   std::size_t max_epochs) {
  if (max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
  std::vector<QTable> history;
  history.push_back(initial_table(init, mdp, ds, gamma));
  // The dataset defines which pairs are visited from epoch 0 on.
  for (const auto& traj : ds.trajectories) {
    for (const auto& tr : traj.transitions) {
      const std::size_t s = discrete(tr.state, "states");
      const std::size_t a = discrete(tr.action, "actions");
      history.front().visited_mask[s * mdp.n_actions + a] = true;
    }
  }
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    QTable next = q_learning_epoch(history.back(), ds, lr, gamma);
    const bool unchanged = next.values == history.back().values;
    history.push_back(std::move(next));
    if (unchanged) break;
  }
  return history;
}

bool values_match_on_visited(const QTable& q, const QTable& reference) {
  for (std::size_t s = 0; s < q.n_states; ++s) {
    for (std::size_t a = 0; a < q.n_actions; ++a) {
      if (q.visited(s, a) && q.at(s, a) != reference.at(s, a)) return false;
    }
  }
  return true;
}

bool greedy_policy_matches(const QTable& q, const QTable& reference) {
  for (std::size_t s = 0; s < q.n_states; ++s) {
    bool any = false;
    for (std::size_t a = 0; a < q.n_actions; ++a) any = any || q.visited(s, a);
    if (!any) continue;
    const std::size_t want = reference.greedy_action(s);
    const std::size_t got = q.greedy_action(s);
    if (got != want) return false;
    for (std::size_t a = 0; a < q.n_actions; ++a) {
      if (a != got && q.legal(s, a) && q.at(s, a) == q.at(s, got)) return false;
    }
  }
  return true;
}

FqiReport fitted_q_iteration(const TabularMDP& mdp, double gamma, const QTable& q0, double delta,
                             std::size_t max_iters, const FqiNoise& noise) {
  if (!(gamma < 1.0)) throw ConfigError("fitted Q-iteration needs gamma < 1");
  const QTable q_star = solve_optimal_tabular(mdp, gamma, 1e-13);
  return fitted_q_iteration(mdp, gamma, q0, q_star, delta, max_iters, noise);
}

FqiReport fitted_q_iteration(const TabularMDP& mdp, double gamma, const QTable& q0,
                             const QTable& q_star, double delta, std::size_t max_iters,
                             const FqiNoise& noise) {
  if (!(gamma < 1.0)) throw ConfigError("fitted Q-iteration needs gamma < 1");
  if (!(delta > 0.0)) throw ConfigError("delta must be positive");
  Rng rng(noise.seed);
  std::uniform_real_distribution<double> unif(-noise.scale, noise.scale);

  FqiReport report;
  report.delta_threshold = delta;
  QTable q = q0;
  q.set_available_from(mdp);
  report.init_error = sup_norm_distance(q, q_star);
  report.errors.push_back(report.init_error);
  double err = report.init_error;
  while (err > delta && report.iterations < max_iters) {
    const QTable backup = bellman_optimality(mdp, q, gamma);
    QTable next = backup;
    if (noise.scale > 0.0) {
      for (auto& v : next.values) v += unif(rng);
    }
    report.epsilons.push_back(sup_norm_distance(next, backup));
    q = std::move(next);
    err = sup_norm_distance(q, q_star);
    report.errors.push_back(err);
    ++report.iterations;
  }
  report.final_error = err;
  report.success = err <= delta;
  return report;
}

double fqi_error_bound(const FqiReport& report, double gamma, std::size_t k) {
  double bound = std::pow(gamma, static_cast<double>(k)) * report.init_error;
  for (std::size_t i = 0; i < k; ++i) {
    bound += std::pow(gamma, static_cast<double>(i)) * report.epsilons[k - i - 1];
  }
  return bound;
}

std::vector<FqiReport> fqi_init_sweep(const TabularMDP& mdp, double gamma,
                                      const std::vector<InitStrategy>& anchors, double delta,
                                      const FqiNoise& noise, std::size_t max_iters) {
  if (anchors.empty()) throw ConfigError("fqi sweep needs at least one anchor");
  const QTable q_star = solve_optimal_tabular(mdp, gamma, 1e-13);
  const OfflineDataset none;
  std::vector<FqiReport> out;
  out.reserve(anchors.size());
  for (const auto& anchor : anchors) {
    const QTable q0 = initial_table(anchor, mdp, none, gamma);
    out.push_back(fitted_q_iteration(mdp, gamma, q0, q_star, delta, max_iters, noise));
  }
  return out;
}

// ---------------------------------------------------------------------------

const std::array<std::string, 8>& table1_column_names() {
  static const std::array<std::string, 8> names = {
      "zero Q(0,R)", "zero Q(1,L)", "zero Q(1,R)", "zero Q(2,R)",
      "mc Q(0,R)",   "mc Q(1,L)",   "mc Q(1,R)",   "mc Q(2,R)"};
  return names;
}

Table1Grid table1_expected(VisitMode visit_mode) {
  const double mc0 = visit_mode == VisitMode::EveryVisit ? 0.5 : 0.0;
  return {{
      {0, 0, 0, 0, mc0, 0, 1, 3},
      {0, -1, -2, 3, 1, 0, 1, 3},
      {-2, -2, 1, 3, 1, 0, 1, 3},
      {1, 0, 1, 3, 1, 0, 1, 3},
  }};
}

Table1Grid table1_compute(VisitMode visit_mode, double lr) {
  const auto [mdp, ds] = motivational_mdp();
  const double gamma = 1.0;
  const auto zero = run_q_learning(mdp, ds, init::Zero{}, lr, gamma, 3);
  const InitStrategy mc_init = visit_mode == VisitMode::EveryVisit
                                   ? InitStrategy{init::MCEveryVisit{}}
                                   : InitStrategy{init::MCFirstVisit{}};
  const auto mc = run_q_learning(mdp, ds, mc_init, lr, gamma, 3);
  const std::pair<std::size_t, std::size_t> cells[] = {
      {0, kRight}, {1, kLeft}, {1, kRight}, {2, kRight}};
  Table1Grid grid{};
  for (std::size_t epoch = 0; epoch < 4; ++epoch) {
    // Converged runs stop early; later epochs repeat the last table.
    const QTable& z = zero[std::min(epoch, zero.size() - 1)];
    const QTable& m = mc[std::min(epoch, mc.size() - 1)];
    for (std::size_t c = 0; c < 4; ++c) {
      grid[epoch][c] = z.at(cells[c].first, cells[c].second);
      grid[epoch][4 + c] = m.at(cells[c].first, cells[c].second);
    }
  }
  return grid;
}

std::optional<Table1Cell> table1_first_mismatch(const Table1Grid& got, const Table1Grid& want) {
  for (std::size_t e = 0; e < 4; ++e) {
    for (std::size_t c = 0; c < 8; ++c) {
      if (got[e][c] != want[e][c]) return Table1Cell{e, c};
    }
  }
  return std::nullopt;
}

}  // namespace offrl
