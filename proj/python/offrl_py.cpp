#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "offrl/harness.hpp"
#include "offrl/tabular.hpp"

namespace py = pybind11;
using namespace offrl;

namespace {

VisitMode visit_mode(const std::string& s) {
  if (s == "every") return VisitMode::EveryVisit;
  if (s == "first") return VisitMode::FirstVisit;
  throw ConfigError("visit_mode must be 'every' or 'first'");
}

std::vector<std::vector<double>> grid_rows(const Table1Grid& g) {
  std::vector<std::vector<double>> out;
  for (const auto& row : g) out.emplace_back(row.begin(), row.end());
  return out;
}

std::vector<double> return_to_go(const std::vector<double>& rewards, double gamma, bool timeout) {
  Trajectory t;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    Transition tr;
    tr.state = Observation{i};
    tr.next_state = Observation{i + 1};
    tr.action = ActionValue{std::size_t{0}};
    tr.reward = rewards[i];
    if (i + 1 == rewards.size()) tr.done_kind = timeout ? DoneKind::Timeout : DoneKind::Termination;
    t.transitions.push_back(tr);
  }
  ReturnConfig cfg;
  cfg.gamma = gamma;
  return compute_return_to_go(t, cfg);
}

std::vector<std::size_t> fqi_iterations(std::size_t states, std::size_t actions, std::uint64_t seed,
                                        const std::vector<double>& betas, double delta, double gamma) {
  const TabularMDP mdp = random_tabular_mdp(states, actions, seed);
  const QTable star = solve_optimal_tabular(mdp, gamma, 1e-12);
  std::vector<InitStrategy> anchors;
  for (double b : betas) anchors.push_back(init::Interpolated{b, star});
  std::vector<std::size_t> ks;
  for (const auto& r : fqi_init_sweep(mdp, gamma, anchors, delta, FqiNoise{}, 10000)) ks.push_back(r.iterations);
  return ks;
}

std::string run_experiment(const std::string& config_json, std::size_t jobs) {
  const auto cfg = harness::experiment_from_json(nlohmann::json::parse(config_json));
  cfg.validate();
  return harness::run_manifest(harness::run_experiment(cfg, jobs)).dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Offline RL with pre-trained actors and critics";
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("return_to_go", &return_to_go, py::arg("rewards"), py::arg("gamma"), py::arg("timeout") = false);
  m.def("normalized_score", &harness::normalized_score, py::arg("raw"), py::arg("random"), py::arg("expert"));
  m.def(
      "table1", [](const std::string& mode, double lr) { return grid_rows(table1_compute(visit_mode(mode), lr)); },
      py::arg("visit_mode") = "every", py::arg("lr") = 1.0);
  m.def(
      "table1_expected", [](const std::string& mode) { return grid_rows(table1_expected(visit_mode(mode))); },
      py::arg("visit_mode") = "every");
  m.def("table1_columns", [] {
    const auto& c = table1_column_names();
    return std::vector<std::string>(c.begin(), c.end());
  });
  m.def("fqi_iterations", &fqi_iterations, py::arg("states"), py::arg("actions"), py::arg("seed"),
        py::arg("betas"), py::arg("delta") = 1e-3, py::arg("gamma") = 0.9);
  m.def("git_blob_sha1", &harness::git_blob_sha1);
  m.def("_run_experiment", &run_experiment, py::arg("config_json"), py::arg("jobs") = 1,
        py::call_guard<py::gil_scoped_release>());
}
