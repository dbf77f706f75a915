#include "offrl/dataset_io.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include "json.hpp"

namespace offrl {
namespace {

using nlohmann::json;

json variant_to_json(const std::variant<std::size_t, std::vector<double>>& v) {
  if (const auto* idx = std::get_if<std::size_t>(&v)) return *idx;
  return std::get<std::vector<double>>(v);
}

std::variant<std::size_t, std::vector<double>> variant_from_json(const json& j,
                                                                 const char* field) {
  if (j.is_number_unsigned()) return j.get<std::size_t>();
  if (j.is_number_integer()) {
    const auto v = j.get<long long>();
    if (v < 0) throw ConfigError(std::string("negative index in field ") + field);
    return static_cast<std::size_t>(v);
  }
  if (j.is_array()) return j.get<std::vector<double>>();
  throw ConfigError(std::string("field ") + field + " must be an integer or an array");
}

}  // namespace

void write_dataset_jsonl(const OfflineDataset& ds, std::ostream& os) {
  for (std::size_t t = 0; t < ds.trajectories.size(); ++t) {
    const auto& steps = ds.trajectories[t].transitions;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& tr = steps[i];
      json row;
      row["traj_id"] = t;
      row["step"] = i;
      row["state"] = variant_to_json(tr.state);
      row["action"] = variant_to_json(tr.action);
      row["reward"] = tr.reward;
      row["next_state"] = variant_to_json(tr.next_state);
      row["done_kind"] = to_string(tr.done_kind);
      if (tr.rtg) row["rtg"] = *tr.rtg;
      if (tr.soft_rtg) row["soft_rtg"] = *tr.soft_rtg;
      os << row.dump() << '\n';
    }
  }
}

void write_dataset_jsonl(const OfflineDataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  write_dataset_jsonl(ds, os);
}

OfflineDataset read_dataset_jsonl(std::istream& is) {
  std::map<std::size_t, std::vector<std::pair<std::size_t, Transition>>> grouped;
  std::vector<std::size_t> order;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json row;
    try {
      row = json::parse(line);
      Transition tr;
      tr.state = variant_from_json(row.at("state"), "state");
      tr.action = variant_from_json(row.at("action"), "action");
      tr.reward = row.at("reward").get<double>();
      tr.next_state = variant_from_json(row.at("next_state"), "next_state");
      tr.done_kind = done_kind_from_string(row.at("done_kind").get<std::string>());
      if (row.contains("rtg") && !row["rtg"].is_null()) tr.rtg = row["rtg"].get<double>();
      if (row.contains("soft_rtg") && !row["soft_rtg"].is_null()) {
        tr.soft_rtg = row["soft_rtg"].get<double>();
      }
      const auto id = row.at("traj_id").get<std::size_t>();
      if (!grouped.count(id)) order.push_back(id);
      grouped[id].emplace_back(row.at("step").get<std::size_t>(), std::move(tr));
    } catch (const json::exception& e) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  OfflineDataset ds;
  for (auto id : order) {
    auto& rows = grouped[id];
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    Trajectory traj;
    for (auto& [step, tr] : rows) traj.transitions.push_back(std::move(tr));
    validate_trajectory(traj);
    ds.trajectories.push_back(std::move(traj));
  }
  return ds;
}

OfflineDataset read_dataset_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open dataset " + path);
  return read_dataset_jsonl(is);
}

}  // namespace offrl
