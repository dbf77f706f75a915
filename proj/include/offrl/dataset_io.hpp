// JSON-lines dataset format:
//   {"traj_id", "step", "state", "action", "reward", "next_state", "done_kind",
//    "rtg"?, "soft_rtg"?}
// Discrete states/actions are integers, continuous ones are arrays.
#pragma once

#include <iosfwd>
#include <string>

#include "offrl/core.hpp"

namespace offrl {

void write_dataset_jsonl(const OfflineDataset& ds, std::ostream& os);
void write_dataset_jsonl(const OfflineDataset& ds, const std::string& path);

/// Rows are grouped by traj_id (in first-seen order) and sorted by step.
OfflineDataset read_dataset_jsonl(std::istream& is);
OfflineDataset read_dataset_jsonl(const std::string& path);

}  // namespace offrl
