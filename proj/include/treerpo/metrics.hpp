// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace treerpo {

// One record per outer training step, written as a JSON line.
struct MetricsRecord {
  long step = 0;
  double reward_root = 0.0;       // root reward (= mean leaf reward)
  double reward_tree_mean = 0.0;  // mean reward over all tree nodes
  double masked_entropy = 0.0;    // mean rollout entropy at masked slots
  double pg_term = 0.0;
  double kl_term = 0.0;
  double distill_term = 0.0;
  double total_loss = 0.0;
  int updates = 0;
  int groups_skipped_distill = 0;
  double tau = 0.0;
  double lambda = 0.0;
  double rollout_ms = 0.0;
  double update_ms = 0.0;
  long denoise_calls = 0;
  long rollout_forwards = 0;
  long update_estimates = 0;  // single-pass transition estimates (one per edge)
};

std::string to_json_line(const MetricsRecord& rec);
MetricsRecord metrics_from_json_line(const std::string& line);
std::vector<MetricsRecord> read_metrics_file(const std::string& path);

// CSV rendering of the curves used for plots (step, reward, entropy, losses,
// schedule values).
std::string metrics_to_csv(const std::vector<MetricsRecord>& records);

}  // namespace treerpo
