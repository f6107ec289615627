// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "treerpo/model.hpp"
#include "treerpo/sampler.hpp"
#include "treerpo/types.hpp"

namespace treerpo {

// Shape of the rollout tree over a denoising trajectory: B branches per node,
// H tree steps from root to leaf, each tree step bundling s = N/H consecutive
// denoising steps that decode k = L/H slots (whole blocks).
struct TreeConfig {
  int branch = 2;          // B
  int height = 1;          // H
  int denoise_steps = 0;   // N
  int completion_len = 0;  // L
  int block_len = 0;       // b

  int steps_per_tree_step() const { return denoise_steps / height; }   // s
  int tokens_per_tree_step() const { return completion_len / height; } // k
  int tokens_per_denoise_step() const { return completion_len / denoise_steps; }

  void validate() const;
};

// Ok when every tree step covers whole blocks; otherwise a diagnostic naming
// the violated divisibility.
std::optional<std::string> validate_block_alignment(const TreeConfig& cfg);

struct TreeCost {
  long tree_steps = 0;                // B(B^H - 1)/(B - 1), one per edge
  long denoise_steps = 0;             // tree_steps * N / H
  long forward_passes_for_update = 0; // one single-pass estimate per edge
};

TreeCost tree_cost(const TreeConfig& cfg);

struct TreeNode {
  SequenceState state;
  int parent = -1;
  std::vector<int> children;
  // transition from the parent: newly decoded slots (sorted), their tokens,
  // and the old-policy parent-state probabilities at those tokens
  std::vector<int> decoded_positions;
  std::vector<int> decoded_tokens;
  std::vector<double> old_probs;
  std::optional<double> reward;
  std::optional<double> advantage;

  bool is_leaf() const { return children.empty(); }
};

struct RolloutTree {
  TreeConfig config;
  std::uint64_t prompt_id = 0;
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  const TreeNode& root() const { return nodes[0]; }
  std::vector<int> leaf_ids() const;
  std::vector<int> internal_ids() const;
};

struct RolloutStats {
  long denoise_calls = 0;
  long forward_calls = 0;
};

// Expands every non-leaf into B independent continuations of s denoising
// steps each, on sibling RNG streams split from `seed`. old_probs come from
// the parent-state forward pass (the first denoising step of each child).
RolloutTree build_tree(const PolicyModel& model_old, const std::vector<int>& prompt,
                       const TreeConfig& cfg, double temperature, std::uint64_t seed,
                       const std::vector<int>* allowed = nullptr,
                       RolloutStats* stats = nullptr);

using Verifier = std::function<double(const std::vector<int>& completion)>;

// Leaf rewards from the verifier, internal rewards as child means, bottom-up.
void propagate_rewards(RolloutTree& tree, const Verifier& verifier);

struct AdvantageGroup {
  int parent_node = -1;
  std::vector<int> child_nodes;
  std::vector<double> advantages;  // aligned with child_nodes; sums to zero
};

// Per-edge advantages R_c - R_p for every parent group. The last sibling's
// value is the negated sum of the others so each group sums to exactly zero.
std::vector<AdvantageGroup> compute_advantages(RolloutTree& tree);

// One JSON object per node, one node per line.
std::string dump_tree(const RolloutTree& tree);

}  // namespace treerpo
