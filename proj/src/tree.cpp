// SPDX-License-Identifier: Apache-2.0
#include "treerpo/tree.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "treerpo/rng.hpp"

#include <json.hpp>

namespace treerpo {

void TreeConfig::validate() const {
  if (branch < 2) throw ConfigError("tree branch factor must be at least 2");
  if (height < 1) throw ConfigError("tree height must be at least 1");
  if (denoise_steps <= 0 || completion_len <= 0 || block_len <= 0)
    throw ConfigError("tree step/length parameters must be positive");
  if (denoise_steps % height != 0)
    throw ConfigError("tree height must divide the denoise step count");
  if (completion_len % block_len != 0)
    throw ConfigError("block length must divide the completion length");
  if (completion_len % denoise_steps != 0)
    throw ConfigError("denoise step count must divide the completion length");
  if (block_len % tokens_per_denoise_step() != 0)
    throw ConfigError("tokens per denoise step must divide the block length");
  if (auto diag = validate_block_alignment(*this)) throw ConfigError(*diag);
}

std::optional<std::string> validate_block_alignment(const TreeConfig& cfg) {
  if (cfg.block_len <= 0 || cfg.completion_len % cfg.block_len != 0)
    return "block length " + std::to_string(cfg.block_len) +
           " does not divide completion length " + std::to_string(cfg.completion_len);
  int blocks = cfg.completion_len / cfg.block_len;
  if (cfg.height <= 0 || blocks % cfg.height != 0)
    return std::to_string(blocks) + " blocks not divisible by tree height " +
           std::to_string(cfg.height);
  return std::nullopt;
}

TreeCost tree_cost(const TreeConfig& cfg) {
  long pow = 1;
  for (int i = 0; i < cfg.height; ++i) pow *= cfg.branch;
  TreeCost c;
  c.tree_steps = static_cast<long>(cfg.branch) * (pow - 1) / (cfg.branch - 1);
  c.denoise_steps = c.tree_steps * (cfg.denoise_steps / cfg.height);
  c.forward_passes_for_update = c.tree_steps;
  return c;
}

std::vector<int> RolloutTree::leaf_ids() const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(nodes.size()); ++i)
    if (nodes[i].is_leaf()) out.push_back(i);
  return out;
}

std::vector<int> RolloutTree::internal_ids() const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(nodes.size()); ++i)
    if (!nodes[i].is_leaf()) out.push_back(i);
  return out;
}

namespace {

// Runs one tree step (s denoising steps) from the parent state on the child's
// own RNG stream and fills the child's transition record.
TreeNode expand_child(const PolicyModel& model, const TreeNode& parent,
                      const TreeConfig& cfg, double temperature,
                      std::mt19937_64& rng, const std::vector<int>* allowed,
                      RolloutStats* stats) {
  TreeNode child;
  child.state = parent.state;
  const int per_step = cfg.tokens_per_denoise_step();

  std::vector<std::pair<int, int>> decoded;  // (position, token)
  DistributionGrid parent_grid;
  for (int s = 0; s < cfg.steps_per_tree_step(); ++s) {
    DecodeRecord rec;
    child.state = denoise_step(model, child.state, per_step, temperature, rng, allowed, &rec);
    if (stats) {
      ++stats->denoise_calls;
      ++stats->forward_calls;
    }
    if (s == 0) parent_grid = std::move(rec.grid);  // forward on the parent state
    for (std::size_t i = 0; i < rec.positions.size(); ++i)
      decoded.emplace_back(rec.positions[i], rec.tokens[i]);
  }

  std::sort(decoded.begin(), decoded.end());
  for (const auto& [pos, tok] : decoded) {
    child.decoded_positions.push_back(pos);
    child.decoded_tokens.push_back(tok);
    child.old_probs.push_back(parent_grid.probs(parent_grid.completion_row(pos), tok));
  }
  return child;
}

}  // namespace

RolloutTree build_tree(const PolicyModel& model_old, const std::vector<int>& prompt,
                       const TreeConfig& cfg, double temperature, std::uint64_t seed,
                       const std::vector<int>* allowed, RolloutStats* stats) {
  cfg.validate();

  RolloutTree tree;
  tree.config = cfg;
  tree.prompt_id = seed;
  TreeNode root;
  root.state = make_masked_state(prompt, cfg.completion_len, cfg.block_len);
  tree.nodes.push_back(std::move(root));

  std::vector<int> frontier{0};
  for (int depth = 0; depth < cfg.height; ++depth) {
    std::vector<int> next_frontier;
    for (int node_id : frontier) {
      for (int b = 0; b < cfg.branch; ++b) {
        auto rng = make_stream(seed, {0x7ee, static_cast<std::uint64_t>(node_id),
                                      static_cast<std::uint64_t>(b)});
        TreeNode child = expand_child(model_old, tree.nodes[node_id], cfg, temperature,
                                      rng, allowed, stats);
        child.parent = node_id;
        int child_id = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back(std::move(child));
        tree.nodes[node_id].children.push_back(child_id);
        next_frontier.push_back(child_id);
      }
    }
    frontier = std::move(next_frontier);
  }
  return tree;
}

namespace {

double propagate(RolloutTree& tree, int node_id, const Verifier& verifier) {
  TreeNode& node = tree.nodes[node_id];
  if (node.is_leaf()) {
    if (!node.state.fully_decoded())
      throw InvalidCallError("propagate_rewards: leaf is not fully decoded");
    double r = verifier(node.state.completion);
    if (!(r >= 0.0 && r <= 1.0))
      throw ContractError("verifier returned a reward outside [0,1]");
    node.reward = r;
    return r;
  }
  double sum = 0.0;
  for (int c : node.children) sum += propagate(tree, c, verifier);
  double mean = sum / static_cast<double>(node.children.size());
  node.reward = mean;
  return mean;
}

}  // namespace

void propagate_rewards(RolloutTree& tree, const Verifier& verifier) {
  propagate(tree, 0, verifier);
}

std::vector<AdvantageGroup> compute_advantages(RolloutTree& tree) {
  std::vector<AdvantageGroup> groups;
  for (int id : tree.internal_ids()) {
    TreeNode& parent = tree.nodes[id];
    if (!parent.reward.has_value())
      throw InvalidCallError("compute_advantages called before propagate_rewards");
    AdvantageGroup g;
    g.parent_node = id;
    double r_p = *parent.reward;
    double partial = 0.0;
    const int n = static_cast<int>(parent.children.size());
    for (int i = 0; i < n; ++i) {
      int c = parent.children[i];
      if (!tree.nodes[c].reward.has_value())
        throw InvalidCallError("compute_advantages: child reward missing");
      // last sibling closes the group to an exactly-zero sum
      double a = (i + 1 < n) ? *tree.nodes[c].reward - r_p : -partial;
      partial += a;
      tree.nodes[c].advantage = a;
      g.child_nodes.push_back(c);
      g.advantages.push_back(a);
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

std::string dump_tree(const RolloutTree& tree) {
  std::ostringstream out;
  for (int i = 0; i < static_cast<int>(tree.nodes.size()); ++i) {
    const TreeNode& n = tree.nodes[i];
    nlohmann::json rec{{"id", i},
                       {"parent", n.parent},
                       {"decoded_positions", n.decoded_positions},
                       {"decoded_tokens", n.decoded_tokens},
                       {"old_probs", n.old_probs}};
    rec["reward"] = n.reward.has_value() ? nlohmann::json(*n.reward) : nlohmann::json();
    rec["advantage"] =
        n.advantage.has_value() ? nlohmann::json(*n.advantage) : nlohmann::json();
    out << rec.dump() << "\n";
  }
  return out.str();
}

}  // namespace treerpo
