// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "treerpo/tape.hpp"
#include "treerpo/types.hpp"

namespace treerpo {

// Bidirectional masked-denoising policy: token + position embeddings, a stack
// of pre-norm self-attention blocks with tanh MLPs, and a tied output head
// scaled by a learnable gain. The gain starts at zero so the initial policy
// is exactly uniform over the vocabulary.
struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 32;
  int n_layers = 2;
  int n_heads = 2;
  int hidden_dim = 64;
  int max_seq_len = 64;
  double init_scale = 1.0;      // multiplies the 1/sqrt(fan_in) uniform bound
  double head_gain_init = 0.0;
  double logit_temperature = 1.0;  // divides logits before the softmax

  int head_dim() const { return embed_dim / n_heads; }
  void validate() const;
};

struct PolicyModel {
  ModelConfig config;
  Vocabulary vocab;
  std::map<std::string, Matrix> params;  // ordered; iteration order is stable

  mutable long forward_calls = 0;  // instrumentation only
};

PolicyModel init_model(const ModelConfig& config, Vocabulary vocab, std::uint64_t seed);

// One categorical distribution per sequence position (prompt rows included).
struct DistributionGrid {
  Matrix probs;  // (P+L) x V
  int prompt_len = 0;

  Eigen::Index rows() const { return probs.rows(); }
  Eigen::Index vocab_size() const { return probs.cols(); }
  // Row for completion slot `pos` (0-based within the completion).
  Eigen::Index completion_row(int pos) const { return prompt_len + pos; }
};

// Parameter leaves registered on a tape, keyed like PolicyModel::params.
struct ModelNodes {
  std::map<std::string, NodeId> params;
};

ModelNodes register_params(Tape& tape, const PolicyModel& model);

// Records the whole forward pass on the tape and returns the probability grid
// node ((P+L) x V, rows summing to one).
NodeId forward_on_tape(Tape& tape, const PolicyModel& model, const ModelNodes& nodes,
                       const SequenceState& state);

// Plain forward pass; deterministic given (model, state).
DistributionGrid forward(const PolicyModel& model, const SequenceState& state);

using ForwardFn = std::function<DistributionGrid(const SequenceState&)>;

inline ForwardFn make_forward(const PolicyModel& model) {
  return [&model](const SequenceState& s) { return forward(model, s); };
}

// Mean Shannon entropy (nats) of the given grid rows.
double masked_entropy(const DistributionGrid& grid, const std::vector<int>& rows);

// Mean KL(row_a || row_b) over the given rows; +infinity when grid_b has a
// zero where grid_a has mass (reported through the value, not thrown).
double positionwise_kl(const DistributionGrid& a, const DistributionGrid& b,
                       const std::vector<int>& rows);

using GradientSet = std::map<std::string, Matrix>;

// Reverse sweep from `loss`; returns gradients congruent with model.params.
GradientSet compute_gradients(Tape& tape, const ModelNodes& nodes, NodeId loss);

}  // namespace treerpo
