// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <vector>

#include "treerpo/model.hpp"
#include "treerpo/types.hpp"

namespace treerpo {

// Record of one denoising step: which slots were decoded, to which tokens,
// and the grid the step sampled from.
struct DecodeRecord {
  std::vector<int> positions;  // completion slots, in decode order
  std::vector<int> tokens;
  DistributionGrid grid;
};

// Tempered categorical over one grid row. temperature 0 selects the argmax
// (lowest index wins ties); temperature 1 samples the row as-is. A non-null
// `allowed` restricts support to those token ids (renormalized).
int sample_token(const RowVector& probs, double temperature, std::mt19937_64& rng,
                 const std::vector<int>* allowed = nullptr);

// One denoising step: forward pass, then decode the `tokens_to_decode`
// highest-confidence masked slots of the active block. Confidence is the
// untempered row maximum; ties break toward the lowest slot index, and slots
// are sampled in that selection order so traces replay from the grid alone.
SequenceState denoise_step(const PolicyModel& model, const SequenceState& state,
                           int tokens_to_decode, double temperature,
                           std::mt19937_64& rng,
                           const std::vector<int>* allowed = nullptr,
                           DecodeRecord* record = nullptr);

// Full block-wise generation: N steps of L/N tokens each, blocks left to
// right. Requires N | L and (L/N) | b so every step stays inside one block.
SequenceState generate(const PolicyModel& model, const std::vector<int>& prompt,
                       int completion_len, int n_steps, int block_len,
                       double temperature, std::mt19937_64& rng,
                       const std::vector<int>* allowed = nullptr);

}  // namespace treerpo
