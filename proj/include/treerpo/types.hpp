// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace treerpo {

using Scalar = double;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Raised when a configuration violates a documented divisibility or shape
// constraint. Maps to exit code 1 in the CLI.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when an operation is called out of sequence or with arguments that
// violate its preconditions at runtime.
struct InvalidCallError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a value breaks a cross-module contract (e.g. a verifier
// returning a reward outside [0,1], a cached probability of zero).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised on non-finite intermediates. Maps to exit code 2 in the CLI.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Vocabulary {
  std::vector<std::string> tokens;
  int mask_id = 0;
  int pad_id = 1;

  int size() const { return static_cast<int>(tokens.size()); }

  int id_of(const std::string& tok) const {
    for (int i = 0; i < size(); ++i)
      if (tokens[i] == tok) return i;
    return -1;
  }

  void validate() const {
    if (size() < 3) throw ConfigError("vocabulary must have at least 3 tokens");
    if (mask_id == pad_id) throw ConfigError("mask_id and pad_id must differ");
    if (mask_id < 0 || mask_id >= size() || pad_id < 0 || pad_id >= size())
      throw ConfigError("mask_id/pad_id out of range");
  }
};

inline constexpr int kMaskedSlot = -1;

// Prompt plus a partially decoded completion. Masked slots hold kMaskedSlot.
// Blocks of block_length tokens are decoded strictly left to right; the
// active block is the lowest-indexed block that still contains a mask.
struct SequenceState {
  std::vector<int> prompt;
  std::vector<int> completion;
  int block_length = 0;

  int prompt_len() const { return static_cast<int>(prompt.size()); }
  int completion_len() const { return static_cast<int>(completion.size()); }
  int seq_len() const { return prompt_len() + completion_len(); }

  bool is_decoded(int pos) const { return completion[pos] != kMaskedSlot; }

  int decoded_count() const {
    int n = 0;
    for (int t : completion) n += (t != kMaskedSlot);
    return n;
  }

  bool fully_decoded() const { return decoded_count() == completion_len(); }

  int num_blocks() const { return completion_len() / block_length; }

  // Lowest block with a masked slot, or -1 when fully decoded.
  int active_block() const {
    for (int blk = 0; blk < num_blocks(); ++blk) {
      for (int i = blk * block_length; i < (blk + 1) * block_length; ++i)
        if (!is_decoded(i)) return blk;
    }
    return -1;
  }

  std::vector<int> masked_positions_in_block(int blk) const {
    std::vector<int> out;
    for (int i = blk * block_length; i < (blk + 1) * block_length; ++i)
      if (!is_decoded(i)) out.push_back(i);
    return out;
  }

  // Full token sequence with masked slots replaced by mask_id.
  std::vector<int> to_tokens(int mask_id) const {
    std::vector<int> out = prompt;
    out.reserve(seq_len());
    for (int t : completion) out.push_back(t == kMaskedSlot ? mask_id : t);
    return out;
  }
};

inline SequenceState make_masked_state(std::vector<int> prompt, int completion_len,
                                       int block_length) {
  if (completion_len <= 0 || block_length <= 0 || completion_len % block_length != 0)
    throw ConfigError("block length must divide completion length");
  SequenceState s;
  s.prompt = std::move(prompt);
  s.completion.assign(completion_len, kMaskedSlot);
  s.block_length = block_length;
  return s;
}

inline void validate_state(const SequenceState& s, const Vocabulary& vocab) {
  if (s.block_length <= 0 || s.completion_len() % s.block_length != 0)
    throw ConfigError("block length must divide completion length");
  for (int t : s.prompt)
    if (t < 0 || t >= vocab.size()) throw ConfigError("prompt token out of range");
  for (int t : s.completion) {
    if (t == kMaskedSlot) continue;
    if (t < 0 || t >= vocab.size() || t == vocab.mask_id)
      throw ConfigError("decoded completion token out of range");
  }
}

}  // namespace treerpo
