// SPDX-License-Identifier: Apache-2.0
#include "treerpo/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "treerpo/rng.hpp"

namespace treerpo {

int sample_token(const RowVector& probs, double temperature, std::mt19937_64& rng,
                 const std::vector<int>* allowed) {
  const Eigen::Index V = probs.size();
  RowVector w;
  if (allowed) {
    w = RowVector::Zero(V);
    for (int t : allowed) w(t) = probs(t);
    double s = w.sum();
    if (s <= 0.0) {
      // degenerate row: fall back to uniform over the allowed set
      for (int t : *allowed) w(t) = 1.0;
      s = w.sum();
    }
    w /= s;
  } else {
    w = probs;
  }

  if (temperature == 0.0) {
    int best = -1;
    double best_p = -1.0;
    for (Eigen::Index v = 0; v < V; ++v)
      if (w(v) > best_p) {
        best_p = w(v);
        best = static_cast<int>(v);
      }
    return best;
  }

  if (temperature != 1.0) {
    // p^(1/T) normalized, computed through logs for stability
    RowVector lw(V);
    for (Eigen::Index v = 0; v < V; ++v)
      lw(v) = w(v) > 0.0 ? std::log(w(v)) / temperature
                         : -std::numeric_limits<double>::infinity();
    double mx = lw.maxCoeff();
    for (Eigen::Index v = 0; v < V; ++v)
      w(v) = std::isinf(lw(v)) ? 0.0 : std::exp(lw(v) - mx);
    w /= w.sum();
  }

  double u = uniform01(rng);
  double cum = 0.0;
  int last = 0;
  for (Eigen::Index v = 0; v < V; ++v) {
    if (w(v) <= 0.0) continue;
    cum += w(v);
    last = static_cast<int>(v);
    if (u < cum) return last;
  }
  return last;  // rounding left cum slightly below 1
}

SequenceState denoise_step(const PolicyModel& model, const SequenceState& state,
                           int tokens_to_decode, double temperature,
                           std::mt19937_64& rng, const std::vector<int>* allowed,
                           DecodeRecord* record) {
  int blk = state.active_block();
  if (blk < 0) throw InvalidCallError("denoise_step: no masked slots remain");
  std::vector<int> masked = state.masked_positions_in_block(blk);
  if (tokens_to_decode <= 0 ||
      tokens_to_decode > static_cast<int>(masked.size()))
    throw InvalidCallError("denoise_step: active block has fewer masked slots than requested");

  DistributionGrid grid = forward(model, state);

  // rank masked slots by untempered row confidence, lowest index on ties
  std::vector<std::pair<double, int>> ranked;
  ranked.reserve(masked.size());
  for (int pos : masked)
    ranked.emplace_back(grid.probs.row(grid.completion_row(pos)).maxCoeff(), pos);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  SequenceState next = state;
  if (record) {
    record->positions.clear();
    record->tokens.clear();
  }
  for (int i = 0; i < tokens_to_decode; ++i) {
    int pos = ranked[i].second;
    int tok = sample_token(grid.probs.row(grid.completion_row(pos)), temperature, rng,
                           allowed);
    next.completion[pos] = tok;
    if (record) {
      record->positions.push_back(pos);
      record->tokens.push_back(tok);
    }
  }
  if (record) record->grid = std::move(grid);
  return next;
}

SequenceState generate(const PolicyModel& model, const std::vector<int>& prompt,
                       int completion_len, int n_steps, int block_len,
                       double temperature, std::mt19937_64& rng,
                       const std::vector<int>* allowed) {
  if (n_steps <= 0 || completion_len % n_steps != 0)
    throw ConfigError("generate: denoise step count must divide completion length");
  if (block_len <= 0 || completion_len % block_len != 0)
    throw ConfigError("generate: block length must divide completion length");
  const int per_step = completion_len / n_steps;
  if (block_len % per_step != 0)
    throw ConfigError("generate: tokens per step must divide the block length");

  SequenceState state = make_masked_state(prompt, completion_len, block_len);
  for (int step = 0; step < n_steps; ++step)
    state = denoise_step(model, state, per_step, temperature, rng, allowed);
  return state;
}

}  // namespace treerpo
