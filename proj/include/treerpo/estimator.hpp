// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "treerpo/model.hpp"
#include "treerpo/types.hpp"

namespace treerpo {

// Distribution over the k! token-revelation orders of one tree step.
//   UniformOrders      1/k! each
//   GreedyConfidence   point mass on the confidence-sorted order (ties by
//                      lowest position index)
//   SoftmaxConfidence  next position sampled proportional to
//                      exp(confidence / temperature) at the current context
struct OrderDistribution {
  enum class Kind { UniformOrders, GreedyConfidence, SoftmaxConfidence };
  Kind kind = Kind::UniformOrders;
  double temperature = 1.0;

  static OrderDistribution uniform() { return {Kind::UniformOrders, 1.0}; }
  static OrderDistribution greedy() { return {Kind::GreedyConfidence, 1.0}; }
  static OrderDistribution softmax(double temperature) {
    return {Kind::SoftmaxConfidence, temperature};
  }
  const char* name() const;
};

// Exhaustive enumeration beyond this k is refused (cost grows as k! * k).
inline constexpr int kEnumerationCap = 7;

struct BoundReport {
  int k = 0;
  double p_exact = 0.0;   // order-marginalized transition probability
  double p_hat = 0.0;     // single-forward-pass estimate
  double log_ratio = 0.0; // log(p_exact / p_hat)
  double ratio = 0.0;
  double eps_parent = 0.0;
  double eps_path = 0.0;
  double eps = 0.0;
  double lower_bound = 0.0;  // (1 - eps)^k
  double upper_bound = 0.0;  // exp(k * eps / (1 - eps))
  bool holds = false;
  bool degenerate = false;   // eps reached 1 (a zero-probability step)
  std::string violation;     // which side failed, when !holds
};

struct ConfidenceGap {
  double eps_parent = 0.0;
  double eps_path = 0.0;
  double eps = 0.0;
};

// Sum of parent-state log-probabilities at the decoded tokens, from a single
// forward pass on the parent. `positions` index completion slots and must be
// masked in the parent.
double single_pass_log_prob(const ForwardFn& fwd, const SequenceState& parent,
                            const std::vector<int>& positions,
                            const std::vector<int>& tokens);

// Order-marginalized transition probability: sum over all k! revelation
// orders of Q(order) times the product of stepwise probabilities, each step
// conditioning on the parent plus the tokens revealed so far (one token per
// enumerated step). Forward passes are shared across orders through a
// revealed-subset cache.
double exact_transition_prob(const ForwardFn& fwd, const SequenceState& parent,
                             const std::vector<int>& positions,
                             const std::vector<int>& tokens,
                             const OrderDistribution& q);

// Confidence gap: eps_parent over the parent-state rows, eps_path as the sup
// of (1 - q) over every order and step, eps as their max.
ConfidenceGap confidence_gap(const ForwardFn& fwd, const SequenceState& parent,
                             const std::vector<int>& positions,
                             const std::vector<int>& tokens);

// Certifies (1-eps)^k <= P/P_hat <= exp(k*eps/(1-eps)) on one instance.
BoundReport check_bounds(const ForwardFn& fwd, const SequenceState& parent,
                         const std::vector<int>& positions,
                         const std::vector<int>& tokens, const OrderDistribution& q);

// PolicyModel conveniences.
double single_pass_log_prob(const PolicyModel& model, const SequenceState& parent,
                            const std::vector<int>& positions,
                            const std::vector<int>& tokens);
double exact_transition_prob(const PolicyModel& model, const SequenceState& parent,
                             const std::vector<int>& positions,
                             const std::vector<int>& tokens, const OrderDistribution& q);
ConfidenceGap confidence_gap(const PolicyModel& model, const SequenceState& parent,
                             const std::vector<int>& positions,
                             const std::vector<int>& tokens);
BoundReport check_bounds(const PolicyModel& model, const SequenceState& parent,
                         const std::vector<int>& positions,
                         const std::vector<int>& tokens, const OrderDistribution& q);

// One (parent, positions, tokens) probe for estimation-error studies.
struct EstimatorInstance {
  SequenceState parent;
  std::vector<int> positions;
  std::vector<int> tokens;
};

// Random parent with k masked probe positions. greedy_tokens picks each probe
// token as the parent-row argmax; otherwise tokens are sampled from the rows.
EstimatorInstance make_random_instance(const PolicyModel& model, int k,
                                       std::mt19937_64& rng, bool greedy_tokens = false);

struct SweepRow {
  double temperature = 0.0;
  double mean_abs_log_ratio = 0.0;
  double mean_eps = 0.0;
};

// Sharpens the model (logits divided by each temperature, descending) and
// recomputes the error and confidence-gap statistics over the instance set.
std::vector<SweepRow> sharpening_sweep(const PolicyModel& model,
                                       const std::vector<EstimatorInstance>& instances,
                                       const std::vector<double>& temperatures,
                                       const OrderDistribution& q =
                                           OrderDistribution::uniform());

}  // namespace treerpo
