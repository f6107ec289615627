// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "treerpo/model.hpp"
#include "treerpo/tree.hpp"
#include "treerpo/types.hpp"

namespace treerpo {

// Time schedules: temperature tau(t) = tau_max * (1 - t/T)^sched_beta shrinks
// toward zero while the self-distillation weight
// lambda(t) = lambda_max * (e^(gamma t/T) - 1)/(e^gamma - 1) grows toward
// lambda_max. `reverse` runs both schedules backwards (t -> T - t).
struct ScheduleConfig {
  double tau_max = 2.0;
  double sched_beta = 0.7;  // exponent of the temperature decay
  double lambda_max = 3e-3;
  double gamma = 3.0;       // growth rate of the distillation weight
  long total_steps = 1;     // T
  bool reverse = false;

  void validate() const;
};

double tau_schedule(double t, const ScheduleConfig& cfg);
double lambda_schedule(double t, const ScheduleConfig& cfg);

// One sibling group: the parent state, the slot set every child decoded, and
// per-child tokens, cached old-policy probabilities, and advantage.
struct ChildSample {
  std::vector<int> tokens;
  std::vector<double> old_probs;
  double advantage = 0.0;
};

struct ParentGroup {
  SequenceState parent_state;
  std::vector<int> decoded_positions;
  std::vector<ChildSample> children;

  int k() const { return static_cast<int>(decoded_positions.size()); }
  bool has_nonzero_advantage() const;
  void validate() const;
};

ParentGroup group_from_tree(const RolloutTree& tree, int parent_id);

// Advantage-weighted coefficients over the positive-advantage children:
// softmax(A/tau); tau = 0 puts all mass on the max advantage (ties split
// equally). Returns one weight per child (zero outside C+); an empty vector
// signals that the group has no positive-advantage child and is skipped.
std::vector<double> positive_group_weights(const ParentGroup& group, double tau);

// Mirror construction over the negative-advantage children, weighted by |A|.
std::vector<double> negative_group_weights(const ParentGroup& group, double tau);

// Per decoded slot, the weighted vote over sibling tokens.
struct TargetDistribution {
  std::vector<int> positions;
  Matrix per_position;  // k x V, rows sum to 1
};

TargetDistribution target_distribution(const ParentGroup& group,
                                       const std::vector<double>& weights,
                                       int vocab_size);

enum class LossMode { Full, NoDistill, Diversity };

struct LossBreakdown {
  double pg_term = 0.0;       // signed clipped surrogate (to be maximized)
  double kl_term = 0.0;       // mean positionwise KL(pi_theta || pi_ref)
  double distill_term = 0.0;  // schedule-weighted third term of the mode
  double total = 0.0;         // -pg_term + beta_kl * kl_term + distill_term
  int skipped_distill = 0;    // 1 when the mode's child set was empty
  int log_floor_hits = 0;
};

// Clipped-ratio surrogate, mean over children and decoded slots.
double policy_gradient_loss(const ParentGroup& group, const PolicyModel& model,
                            double clip_eps);

// lambda * mean over slots of KL(P_target || pi_theta); 0 when C+ is empty.
double distillation_loss(const ParentGroup& group, const PolicyModel& model,
                         double lambda_t, double tau_t);

// -lambda * mean over slots of KL(P_div_target || pi_theta); 0 when C- empty.
double diversity_loss(const ParentGroup& group, const PolicyModel& model,
                      double lambda_t, double tau_t);

LossBreakdown total_loss(const ParentGroup& group, const PolicyModel& model,
                         const PolicyModel& model_ref, double t,
                         const ScheduleConfig& sched, double clip_eps, double beta_kl,
                         LossMode mode);

// Tape-recorded total loss for gradient steps. `ref_log_rows` holds the
// reference policy's log-probabilities at the k decoded slots (k x V).
struct GroupLossNodes {
  NodeId loss = -1;
  LossBreakdown breakdown;
};

GroupLossNodes total_loss_on_tape(Tape& tape, const ModelNodes& nodes,
                                  const PolicyModel& model, const Matrix& ref_log_rows,
                                  const ParentGroup& group, double t,
                                  const ScheduleConfig& sched, double clip_eps,
                                  double beta_kl, LossMode mode);

// Reference log-probabilities at the group's decoded slots.
Matrix reference_log_rows(const PolicyModel& model_ref, const ParentGroup& group);

}  // namespace treerpo
