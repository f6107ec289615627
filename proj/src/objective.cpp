// SPDX-License-Identifier: Apache-2.0
#include "treerpo/objective.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace treerpo {

void ScheduleConfig::validate() const {
  if (tau_max <= 0.0) throw ConfigError("tau_max must be positive");
  if (sched_beta <= 0.0 || sched_beta > 1.0)
    throw ConfigError("sched_beta must lie in (0, 1]");
  if (lambda_max < 0.0) throw ConfigError("lambda_max must be non-negative");
  if (gamma <= 0.0) throw ConfigError("gamma must be positive");
  if (total_steps < 1) throw ConfigError("total_steps must be at least 1");
}

namespace {

double effective_t(double t, const ScheduleConfig& cfg) {
  double T = static_cast<double>(cfg.total_steps);
  if (t > T) {
    std::cerr << "warning: schedule time " << t << " clamped to T=" << T << "\n";
    t = T;
  }
  if (t < 0.0) t = 0.0;
  return cfg.reverse ? T - t : t;
}

}  // namespace

double tau_schedule(double t, const ScheduleConfig& cfg) {
  cfg.validate();
  double tt = effective_t(t, cfg);
  double T = static_cast<double>(cfg.total_steps);
  return cfg.tau_max * std::pow(1.0 - tt / T, cfg.sched_beta);
}

double lambda_schedule(double t, const ScheduleConfig& cfg) {
  cfg.validate();
  double tt = effective_t(t, cfg);
  double T = static_cast<double>(cfg.total_steps);
  return cfg.lambda_max * std::expm1(cfg.gamma * (tt / T)) / std::expm1(cfg.gamma);
}

bool ParentGroup::has_nonzero_advantage() const {
  for (const ChildSample& c : children)
    if (c.advantage != 0.0) return true;
  return false;
}

void ParentGroup::validate() const {
  if (children.empty()) throw InvalidCallError("parent group has no children");
  const int kk = k();
  if (kk == 0) throw InvalidCallError("parent group decodes no positions");
  for (int pos : decoded_positions) {
    if (pos < 0 || pos >= parent_state.completion_len())
      throw InvalidCallError("group position out of range");
    if (parent_state.is_decoded(pos))
      throw ContractError("group position already decoded in the parent state");
  }
  for (const ChildSample& c : children) {
    if (static_cast<int>(c.tokens.size()) != kk ||
        static_cast<int>(c.old_probs.size()) != kk)
      throw InvalidCallError("child sample size does not match decoded positions");
    for (double p : c.old_probs)
      if (!(p > 0.0 && p <= 1.0))
        throw ContractError("cached old-policy probability outside (0, 1]");
  }
}

ParentGroup group_from_tree(const RolloutTree& tree, int parent_id) {
  const TreeNode& parent = tree.nodes[parent_id];
  if (parent.is_leaf()) throw InvalidCallError("leaf node has no child group");
  ParentGroup g;
  g.parent_state = parent.state;
  g.decoded_positions = tree.nodes[parent.children[0]].decoded_positions;
  for (int c : parent.children) {
    const TreeNode& child = tree.nodes[c];
    if (!child.advantage.has_value())
      throw InvalidCallError("group_from_tree requires computed advantages");
    ChildSample s;
    s.tokens = child.decoded_tokens;
    s.old_probs = child.old_probs;
    s.advantage = *child.advantage;
    g.children.push_back(std::move(s));
  }
  return g;
}

std::vector<double> positive_group_weights(const ParentGroup& group, double tau) {
  std::vector<int> pos_idx;
  for (int i = 0; i < static_cast<int>(group.children.size()); ++i)
    if (group.children[i].advantage > 0.0) pos_idx.push_back(i);
  if (pos_idx.empty()) return {};

  std::vector<double> w(group.children.size(), 0.0);
  if (tau == 0.0) {
    double mx = group.children[pos_idx[0]].advantage;
    for (int i : pos_idx) mx = std::max(mx, group.children[i].advantage);
    int ties = 0;
    for (int i : pos_idx) ties += (group.children[i].advantage == mx);
    for (int i : pos_idx)
      if (group.children[i].advantage == mx) w[i] = 1.0 / static_cast<double>(ties);
    return w;
  }
  double mx = group.children[pos_idx[0]].advantage;
  for (int i : pos_idx) mx = std::max(mx, group.children[i].advantage);
  double sum = 0.0;
  for (int i : pos_idx) {
    w[i] = std::exp((group.children[i].advantage - mx) / tau);
    sum += w[i];
  }
  for (int i : pos_idx) w[i] /= sum;
  return w;
}

std::vector<double> negative_group_weights(const ParentGroup& group, double tau) {
  std::vector<int> neg_idx;
  for (int i = 0; i < static_cast<int>(group.children.size()); ++i)
    if (group.children[i].advantage < 0.0) neg_idx.push_back(i);
  if (neg_idx.empty()) return {};

  std::vector<double> w(group.children.size(), 0.0);
  auto mag = [&](int i) { return std::abs(group.children[i].advantage); };
  double mx = mag(neg_idx[0]);
  for (int i : neg_idx) mx = std::max(mx, mag(i));
  if (tau == 0.0) {
    int ties = 0;
    for (int i : neg_idx) ties += (mag(i) == mx);
    for (int i : neg_idx)
      if (mag(i) == mx) w[i] = 1.0 / static_cast<double>(ties);
    return w;
  }
  double sum = 0.0;
  for (int i : neg_idx) {
    w[i] = std::exp((mag(i) - mx) / tau);
    sum += w[i];
  }
  for (int i : neg_idx) w[i] /= sum;
  return w;
}

TargetDistribution target_distribution(const ParentGroup& group,
                                       const std::vector<double>& weights,
                                       int vocab_size) {
  if (weights.empty() || weights.size() != group.children.size())
    throw InvalidCallError("target_distribution requires one weight per child");
  TargetDistribution t;
  t.positions = group.decoded_positions;
  t.per_position = Matrix::Zero(group.k(), vocab_size);
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0) throw InvalidCallError("target_distribution weights sum to zero");
  for (std::size_t c = 0; c < weights.size(); ++c) {
    if (weights[c] == 0.0) continue;
    for (int i = 0; i < group.k(); ++i)
      t.per_position(i, group.children[c].tokens[i]) += weights[c];
  }
  t.per_position /= wsum;
  return t;
}

namespace {

struct ProbeNodes {
  NodeId grid = -1;
  NodeId probe_rows = -1;  // k x V
  NodeId log_rows = -1;    // k x V
};

ProbeNodes make_probe(Tape& tape, const ModelNodes& nodes, const PolicyModel& model,
                      const ParentGroup& group) {
  ProbeNodes p;
  p.grid = forward_on_tape(tape, model, nodes, group.parent_state);
  std::vector<int> rows;
  rows.reserve(group.k());
  const int P = group.parent_state.prompt_len();
  for (int pos : group.decoded_positions) rows.push_back(P + pos);
  p.probe_rows = tape.rows_gather(p.grid, rows);
  p.log_rows = tape.log(p.probe_rows);
  return p;
}

// mean over children and slots of min(r*A, clip(r, 1-eps, 1+eps)*A)
NodeId pg_node(Tape& tape, const ProbeNodes& probe, const ParentGroup& group,
               double clip_eps) {
  const int k = group.k();
  NodeId acc = -1;
  for (const ChildSample& child : group.children) {
    std::vector<int> rows(k), cols(k);
    Matrix inv_old(1, k);
    for (int i = 0; i < k; ++i) {
      rows[i] = i;
      cols[i] = child.tokens[i];
      if (child.old_probs[i] <= 0.0)
        throw ContractError("old-policy probability of zero in policy gradient loss");
      inv_old(0, i) = 1.0 / child.old_probs[i];
    }
    NodeId picks = tape.pick_entries(probe.probe_rows, rows, cols);
    NodeId ratios = tape.hadamard(picks, tape.constant(inv_old));
    NodeId unclipped = tape.scale(ratios, child.advantage);
    NodeId clipped = tape.scale(tape.clip(ratios, 1.0 - clip_eps, 1.0 + clip_eps),
                                child.advantage);
    NodeId term = tape.sum_all(tape.min2(unclipped, clipped));
    acc = acc < 0 ? term : tape.add(acc, term);
  }
  double denom = static_cast<double>(group.children.size()) * k;
  return tape.scale(acc, 1.0 / denom);
}

// mean over the k decoded slots of KL(pi_theta || pi_ref)
NodeId kl_node(Tape& tape, const ProbeNodes& probe, const Matrix& ref_log_rows) {
  NodeId diff = tape.sub(probe.log_rows, tape.constant(ref_log_rows));
  NodeId total = tape.sum_all(tape.hadamard(probe.probe_rows, diff));
  return tape.scale(total, 1.0 / static_cast<double>(ref_log_rows.rows()));
}

// lambda/k * sum_i KL(target_i || pi_theta_i); the target is constant, so the
// cross-entropy part is the only tape-dependent piece.
NodeId vote_kl_node(Tape& tape, const ProbeNodes& probe, const TargetDistribution& target,
                    double lambda_t) {
  double target_entropy_part = 0.0;  // sum_i sum_v T log T
  for (Eigen::Index i = 0; i < target.per_position.rows(); ++i)
    for (Eigen::Index v = 0; v < target.per_position.cols(); ++v) {
      double tv = target.per_position(i, v);
      if (tv > 0.0) target_entropy_part += tv * std::log(tv);
    }
  NodeId cross = tape.dot_const(probe.log_rows, target.per_position);
  NodeId kl_sum = tape.sub(tape.scalar_constant(target_entropy_part), cross);
  return tape.scale(kl_sum, lambda_t / static_cast<double>(target.per_position.rows()));
}

}  // namespace

GroupLossNodes total_loss_on_tape(Tape& tape, const ModelNodes& nodes,
                                  const PolicyModel& model, const Matrix& ref_log_rows,
                                  const ParentGroup& group, double t,
                                  const ScheduleConfig& sched, double clip_eps,
                                  double beta_kl, LossMode mode) {
  group.validate();
  const double lambda_t = lambda_schedule(t, sched);
  const double tau_t = tau_schedule(t, sched);

  ProbeNodes probe = make_probe(tape, nodes, model, group);

  GroupLossNodes out;
  NodeId pg = pg_node(tape, probe, group, clip_eps);
  NodeId kl = kl_node(tape, probe, ref_log_rows);
  NodeId loss = tape.add(tape.scale(pg, -1.0), tape.scale(kl, beta_kl));

  NodeId third = -1;
  if (mode == LossMode::Full) {
    std::vector<double> w = positive_group_weights(group, tau_t);
    if (w.empty()) {
      out.breakdown.skipped_distill = 1;
    } else {
      TargetDistribution target =
          target_distribution(group, w, model.config.vocab_size);
      third = vote_kl_node(tape, probe, target, lambda_t);
    }
  } else if (mode == LossMode::Diversity) {
    std::vector<double> w = negative_group_weights(group, tau_t);
    if (w.empty()) {
      out.breakdown.skipped_distill = 1;
    } else {
      TargetDistribution target =
          target_distribution(group, w, model.config.vocab_size);
      third = tape.scale(vote_kl_node(tape, probe, target, lambda_t), -1.0);
    }
  }
  if (third >= 0) loss = tape.add(loss, third);

  out.loss = loss;
  out.breakdown.pg_term = tape.scalar(pg);
  out.breakdown.kl_term = tape.scalar(kl);
  out.breakdown.distill_term = third >= 0 ? tape.scalar(third) : 0.0;
  out.breakdown.total = tape.scalar(loss);
  out.breakdown.log_floor_hits = tape.log_floor_hits();
  for (double v : {out.breakdown.pg_term, out.breakdown.kl_term,
                   out.breakdown.distill_term, out.breakdown.total})
    if (!std::isfinite(v)) throw NumericError("non-finite loss component");
  return out;
}

Matrix reference_log_rows(const PolicyModel& model_ref, const ParentGroup& group) {
  DistributionGrid ref = forward(model_ref, group.parent_state);
  Matrix out(group.k(), model_ref.config.vocab_size);
  for (int i = 0; i < group.k(); ++i) {
    Eigen::Index r = ref.completion_row(group.decoded_positions[i]);
    for (Eigen::Index v = 0; v < out.cols(); ++v)
      out(i, v) = std::log(std::max(ref.probs(r, v), Tape::kLogFloor));
  }
  return out;
}

namespace {

// Runs the tape composition without gradients and returns the breakdown.
LossBreakdown eval_breakdown(const ParentGroup& group, const PolicyModel& model,
                             const Matrix& ref_log_rows, double t,
                             const ScheduleConfig& sched, double clip_eps,
                             double beta_kl, LossMode mode) {
  Tape tape;
  ModelNodes nodes;
  for (const auto& [name, value] : model.params)
    nodes.params[name] = tape.leaf(value, false, "param");
  return total_loss_on_tape(tape, nodes, model, ref_log_rows, group, t, sched, clip_eps,
                            beta_kl, mode)
      .breakdown;
}

}  // namespace

double policy_gradient_loss(const ParentGroup& group, const PolicyModel& model,
                            double clip_eps) {
  group.validate();
  if (!group.has_nonzero_advantage())
    throw InvalidCallError("policy_gradient_loss on a zero-advantage group");
  Tape tape;
  ModelNodes nodes;
  for (const auto& [name, value] : model.params)
    nodes.params[name] = tape.leaf(value, false, "param");
  ProbeNodes probe = make_probe(tape, nodes, model, group);
  return tape.scalar(pg_node(tape, probe, group, clip_eps));
}

double distillation_loss(const ParentGroup& group, const PolicyModel& model,
                         double lambda_t, double tau_t) {
  group.validate();
  std::vector<double> w = positive_group_weights(group, tau_t);
  if (w.empty()) return 0.0;
  TargetDistribution target = target_distribution(group, w, model.config.vocab_size);
  Tape tape;
  ModelNodes nodes;
  for (const auto& [name, value] : model.params)
    nodes.params[name] = tape.leaf(value, false, "param");
  ProbeNodes probe = make_probe(tape, nodes, model, group);
  return tape.scalar(vote_kl_node(tape, probe, target, lambda_t));
}

double diversity_loss(const ParentGroup& group, const PolicyModel& model,
                      double lambda_t, double tau_t) {
  group.validate();
  std::vector<double> w = negative_group_weights(group, tau_t);
  if (w.empty()) return 0.0;
  TargetDistribution target = target_distribution(group, w, model.config.vocab_size);
  Tape tape;
  ModelNodes nodes;
  for (const auto& [name, value] : model.params)
    nodes.params[name] = tape.leaf(value, false, "param");
  ProbeNodes probe = make_probe(tape, nodes, model, group);
  return -tape.scalar(vote_kl_node(tape, probe, target, lambda_t));
}

LossBreakdown total_loss(const ParentGroup& group, const PolicyModel& model,
                         const PolicyModel& model_ref, double t,
                         const ScheduleConfig& sched, double clip_eps, double beta_kl,
                         LossMode mode) {
  Matrix ref_rows = reference_log_rows(model_ref, group);
  return eval_breakdown(group, model, ref_rows, t, sched, clip_eps, beta_kl, mode);
}

}  // namespace treerpo
