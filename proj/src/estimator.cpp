// SPDX-License-Identifier: Apache-2.0
#include "treerpo/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "treerpo/rng.hpp"

namespace treerpo {

const char* OrderDistribution::name() const {
  switch (kind) {
    case Kind::UniformOrders: return "uniform";
    case Kind::GreedyConfidence: return "greedy";
    case Kind::SoftmaxConfidence: return "softmax";
  }
  return "?";
}

namespace {

long factorial(int k) {
  long f = 1;
  for (int i = 2; i <= k; ++i) f *= i;
  return f;
}

void check_probe(const SequenceState& parent, const std::vector<int>& positions,
                 const std::vector<int>& tokens) {
  if (positions.empty() || positions.size() != tokens.size())
    throw InvalidCallError("estimator probe needs matching non-empty positions/tokens");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    int pos = positions[i];
    if (pos < 0 || pos >= parent.completion_len())
      throw InvalidCallError("probe position out of range");
    if (parent.is_decoded(pos))
      throw ContractError("probe position is already decoded in the parent state");
    for (std::size_t j = i + 1; j < positions.size(); ++j)
      if (positions[j] == pos) throw InvalidCallError("duplicate probe position");
  }
}

void check_cap(int k) {
  if (k > kEnumerationCap)
    throw InvalidCallError(
        "exhaustive enumeration refused: k=" + std::to_string(k) + " needs about " +
        std::to_string(factorial(k) * k) + " forward passes (cap k<=" +
        std::to_string(kEnumerationCap) + ")");
}

// Shares forward passes across orders: the context of any enumeration step is
// the parent plus a subset of revealed probe tokens, keyed by bitmask.
class EnumWorkspace {
 public:
  EnumWorkspace(const ForwardFn& fwd, const SequenceState& parent,
                const std::vector<int>& positions, const std::vector<int>& tokens)
      : fwd_(fwd), parent_(parent), positions_(positions), tokens_(tokens) {}

  int k() const { return static_cast<int>(positions_.size()); }

  const DistributionGrid& grid(std::uint32_t mask) {
    auto it = grids_.find(mask);
    if (it != grids_.end()) return it->second;
    SequenceState ctx = parent_;
    for (int i = 0; i < k(); ++i)
      if (mask & (1u << i)) ctx.completion[positions_[i]] = tokens_[i];
    return grids_.emplace(mask, fwd_(ctx)).first->second;
  }

  // probability of tokens_[i] at positions_[i] given the revealed subset
  double prob(std::uint32_t mask, int i) {
    const DistributionGrid& g = grid(mask);
    return g.probs(g.completion_row(positions_[i]), tokens_[i]);
  }

  // row-max confidence of positions_[i] given the revealed subset
  double confidence(std::uint32_t mask, int i) {
    const DistributionGrid& g = grid(mask);
    return g.probs.row(g.completion_row(positions_[i])).maxCoeff();
  }

 private:
  const ForwardFn& fwd_;
  const SequenceState& parent_;
  const std::vector<int>& positions_;
  const std::vector<int>& tokens_;
  std::unordered_map<std::uint32_t, DistributionGrid> grids_;
};

// Greedy confidence order: repeatedly reveal the remaining probe index with
// the highest row confidence at the current context; ties by lowest position.
std::vector<int> greedy_order(EnumWorkspace& ws) {
  const int k = ws.k();
  std::vector<int> order;
  std::uint32_t mask = 0;
  for (int step = 0; step < k; ++step) {
    int best = -1;
    double best_conf = -1.0;
    for (int i = 0; i < k; ++i) {
      if (mask & (1u << i)) continue;
      double c = ws.confidence(mask, i);
      if (c > best_conf) {
        best_conf = c;
        best = i;
      }
    }
    order.push_back(best);
    mask |= (1u << best);
  }
  return order;
}

double order_weight(EnumWorkspace& ws, const OrderDistribution& q,
                    const std::vector<int>& order, const std::vector<int>& greedy) {
  switch (q.kind) {
    case OrderDistribution::Kind::UniformOrders:
      return 1.0 / static_cast<double>(factorial(ws.k()));
    case OrderDistribution::Kind::GreedyConfidence:
      return order == greedy ? 1.0 : 0.0;
    case OrderDistribution::Kind::SoftmaxConfidence: {
      double w = 1.0;
      std::uint32_t mask = 0;
      for (int t = 0; t < ws.k(); ++t) {
        double num = 0.0, den = 0.0;
        // softmax over the confidences of the still-masked probe positions
        double mx = -1.0;
        for (int i = 0; i < ws.k(); ++i)
          if (!(mask & (1u << i))) mx = std::max(mx, ws.confidence(mask, i));
        for (int i = 0; i < ws.k(); ++i) {
          if (mask & (1u << i)) continue;
          double e = std::exp((ws.confidence(mask, i) - mx) / q.temperature);
          den += e;
          if (i == order[t]) num = e;
        }
        w *= num / den;
        mask |= (1u << order[t]);
      }
      return w;
    }
  }
  return 0.0;
}

struct Enumeration {
  double p_exact = 0.0;
  double q_total = 0.0;      // enumerated order weights; must sum to 1
  double min_path_prob = 1.0;  // over every order and step
};

Enumeration enumerate_orders(EnumWorkspace& ws, const OrderDistribution& q) {
  const int k = ws.k();
  check_cap(k);
  std::vector<int> greedy;
  if (q.kind == OrderDistribution::Kind::GreedyConfidence) greedy = greedy_order(ws);

  Enumeration e;
  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  do {
    double w = order_weight(ws, q, order, greedy);
    double prod = 1.0;
    std::uint32_t mask = 0;
    for (int t = 0; t < k; ++t) {
      double p = ws.prob(mask, order[t]);
      e.min_path_prob = std::min(e.min_path_prob, p);
      prod *= p;
      mask |= (1u << order[t]);
    }
    e.p_exact += w * prod;
    e.q_total += w;
  } while (std::next_permutation(order.begin(), order.end()));
  return e;
}

}  // namespace

double single_pass_log_prob(const ForwardFn& fwd, const SequenceState& parent,
                            const std::vector<int>& positions,
                            const std::vector<int>& tokens) {
  check_probe(parent, positions, tokens);
  DistributionGrid grid = fwd(parent);
  double lp = 0.0;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    double p = grid.probs(grid.completion_row(positions[i]), tokens[i]);
    lp += std::log(std::max(p, Tape::kLogFloor));
  }
  return std::min(lp, 0.0);
}

double exact_transition_prob(const ForwardFn& fwd, const SequenceState& parent,
                             const std::vector<int>& positions,
                             const std::vector<int>& tokens,
                             const OrderDistribution& q) {
  check_probe(parent, positions, tokens);
  EnumWorkspace ws(fwd, parent, positions, tokens);
  return enumerate_orders(ws, q).p_exact;
}

ConfidenceGap confidence_gap(const ForwardFn& fwd, const SequenceState& parent,
                             const std::vector<int>& positions,
                             const std::vector<int>& tokens) {
  check_probe(parent, positions, tokens);
  EnumWorkspace ws(fwd, parent, positions, tokens);
  const int k = ws.k();
  check_cap(k);
  ConfidenceGap g;
  double min_parent = 1.0;
  for (int i = 0; i < k; ++i) min_parent = std::min(min_parent, ws.prob(0, i));
  g.eps_parent = 1.0 - min_parent;
  // eps_path sups over every (revealed subset, next position) pair, which is
  // exactly the set of (order, step) contexts across all of Omega
  double min_path = 1.0;
  for (std::uint32_t mask = 0; mask < (1u << k); ++mask)
    for (int i = 0; i < k; ++i)
      if (!(mask & (1u << i))) min_path = std::min(min_path, ws.prob(mask, i));
  g.eps_path = 1.0 - min_path;
  g.eps = std::max(g.eps_parent, g.eps_path);
  return g;
}

BoundReport check_bounds(const ForwardFn& fwd, const SequenceState& parent,
                         const std::vector<int>& positions,
                         const std::vector<int>& tokens, const OrderDistribution& q) {
  check_probe(parent, positions, tokens);
  EnumWorkspace ws(fwd, parent, positions, tokens);
  const int k = ws.k();
  check_cap(k);

  BoundReport r;
  r.k = k;

  double logp_hat = 0.0;
  double min_parent = 1.0;
  for (int i = 0; i < k; ++i) {
    double p = ws.prob(0, i);
    min_parent = std::min(min_parent, p);
    logp_hat += std::log(std::max(p, Tape::kLogFloor));
  }
  r.p_hat = std::exp(logp_hat);

  Enumeration e = enumerate_orders(ws, q);
  r.p_exact = e.p_exact;
  r.eps_parent = 1.0 - min_parent;
  r.eps_path = 1.0 - e.min_path_prob;
  r.eps = std::max(r.eps_parent, r.eps_path);

  if (r.eps >= 1.0) {
    // a zero-probability step: the ratio analysis degenerates
    r.degenerate = true;
    r.eps = 1.0;
    return r;
  }

  r.log_ratio = std::log(r.p_exact) - logp_hat;
  r.ratio = std::exp(r.log_ratio);
  r.lower_bound = std::pow(1.0 - r.eps, k);
  r.upper_bound = std::exp(k * r.eps / (1.0 - r.eps));

  // slack absorbs round-off only; a genuine violation is an implementation bug
  const double tol = 1e-9;
  bool lower_ok = r.ratio >= r.lower_bound * (1.0 - tol) - tol;
  bool upper_ok = r.ratio <= r.upper_bound * (1.0 + tol) + tol;
  r.holds = lower_ok && upper_ok;
  if (!lower_ok) r.violation = "ratio below (1-eps)^k";
  if (!upper_ok) r.violation = "ratio above exp(k*eps/(1-eps))";
  return r;
}

double single_pass_log_prob(const PolicyModel& model, const SequenceState& parent,
                            const std::vector<int>& positions,
                            const std::vector<int>& tokens) {
  return single_pass_log_prob(make_forward(model), parent, positions, tokens);
}

double exact_transition_prob(const PolicyModel& model, const SequenceState& parent,
                             const std::vector<int>& positions,
                             const std::vector<int>& tokens, const OrderDistribution& q) {
  return exact_transition_prob(make_forward(model), parent, positions, tokens, q);
}

ConfidenceGap confidence_gap(const PolicyModel& model, const SequenceState& parent,
                             const std::vector<int>& positions,
                             const std::vector<int>& tokens) {
  return confidence_gap(make_forward(model), parent, positions, tokens);
}

BoundReport check_bounds(const PolicyModel& model, const SequenceState& parent,
                         const std::vector<int>& positions,
                         const std::vector<int>& tokens, const OrderDistribution& q) {
  return check_bounds(make_forward(model), parent, positions, tokens, q);
}

EstimatorInstance make_random_instance(const PolicyModel& model, int k,
                                       std::mt19937_64& rng, bool greedy_tokens) {
  const int V = model.config.vocab_size;
  const int L = std::min(model.config.max_seq_len - 2, std::max(k + 2, 4));
  EstimatorInstance inst;

  auto non_mask = [&](int t) { return t == model.vocab.mask_id ? (t + 1) % V : t; };
  std::vector<int> prompt{non_mask(uniform_int(rng, V)), non_mask(uniform_int(rng, V))};
  inst.parent = make_masked_state(prompt, L, L);

  // decode a few background slots so probe contexts vary
  int background = uniform_int(rng, std::max(1, L - k));
  std::vector<int> slots(L);
  std::iota(slots.begin(), slots.end(), 0);
  for (int i = L - 1; i > 0; --i) std::swap(slots[i], slots[uniform_int(rng, i + 1)]);
  for (int i = 0; i < background; ++i)
    inst.parent.completion[slots[i]] = non_mask(uniform_int(rng, V));
  inst.positions.assign(slots.begin() + background, slots.begin() + background + k);
  std::sort(inst.positions.begin(), inst.positions.end());

  DistributionGrid grid = forward(model, inst.parent);
  for (int pos : inst.positions) {
    RowVector row = grid.probs.row(grid.completion_row(pos));
    if (greedy_tokens) {
      Eigen::Index best;
      row.maxCoeff(&best);
      inst.tokens.push_back(static_cast<int>(best));
    } else {
      double u = uniform01(rng), cum = 0.0;
      int pick = V - 1;
      for (int v = 0; v < V; ++v) {
        cum += row(v);
        if (u < cum) {
          pick = v;
          break;
        }
      }
      inst.tokens.push_back(pick);
    }
  }
  return inst;
}

std::vector<SweepRow> sharpening_sweep(const PolicyModel& model,
                                       const std::vector<EstimatorInstance>& instances,
                                       const std::vector<double>& temperatures,
                                       const OrderDistribution& q) {
  for (std::size_t i = 1; i < temperatures.size(); ++i)
    if (!(temperatures[i] < temperatures[i - 1]))
      throw InvalidCallError("sharpening_sweep temperatures must be strictly descending");

  std::vector<SweepRow> rows;
  for (double temp : temperatures) {
    PolicyModel sharpened = model;
    sharpened.config.logit_temperature = temp;
    SweepRow row;
    row.temperature = temp;
    for (const EstimatorInstance& inst : instances) {
      BoundReport rep =
          check_bounds(sharpened, inst.parent, inst.positions, inst.tokens, q);
      row.mean_abs_log_ratio += std::abs(rep.log_ratio);
      row.mean_eps += rep.eps;
    }
    row.mean_abs_log_ratio /= static_cast<double>(instances.size());
    row.mean_eps /= static_cast<double>(instances.size());
    rows.push_back(row);
  }
  return rows;
}

}  // namespace treerpo
