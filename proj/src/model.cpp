// SPDX-License-Identifier: Apache-2.0
#include "treerpo/model.hpp"

#include <cmath>
#include <limits>

#include "treerpo/rng.hpp"

namespace treerpo {

void ModelConfig::validate() const {
  if (vocab_size < 3) throw ConfigError("vocab_size must be at least 3");
  if (embed_dim <= 0 || n_layers < 0 || hidden_dim <= 0 || max_seq_len <= 0)
    throw ConfigError("model dimensions must be positive");
  if (n_heads <= 0 || embed_dim % n_heads != 0)
    throw ConfigError("n_heads must divide embed_dim");
  if (logit_temperature <= 0.0) throw ConfigError("logit_temperature must be positive");
}

namespace {

Matrix uniform_init(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols,
                    double bound) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = uniform_in(rng, -bound, bound);
  return m;
}

std::string layer_key(int l, const char* name) {
  return "layers." + std::to_string(l) + "." + name;
}

}  // namespace

PolicyModel init_model(const ModelConfig& config, Vocabulary vocab, std::uint64_t seed) {
  config.validate();
  vocab.validate();
  if (vocab.size() != config.vocab_size)
    throw ConfigError("vocab size does not match model config");

  PolicyModel m;
  m.config = config;
  m.vocab = std::move(vocab);

  auto rng = make_stream(seed, {0x10de1});
  const int D = config.embed_dim, F = config.hidden_dim;
  const double emb_bound = config.init_scale / std::sqrt(static_cast<double>(D));
  const double proj_bound = config.init_scale / std::sqrt(static_cast<double>(D));
  const double mlp_bound = config.init_scale / std::sqrt(static_cast<double>(F));

  m.params["tok_emb"] = uniform_init(rng, config.vocab_size, D, emb_bound);
  m.params["pos_emb"] = uniform_init(rng, config.max_seq_len, D, emb_bound);
  for (int l = 0; l < config.n_layers; ++l) {
    m.params[layer_key(l, "wq")] = uniform_init(rng, D, D, proj_bound);
    m.params[layer_key(l, "wk")] = uniform_init(rng, D, D, proj_bound);
    m.params[layer_key(l, "wv")] = uniform_init(rng, D, D, proj_bound);
    m.params[layer_key(l, "wo")] = uniform_init(rng, D, D, proj_bound);
    m.params[layer_key(l, "bq")] = Matrix::Zero(1, D);
    m.params[layer_key(l, "bk")] = Matrix::Zero(1, D);
    m.params[layer_key(l, "bv")] = Matrix::Zero(1, D);
    m.params[layer_key(l, "bo")] = Matrix::Zero(1, D);
    m.params[layer_key(l, "ln1_g")] = Matrix::Ones(1, D);
    m.params[layer_key(l, "ln1_b")] = Matrix::Zero(1, D);
    m.params[layer_key(l, "ln2_g")] = Matrix::Ones(1, D);
    m.params[layer_key(l, "ln2_b")] = Matrix::Zero(1, D);
    m.params[layer_key(l, "w1")] = uniform_init(rng, D, F, proj_bound);
    m.params[layer_key(l, "b1")] = Matrix::Zero(1, F);
    m.params[layer_key(l, "w2")] = uniform_init(rng, F, D, mlp_bound);
    m.params[layer_key(l, "b2")] = Matrix::Zero(1, D);
  }
  m.params["lnf_g"] = Matrix::Ones(1, D);
  m.params["lnf_b"] = Matrix::Zero(1, D);
  Matrix gain(1, 1);
  gain(0, 0) = config.head_gain_init;
  m.params["head_gain"] = gain;
  return m;
}

ModelNodes register_params(Tape& tape, const PolicyModel& model) {
  ModelNodes nodes;
  for (const auto& [name, value] : model.params)
    nodes.params[name] = tape.leaf(value, /*requires_grad=*/true, "param");
  return nodes;
}

NodeId forward_on_tape(Tape& tape, const PolicyModel& model, const ModelNodes& nodes,
                       const SequenceState& state) {
  const ModelConfig& cfg = model.config;
  const int n = state.seq_len();
  if (n > cfg.max_seq_len)
    throw ConfigError("sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  std::vector<int> tokens = state.to_tokens(model.vocab.mask_id);
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size) throw ConfigError("token id out of vocabulary range");
  ++model.forward_calls;

  auto p = [&](const std::string& key) { return nodes.params.at(key); };

  std::vector<int> positions(n);
  for (int i = 0; i < n; ++i) positions[i] = i;

  NodeId x = tape.add(tape.rows_gather(p("tok_emb"), tokens),
                      tape.rows_gather(p("pos_emb"), positions));

  const int nh = cfg.n_heads, dh = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg.n_layers; ++l) {
    NodeId xn = tape.layer_norm_rows(x, p(layer_key(l, "ln1_g")), p(layer_key(l, "ln1_b")));
    NodeId q = tape.add_rowvec(tape.matmul(xn, p(layer_key(l, "wq"))), p(layer_key(l, "bq")));
    NodeId k = tape.add_rowvec(tape.matmul(xn, p(layer_key(l, "wk"))), p(layer_key(l, "bk")));
    NodeId v = tape.add_rowvec(tape.matmul(xn, p(layer_key(l, "wv"))), p(layer_key(l, "bv")));
    std::vector<NodeId> heads;
    heads.reserve(nh);
    for (int h = 0; h < nh; ++h) {
      NodeId qh = tape.slice_cols(q, h * dh, dh);
      NodeId kh = tape.slice_cols(k, h * dh, dh);
      NodeId vh = tape.slice_cols(v, h * dh, dh);
      NodeId att = tape.softmax_rows(tape.scale(tape.matmul_nt(qh, kh), att_scale));
      heads.push_back(tape.matmul(att, vh));
    }
    NodeId o = tape.add_rowvec(
        tape.matmul(nh == 1 ? heads[0] : tape.concat_cols(heads), p(layer_key(l, "wo"))),
        p(layer_key(l, "bo")));
    x = tape.add(x, o);
    NodeId xn2 = tape.layer_norm_rows(x, p(layer_key(l, "ln2_g")), p(layer_key(l, "ln2_b")));
    NodeId hdn = tape.tanh(
        tape.add_rowvec(tape.matmul(xn2, p(layer_key(l, "w1"))), p(layer_key(l, "b1"))));
    NodeId mlp = tape.add_rowvec(tape.matmul(hdn, p(layer_key(l, "w2"))), p(layer_key(l, "b2")));
    x = tape.add(x, mlp);
  }

  NodeId xf = tape.layer_norm_rows(x, p("lnf_g"), p("lnf_b"));
  NodeId logits = tape.mul_scalar_node(tape.matmul_nt(xf, p("tok_emb")), p("head_gain"));
  if (cfg.logit_temperature != 1.0)
    logits = tape.scale(logits, 1.0 / cfg.logit_temperature);
  return tape.softmax_rows(logits);
}

DistributionGrid forward(const PolicyModel& model, const SequenceState& state) {
  Tape tape;
  ModelNodes nodes;
  // no gradients needed: register parameters as constants
  for (const auto& [name, value] : model.params)
    nodes.params[name] = tape.leaf(value, /*requires_grad=*/false, "param");
  NodeId grid = forward_on_tape(tape, model, nodes, state);
  DistributionGrid out;
  out.probs = tape.value(grid);
  out.prompt_len = state.prompt_len();
  return out;
}

double masked_entropy(const DistributionGrid& grid, const std::vector<int>& rows) {
  if (rows.empty()) throw InvalidCallError("masked_entropy requires at least one position");
  double total = 0.0;
  for (int r : rows) {
    if (r < 0 || r >= grid.rows()) throw InvalidCallError("masked_entropy row out of range");
    for (Eigen::Index v = 0; v < grid.vocab_size(); ++v) {
      double p = grid.probs(r, v);
      if (p > 0.0) total -= p * std::log(p);
    }
  }
  return total / static_cast<double>(rows.size());
}

double positionwise_kl(const DistributionGrid& a, const DistributionGrid& b,
                       const std::vector<int>& rows) {
  if (a.rows() != b.rows() || a.vocab_size() != b.vocab_size())
    throw InvalidCallError("positionwise_kl grids are not congruent");
  if (rows.empty()) throw InvalidCallError("positionwise_kl requires at least one position");
  double total = 0.0;
  for (int r : rows) {
    if (r < 0 || r >= a.rows()) throw InvalidCallError("positionwise_kl row out of range");
    for (Eigen::Index v = 0; v < a.vocab_size(); ++v) {
      double pa = a.probs(r, v);
      if (pa <= 0.0) continue;
      double pb = b.probs(r, v);
      if (pb <= 0.0) return std::numeric_limits<double>::infinity();
      total += pa * (std::log(pa) - std::log(pb));
    }
  }
  double kl = total / static_cast<double>(rows.size());
  return kl < 0.0 ? 0.0 : kl;  // guard tiny negative round-off
}

GradientSet compute_gradients(Tape& tape, const ModelNodes& nodes, NodeId loss) {
  if (!std::isfinite(tape.scalar(loss)))
    throw NumericError("loss is not finite");
  tape.backward(loss);
  GradientSet grads;
  for (const auto& [name, id] : nodes.params) {
    const Matrix& g = tape.grad(id);
    Matrix out = g.size() == 0
                     ? Matrix::Zero(tape.value(id).rows(), tape.value(id).cols())
                     : g;
    if (!out.allFinite()) throw NumericError("non-finite gradient for parameter " + name);
    grads[name] = std::move(out);
  }
  return grads;
}

}  // namespace treerpo
