// SPDX-License-Identifier: Apache-2.0
#include "treerpo/tape.hpp"

#include <cmath>
#include <utility>

namespace treerpo {

namespace {
void check_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite value in op '") + op + "'");
}
}  // namespace

NodeId Tape::push(Matrix value, bool requires_grad, const char* op,
                  std::function<void(Tape&)> backward) {
  check_finite(value, op);
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.op = op;
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

NodeId Tape::leaf(Matrix value, bool requires_grad, const char* op) {
  return push(std::move(value), requires_grad, op, nullptr);
}

NodeId Tape::scalar_constant(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return leaf(std::move(m), false, "const");
}

Matrix& Tape::grad_buf(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(NodeId loss) {
  if (nodes_[loss].value.rows() != 1 || nodes_[loss].value.cols() != 1)
    throw InvalidCallError("backward requires a 1x1 loss node");
  grad_buf(loss)(0, 0) = 1.0;
  for (NodeId i = loss; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    check_finite(n.grad, n.op);
    n.backward(*this);
  }
}

NodeId Tape::add(NodeId a, NodeId b) {
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out = push(nodes_[a].value + nodes_[b].value, rg, "add", nullptr);
  if (rg)
    nodes_[out].backward = [a, b, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      if (t.nodes_[a].requires_grad) t.grad_buf(a) += g;
      if (t.nodes_[b].requires_grad) t.grad_buf(b) += g;
    };
  return out;
}

NodeId Tape::sub(NodeId a, NodeId b) {
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out = push(nodes_[a].value - nodes_[b].value, rg, "sub", nullptr);
  if (rg)
    nodes_[out].backward = [a, b, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      if (t.nodes_[a].requires_grad) t.grad_buf(a) += g;
      if (t.nodes_[b].requires_grad) t.grad_buf(b) -= g;
    };
  return out;
}

NodeId Tape::hadamard(NodeId a, NodeId b) {
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out =
      push(nodes_[a].value.cwiseProduct(nodes_[b].value), rg, "hadamard", nullptr);
  if (rg)
    nodes_[out].backward = [a, b, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      if (t.nodes_[a].requires_grad) t.grad_buf(a) += g.cwiseProduct(t.nodes_[b].value);
      if (t.nodes_[b].requires_grad) t.grad_buf(b) += g.cwiseProduct(t.nodes_[a].value);
    };
  return out;
}

NodeId Tape::scale(NodeId a, double c) {
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(nodes_[a].value * c, rg, "scale", nullptr);
  if (rg)
    nodes_[out].backward = [a, c, out](Tape& t) { t.grad_buf(a) += t.nodes_[out].grad * c; };
  return out;
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  if (nodes_[a].value.cols() != nodes_[b].value.rows())
    throw InvalidCallError("matmul shape mismatch");
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out = push(nodes_[a].value * nodes_[b].value, rg, "matmul", nullptr);
  if (rg)
    nodes_[out].backward = [a, b, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      if (t.nodes_[a].requires_grad) t.grad_buf(a) += g * t.nodes_[b].value.transpose();
      if (t.nodes_[b].requires_grad) t.grad_buf(b) += t.nodes_[a].value.transpose() * g;
    };
  return out;
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
  if (nodes_[a].value.cols() != nodes_[b].value.cols())
    throw InvalidCallError("matmul_nt shape mismatch");
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out = push(nodes_[a].value * nodes_[b].value.transpose(), rg, "matmul_nt", nullptr);
  if (rg)
    nodes_[out].backward = [a, b, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      if (t.nodes_[a].requires_grad) t.grad_buf(a) += g * t.nodes_[b].value;
      if (t.nodes_[b].requires_grad) t.grad_buf(b) += g.transpose() * t.nodes_[a].value;
    };
  return out;
}

NodeId Tape::add_rowvec(NodeId a, NodeId row) {
  if (nodes_[row].value.rows() != 1 || nodes_[row].value.cols() != nodes_[a].value.cols())
    throw InvalidCallError("add_rowvec shape mismatch");
  bool rg = nodes_[a].requires_grad || nodes_[row].requires_grad;
  Matrix v = nodes_[a].value;
  v.rowwise() += nodes_[row].value.row(0);
  NodeId out = push(std::move(v), rg, "add_rowvec", nullptr);
  if (rg)
    nodes_[out].backward = [a, row, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      if (t.nodes_[a].requires_grad) t.grad_buf(a) += g;
      if (t.nodes_[row].requires_grad) t.grad_buf(row) += g.colwise().sum();
    };
  return out;
}

NodeId Tape::rows_gather(NodeId a, std::vector<int> rows) {
  const Matrix& src = nodes_[a].value;
  Matrix v(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= src.rows())
      throw InvalidCallError("rows_gather index out of range");
    v.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
  }
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(std::move(v), rg, "rows_gather", nullptr);
  if (rg)
    nodes_[out].backward = [a, rows = std::move(rows), out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      Matrix& ga = t.grad_buf(a);
      for (std::size_t i = 0; i < rows.size(); ++i)
        ga.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    };
  return out;
}

NodeId Tape::slice_rows(NodeId a, int start, int n) {
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(nodes_[a].value.middleRows(start, n), rg, "slice_rows", nullptr);
  if (rg)
    nodes_[out].backward = [a, start, n, out](Tape& t) {
      t.grad_buf(a).middleRows(start, n) += t.nodes_[out].grad;
    };
  return out;
}

NodeId Tape::slice_cols(NodeId a, int start, int n) {
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(nodes_[a].value.middleCols(start, n), rg, "slice_cols", nullptr);
  if (rg)
    nodes_[out].backward = [a, start, n, out](Tape& t) {
      t.grad_buf(a).middleCols(start, n) += t.nodes_[out].grad;
    };
  return out;
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw InvalidCallError("concat_cols of nothing");
  Eigen::Index rows = nodes_[parts[0]].value.rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (NodeId p : parts) {
    if (nodes_[p].value.rows() != rows) throw InvalidCallError("concat_cols row mismatch");
    cols += nodes_[p].value.cols();
    rg = rg || nodes_[p].requires_grad;
  }
  Matrix v(rows, cols);
  Eigen::Index at = 0;
  for (NodeId p : parts) {
    v.middleCols(at, nodes_[p].value.cols()) = nodes_[p].value;
    at += nodes_[p].value.cols();
  }
  NodeId out = push(std::move(v), rg, "concat_cols", nullptr);
  if (rg)
    nodes_[out].backward = [parts, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      Eigen::Index at = 0;
      for (NodeId p : parts) {
        Eigen::Index w = t.nodes_[p].value.cols();
        if (t.nodes_[p].requires_grad) t.grad_buf(p) += g.middleCols(at, w);
        at += w;
      }
    };
  return out;
}

NodeId Tape::softmax_rows(NodeId a) {
  const Matrix& x = nodes_[a].value;
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mx = x.row(r).maxCoeff();
    RowVector e = (x.row(r).array() - mx).exp();
    y.row(r) = e / e.sum();
  }
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(std::move(y), rg, "softmax_rows", nullptr);
  if (rg)
    nodes_[out].backward = [a, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      const Matrix& y = t.nodes_[out].value;
      Matrix& ga = t.grad_buf(a);
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        double dot = g.row(r).dot(y.row(r));
        ga.row(r) += (g.row(r).array() - dot).matrix().cwiseProduct(y.row(r));
      }
    };
  return out;
}

NodeId Tape::layer_norm_rows(NodeId x, NodeId gamma, NodeId beta, double eps) {
  const Matrix& xv = nodes_[x].value;
  const Matrix& gv = nodes_[gamma].value;
  const Matrix& bv = nodes_[beta].value;
  if (gv.rows() != 1 || bv.rows() != 1 || gv.cols() != xv.cols() || bv.cols() != xv.cols())
    throw InvalidCallError("layer_norm_rows parameter shape mismatch");
  Eigen::Index R = xv.rows(), C = xv.cols();
  Matrix xhat(R, C), y(R, C);
  Vector inv_std(R);
  for (Eigen::Index r = 0; r < R; ++r) {
    double mu = xv.row(r).mean();
    double var = (xv.row(r).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = (xv.row(r).array() - mu) * is;
    y.row(r) = xhat.row(r).cwiseProduct(gv.row(0)) + bv.row(0);
  }
  bool rg = nodes_[x].requires_grad || nodes_[gamma].requires_grad || nodes_[beta].requires_grad;
  NodeId out = push(std::move(y), rg, "layer_norm_rows", nullptr);
  if (rg)
    nodes_[out].backward = [x, gamma, beta, out, xhat = std::move(xhat),
                            inv_std = std::move(inv_std)](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      const Matrix& gv = t.nodes_[gamma].value;
      Eigen::Index R = g.rows();
      if (t.nodes_[gamma].requires_grad) {
        Matrix& gg = t.grad_buf(gamma);
        for (Eigen::Index r = 0; r < R; ++r)
          gg.row(0) += g.row(r).cwiseProduct(xhat.row(r));
      }
      if (t.nodes_[beta].requires_grad) t.grad_buf(beta).row(0) += g.colwise().sum();
      if (t.nodes_[x].requires_grad) {
        Matrix& gx = t.grad_buf(x);
        for (Eigen::Index r = 0; r < R; ++r) {
          RowVector gy = g.row(r).cwiseProduct(gv.row(0));
          double m1 = gy.mean();
          double m2 = gy.cwiseProduct(xhat.row(r)).mean();
          gx.row(r) +=
              ((gy.array() - m1 - xhat.row(r).array() * m2) * inv_std(r)).matrix();
        }
      }
    };
  return out;
}

NodeId Tape::tanh(NodeId a) {
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(nodes_[a].value.array().tanh().matrix(), rg, "tanh", nullptr);
  if (rg)
    nodes_[out].backward = [a, out](Tape& t) {
      const Matrix& y = t.nodes_[out].value;
      t.grad_buf(a) +=
          t.nodes_[out].grad.cwiseProduct((1.0 - y.array().square()).matrix());
    };
  return out;
}

NodeId Tape::log(NodeId a) {
  Matrix clamped = nodes_[a].value.cwiseMax(kLogFloor);
  if ((nodes_[a].value.array() < kLogFloor).any()) ++log_floor_hits_;
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(clamped.array().log().matrix(), rg, "log", nullptr);
  if (rg)
    nodes_[out].backward = [a, clamped = std::move(clamped), out](Tape& t) {
      t.grad_buf(a) += t.nodes_[out].grad.cwiseQuotient(clamped);
    };
  return out;
}

NodeId Tape::pick_entries(NodeId a, std::vector<int> rows, std::vector<int> cols) {
  if (rows.size() != cols.size()) throw InvalidCallError("pick_entries length mismatch");
  const Matrix& src = nodes_[a].value;
  Matrix v(1, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= src.rows() || cols[i] < 0 || cols[i] >= src.cols())
      throw InvalidCallError("pick_entries index out of range");
    v(0, static_cast<Eigen::Index>(i)) = src(rows[i], cols[i]);
  }
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(std::move(v), rg, "pick_entries", nullptr);
  if (rg)
    nodes_[out].backward = [a, rows = std::move(rows), cols = std::move(cols), out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      Matrix& ga = t.grad_buf(a);
      for (std::size_t i = 0; i < rows.size(); ++i)
        ga(rows[i], cols[i]) += g(0, static_cast<Eigen::Index>(i));
    };
  return out;
}

NodeId Tape::clip(NodeId a, double lo, double hi) {
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(nodes_[a].value.cwiseMax(lo).cwiseMin(hi), rg, "clip", nullptr);
  if (rg)
    nodes_[out].backward = [a, lo, hi, out](Tape& t) {
      const Matrix& x = t.nodes_[a].value;
      // pass-through only where the input lies inside the clip range
      Matrix mask = ((x.array() >= lo) && (x.array() <= hi)).cast<double>();
      t.grad_buf(a) += t.nodes_[out].grad.cwiseProduct(mask);
    };
  return out;
}

NodeId Tape::min2(NodeId a, NodeId b) {
  if (nodes_[a].value.rows() != nodes_[b].value.rows() ||
      nodes_[a].value.cols() != nodes_[b].value.cols())
    throw InvalidCallError("min2 shape mismatch");
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out = push(nodes_[a].value.cwiseMin(nodes_[b].value), rg, "min2", nullptr);
  if (rg)
    nodes_[out].backward = [a, b, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      // ties route through a (the unclipped branch by convention)
      Matrix take_a = (t.nodes_[a].value.array() <= t.nodes_[b].value.array()).cast<double>();
      if (t.nodes_[a].requires_grad) t.grad_buf(a) += g.cwiseProduct(take_a);
      if (t.nodes_[b].requires_grad)
        t.grad_buf(b) += g.cwiseProduct((1.0 - take_a.array()).matrix());
    };
  return out;
}

NodeId Tape::sum_all(NodeId a) {
  Matrix v(1, 1);
  v(0, 0) = nodes_[a].value.sum();
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(std::move(v), rg, "sum_all", nullptr);
  if (rg)
    nodes_[out].backward = [a, out](Tape& t) {
      t.grad_buf(a).array() += t.nodes_[out].grad(0, 0);
    };
  return out;
}

NodeId Tape::dot_const(NodeId a, const Matrix& w) {
  if (w.rows() != nodes_[a].value.rows() || w.cols() != nodes_[a].value.cols())
    throw InvalidCallError("dot_const shape mismatch");
  Matrix v(1, 1);
  v(0, 0) = nodes_[a].value.cwiseProduct(w).sum();
  bool rg = nodes_[a].requires_grad;
  NodeId out = push(std::move(v), rg, "dot_const", nullptr);
  if (rg)
    nodes_[out].backward = [a, w, out](Tape& t) {
      t.grad_buf(a) += w * t.nodes_[out].grad(0, 0);
    };
  return out;
}

NodeId Tape::mul_scalar_node(NodeId a, NodeId s) {
  if (nodes_[s].value.rows() != 1 || nodes_[s].value.cols() != 1)
    throw InvalidCallError("mul_scalar_node expects a 1x1 scalar node");
  bool rg = nodes_[a].requires_grad || nodes_[s].requires_grad;
  NodeId out = push(nodes_[a].value * nodes_[s].value(0, 0), rg, "mul_scalar_node", nullptr);
  if (rg)
    nodes_[out].backward = [a, s, out](Tape& t) {
      const Matrix& g = t.nodes_[out].grad;
      if (t.nodes_[a].requires_grad) t.grad_buf(a) += g * t.nodes_[s].value(0, 0);
      if (t.nodes_[s].requires_grad)
        t.grad_buf(s)(0, 0) += g.cwiseProduct(t.nodes_[a].value).sum();
    };
  return out;
}

}  // namespace treerpo
