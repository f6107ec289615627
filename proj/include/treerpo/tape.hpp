// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "treerpo/types.hpp"

namespace treerpo {

using NodeId = int;

// Reverse-mode tape over dense matrices. Nodes are appended in evaluation
// order, so ancestors always precede descendants and backward() is a single
// reverse sweep. Every op checks its result for non-finite entries and throws
// NumericError naming the offending op.
class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;  // sized lazily during backward
    bool requires_grad = false;
    const char* op = "leaf";
    std::function<void(Tape&)> backward;  // empty for leaves
  };

  NodeId leaf(Matrix value, bool requires_grad = false, const char* op = "leaf");
  NodeId constant(Matrix value) { return leaf(std::move(value), false, "const"); }
  NodeId scalar_constant(double v);

  const Matrix& value(NodeId id) const { return nodes_[id].value; }
  double scalar(NodeId id) const { return nodes_[id].value(0, 0); }
  const Matrix& grad(NodeId id) const { return nodes_[id].grad; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. `loss` must be
  // a 1x1 node.
  void backward(NodeId loss);

  // --- ops -------------------------------------------------------------
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId hadamard(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId matmul(NodeId a, NodeId b);
  NodeId matmul_nt(NodeId a, NodeId b);  // a * b^T
  NodeId add_rowvec(NodeId a, NodeId row);  // broadcast 1 x C over rows of a
  NodeId rows_gather(NodeId a, std::vector<int> rows);
  NodeId slice_rows(NodeId a, int start, int n);
  NodeId slice_cols(NodeId a, int start, int n);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  NodeId softmax_rows(NodeId a);
  NodeId layer_norm_rows(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
  NodeId tanh(NodeId a);
  NodeId log(NodeId a);  // input clamped at kLogFloor; records clamp hits
  NodeId pick_entries(NodeId a, std::vector<int> rows, std::vector<int> cols);
  NodeId clip(NodeId a, double lo, double hi);  // pass-through inside [lo,hi]
  NodeId min2(NodeId a, NodeId b);  // ties follow a
  NodeId sum_all(NodeId a);         // 1x1
  NodeId dot_const(NodeId a, const Matrix& w);  // 1x1 = sum(w .* a)
  NodeId mul_scalar_node(NodeId a, NodeId s);   // s is 1x1

  // Probabilities below this floor are clamped before log().
  static constexpr double kLogFloor = 1e-300;

  int log_floor_hits() const { return log_floor_hits_; }

 private:
  NodeId push(Matrix value, bool requires_grad, const char* op,
              std::function<void(Tape&)> backward);
  Matrix& grad_buf(NodeId id);

  std::vector<Node> nodes_;
  int log_floor_hits_ = 0;
};

}  // namespace treerpo
