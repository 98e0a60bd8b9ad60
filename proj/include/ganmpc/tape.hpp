#pragma once

#include <span>
#include <utility>
#include <vector>

#include "ganmpc/util.hpp"

// Reverse-mode automatic differentiation over matrix-valued expressions.
// The backward pass emits ordinary tape operations, so gradients are
// themselves differentiable (required for the R1 penalty and for
// differentiating through solver backward passes).
namespace ganmpc::ad {

using NodeId = int;

class Tape {
 public:
  NodeId constant(MatrixXd value);
  NodeId leaf(MatrixXd value);

  const MatrixXd& value(NodeId id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId scale(NodeId a, double k);  // constant scalar multiple
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId cwise_mul(NodeId a, NodeId b);
  NodeId cwise_div(NodeId a, NodeId b);
  NodeId mul_scalar(NodeId m, NodeId s);  // s is 1x1
  NodeId div_scalar(NodeId m, NodeId s);  // s is 1x1

  NodeId sigmoid(NodeId a);
  NodeId tanh(NodeId a);
  // gradient mask is frozen at recording time, so the kink carries zero
  // second-order signal
  NodeId relu(NodeId a);
  NodeId softplus(NodeId a);
  NodeId sqrt(NodeId a);  // elementwise

  NodeId sum_squares(NodeId a);   // -> 1x1
  NodeId dot(NodeId a, NodeId b);  // full contraction of same-shaped values

  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId slice_rows(NodeId a, int begin, int rows);
  NodeId pad_rows(NodeId a, int begin, int total_rows);

  // X = A^-1 B for symmetric positive-definite A (Cholesky)
  NodeId solve_psd(NodeId a, NodeId b);

  // clamp to [-bound, bound]; the pass-through mask is frozen at recording
  NodeId clamp(NodeId a, double bound);

  // Accumulates seed adjoints through the recorded graph and returns the
  // adjoint node of every `wrt` entry (zero-valued constant when no path
  // exists). Emits new tape nodes, so results can be differentiated again.
  std::vector<NodeId> backward(std::span<const std::pair<NodeId, MatrixXd>> seeds,
                               std::span<const NodeId> wrt);

  // convenience: scalar output seeded with 1
  std::vector<NodeId> gradient(NodeId output, std::span<const NodeId> wrt);

 private:
  enum class Op {
    kConst,
    kLeaf,
    kAdd,
    kSub,
    kScale,
    kMatmul,
    kTranspose,
    kCwiseMul,
    kCwiseDiv,
    kMulScalar,
    kDivScalar,
    kSigmoid,
    kTanh,
    kRelu,
    kSoftplus,
    kSqrt,
    kSumSquares,
    kDot,
    kConcatRows,
    kSliceRows,
    kPadRows,
    kSolvePsd,
    kClamp,
  };

  struct Node {
    Op op;
    MatrixXd value;
    int a = -1;
    int b = -1;
    std::vector<int> parts;  // concat only
    MatrixXd mask;           // relu / clamp pass-through
    int i0 = 0, i1 = 0;      // slice/pad arguments
    double k = 0.0;          // scale factor
  };

  NodeId push(Node node);
  void check_same_shape(NodeId a, NodeId b, const char* op) const;

  std::vector<Node> nodes_;
};

}  // namespace ganmpc::ad
