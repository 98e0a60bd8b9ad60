#include "ganmpc/tape.hpp"

#include <stdexcept>

#include "ganmpc/nn.hpp"

namespace ganmpc::ad {

NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

void Tape::check_same_shape(NodeId a, NodeId b, const char* op) const {
  if (nodes_[a].value.rows() != nodes_[b].value.rows() ||
      nodes_[a].value.cols() != nodes_[b].value.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

NodeId Tape::constant(MatrixXd value) {
  Node n;
  n.op = Op::kConst;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::leaf(MatrixXd value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  check_same_shape(a, b, "add");
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value + nodes_[b].value;
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  check_same_shape(a, b, "sub");
  Node n;
  n.op = Op::kSub;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value - nodes_[b].value;
  return push(std::move(n));
}

NodeId Tape::neg(NodeId a) { return scale(a, -1.0); }

NodeId Tape::scale(NodeId a, double k) {
  Node n;
  n.op = Op::kScale;
  n.a = a;
  n.k = k;
  n.value = k * nodes_[a].value;
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  if (nodes_[a].value.cols() != nodes_[b].value.rows())
    throw std::invalid_argument("matmul: inner dimension mismatch");
  Node n;
  n.op = Op::kMatmul;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value * nodes_[b].value;
  return push(std::move(n));
}

NodeId Tape::transpose(NodeId a) {
  Node n;
  n.op = Op::kTranspose;
  n.a = a;
  n.value = nodes_[a].value.transpose();
  return push(std::move(n));
}

NodeId Tape::cwise_mul(NodeId a, NodeId b) {
  check_same_shape(a, b, "cwise_mul");
  Node n;
  n.op = Op::kCwiseMul;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value.cwiseProduct(nodes_[b].value);
  return push(std::move(n));
}

NodeId Tape::cwise_div(NodeId a, NodeId b) {
  check_same_shape(a, b, "cwise_div");
  Node n;
  n.op = Op::kCwiseDiv;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value.cwiseQuotient(nodes_[b].value);
  return push(std::move(n));
}

NodeId Tape::mul_scalar(NodeId m, NodeId s) {
  if (nodes_[s].value.size() != 1) throw std::invalid_argument("mul_scalar: scalar must be 1x1");
  Node n;
  n.op = Op::kMulScalar;
  n.a = m;
  n.b = s;
  n.value = nodes_[s].value(0, 0) * nodes_[m].value;
  return push(std::move(n));
}

NodeId Tape::div_scalar(NodeId m, NodeId s) {
  if (nodes_[s].value.size() != 1) throw std::invalid_argument("div_scalar: scalar must be 1x1");
  Node n;
  n.op = Op::kDivScalar;
  n.a = m;
  n.b = s;
  n.value = nodes_[m].value / nodes_[s].value(0, 0);
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
  Node n;
  n.op = Op::kSigmoid;
  n.a = a;
  n.value = nodes_[a].value.unaryExpr([](double v) { return nn::sigmoid(v); });
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
  Node n;
  n.op = Op::kTanh;
  n.a = a;
  n.value = nodes_[a].value.array().tanh().matrix();
  return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
  Node n;
  n.op = Op::kRelu;
  n.a = a;
  n.mask = nodes_[a].value.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
  n.value = nodes_[a].value.cwiseMax(0.0);
  return push(std::move(n));
}

NodeId Tape::softplus(NodeId a) {
  Node n;
  n.op = Op::kSoftplus;
  n.a = a;
  n.value = nodes_[a].value.unaryExpr([](double v) { return nn::softplus(v); });
  return push(std::move(n));
}

NodeId Tape::sqrt(NodeId a) {
  Node n;
  n.op = Op::kSqrt;
  n.a = a;
  n.value = nodes_[a].value.cwiseSqrt();
  return push(std::move(n));
}

NodeId Tape::sum_squares(NodeId a) {
  Node n;
  n.op = Op::kSumSquares;
  n.a = a;
  n.value = MatrixXd::Constant(1, 1, nodes_[a].value.squaredNorm());
  return push(std::move(n));
}

NodeId Tape::dot(NodeId a, NodeId b) {
  check_same_shape(a, b, "dot");
  Node n;
  n.op = Op::kDot;
  n.a = a;
  n.b = b;
  n.value = MatrixXd::Constant(1, 1, nodes_[a].value.cwiseProduct(nodes_[b].value).sum());
  return push(std::move(n));
}

NodeId Tape::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  long rows = 0;
  long cols = nodes_[parts[0]].value.cols();
  for (NodeId p : parts) {
    if (nodes_[p].value.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += nodes_[p].value.rows();
  }
  Node n;
  n.op = Op::kConcatRows;
  n.parts.assign(parts.begin(), parts.end());
  n.value.resize(rows, cols);
  long off = 0;
  for (NodeId p : parts) {
    n.value.middleRows(off, nodes_[p].value.rows()) = nodes_[p].value;
    off += nodes_[p].value.rows();
  }
  return push(std::move(n));
}

NodeId Tape::slice_rows(NodeId a, int begin, int rows) {
  if (begin < 0 || rows < 1 || begin + rows > nodes_[a].value.rows())
    throw std::invalid_argument("slice_rows: out of range");
  Node n;
  n.op = Op::kSliceRows;
  n.a = a;
  n.i0 = begin;
  n.i1 = rows;
  n.value = nodes_[a].value.middleRows(begin, rows);
  return push(std::move(n));
}

NodeId Tape::pad_rows(NodeId a, int begin, int total_rows) {
  if (begin < 0 || begin + nodes_[a].value.rows() > total_rows)
    throw std::invalid_argument("pad_rows: out of range");
  Node n;
  n.op = Op::kPadRows;
  n.a = a;
  n.i0 = begin;
  n.i1 = total_rows;
  n.value = MatrixXd::Zero(total_rows, nodes_[a].value.cols());
  n.value.middleRows(begin, nodes_[a].value.rows()) = nodes_[a].value;
  return push(std::move(n));
}

NodeId Tape::solve_psd(NodeId a, NodeId b) {
  if (nodes_[a].value.rows() != nodes_[a].value.cols() ||
      nodes_[a].value.rows() != nodes_[b].value.rows())
    throw std::invalid_argument("solve_psd: dimension mismatch");
  Eigen::LLT<MatrixXd> llt(nodes_[a].value);
  if (llt.info() != Eigen::Success) throw std::runtime_error("solve_psd: matrix is not positive definite");
  Node n;
  n.op = Op::kSolvePsd;
  n.a = a;
  n.b = b;
  n.value = llt.solve(nodes_[b].value);
  return push(std::move(n));
}

NodeId Tape::clamp(NodeId a, double bound) {
  if (bound <= 0) throw std::invalid_argument("clamp: bound must be positive");
  Node n;
  n.op = Op::kClamp;
  n.a = a;
  n.mask = nodes_[a].value.unaryExpr(
      [bound](double v) { return (v >= -bound && v <= bound) ? 1.0 : 0.0; });
  n.value = nodes_[a].value.cwiseMax(-bound).cwiseMin(bound);
  return push(std::move(n));
}

std::vector<NodeId> Tape::backward(std::span<const std::pair<NodeId, MatrixXd>> seeds,
                                   std::span<const NodeId> wrt) {
  const int frontier = static_cast<int>(nodes_.size());
  std::vector<NodeId> adj(frontier, -1);

  auto contribute = [&](NodeId target, NodeId grad) {
    if (target < 0 || target >= frontier) throw std::logic_error("backward: bad target");
    adj[target] = adj[target] < 0 ? grad : add(adj[target], grad);
  };

  int top = -1;
  for (const auto& [id, seed] : seeds) {
    if (id < 0 || id >= frontier) throw std::invalid_argument("backward: seed outside tape");
    if (seed.rows() != nodes_[id].value.rows() || seed.cols() != nodes_[id].value.cols())
      throw std::invalid_argument("backward: seed shape mismatch");
    contribute(id, constant(seed));
    top = std::max(top, id);
  }

  for (int i = top; i >= 0; --i) {
    if (adj[i] < 0) continue;
    const NodeId u = adj[i];
    // copy POD fields: pushing nodes below may reallocate the node store
    const Op op = nodes_[i].op;
    const int pa = nodes_[i].a;
    const int pb = nodes_[i].b;
    const int i0 = nodes_[i].i0;
    const int i1 = nodes_[i].i1;
    const double k = nodes_[i].k;

    switch (op) {
      case Op::kConst:
      case Op::kLeaf:
        break;
      case Op::kAdd:
        contribute(pa, u);
        contribute(pb, u);
        break;
      case Op::kSub:
        contribute(pa, u);
        contribute(pb, scale(u, -1.0));
        break;
      case Op::kScale:
        contribute(pa, scale(u, k));
        break;
      case Op::kMatmul:
        contribute(pa, matmul(u, transpose(pb)));
        contribute(pb, matmul(transpose(pa), u));
        break;
      case Op::kTranspose:
        contribute(pa, transpose(u));
        break;
      case Op::kCwiseMul:
        contribute(pa, cwise_mul(u, pb));
        contribute(pb, cwise_mul(u, pa));
        break;
      case Op::kCwiseDiv:
        contribute(pa, cwise_div(u, pb));
        contribute(pb, scale(cwise_mul(cwise_div(u, pb), i), -1.0));
        break;
      case Op::kMulScalar:
        contribute(pa, mul_scalar(u, pb));
        contribute(pb, dot(u, pa));
        break;
      case Op::kDivScalar:
        contribute(pa, div_scalar(u, pb));
        contribute(pb, scale(div_scalar(dot(u, i), pb), -1.0));
        break;
      case Op::kSigmoid: {
        NodeId ones = constant(MatrixXd::Ones(nodes_[i].value.rows(), nodes_[i].value.cols()));
        contribute(pa, cwise_mul(cwise_mul(u, i), sub(ones, i)));
        break;
      }
      case Op::kTanh: {
        NodeId ones = constant(MatrixXd::Ones(nodes_[i].value.rows(), nodes_[i].value.cols()));
        contribute(pa, cwise_mul(u, sub(ones, cwise_mul(i, i))));
        break;
      }
      case Op::kRelu:
      case Op::kClamp: {
        NodeId mask = constant(nodes_[i].mask);
        contribute(pa, cwise_mul(u, mask));
        break;
      }
      case Op::kSoftplus:
        contribute(pa, cwise_mul(u, sigmoid(pa)));
        break;
      case Op::kSqrt:
        contribute(pa, cwise_div(scale(u, 0.5), i));
        break;
      case Op::kSumSquares:
        contribute(pa, scale(mul_scalar(pa, u), 2.0));
        break;
      case Op::kDot:
        contribute(pa, mul_scalar(pb, u));
        contribute(pb, mul_scalar(pa, u));
        break;
      case Op::kConcatRows: {
        const std::vector<int> parts = nodes_[i].parts;
        int off = 0;
        for (NodeId p : parts) {
          const int rows = static_cast<int>(nodes_[p].value.rows());
          contribute(p, slice_rows(u, off, rows));
          off += rows;
        }
        break;
      }
      case Op::kSliceRows:
        contribute(pa, pad_rows(u, i0, static_cast<int>(nodes_[pa].value.rows())));
        break;
      case Op::kPadRows:
        contribute(pa, slice_rows(u, i0, static_cast<int>(nodes_[pa].value.rows())));
        break;
      case Op::kSolvePsd: {
        NodeId db = solve_psd(pa, u);
        contribute(pb, db);
        contribute(pa, scale(matmul(db, transpose(i)), -1.0));
        break;
      }
    }
  }

  std::vector<NodeId> result;
  result.reserve(wrt.size());
  for (NodeId id : wrt) {
    if (id < 0 || id >= frontier) throw std::invalid_argument("backward: wrt outside tape");
    if (adj[id] >= 0) {
      result.push_back(adj[id]);
    } else {
      result.push_back(
          constant(MatrixXd::Zero(nodes_[id].value.rows(), nodes_[id].value.cols())));
    }
  }
  return result;
}

std::vector<NodeId> Tape::gradient(NodeId output, std::span<const NodeId> wrt) {
  if (nodes_[output].value.size() != 1)
    throw std::invalid_argument("gradient: output must be scalar");
  std::pair<NodeId, MatrixXd> seed{output, MatrixXd::Ones(1, 1)};
  return backward(std::span<const std::pair<NodeId, MatrixXd>>(&seed, 1), wrt);
}

}  // namespace ganmpc::ad
