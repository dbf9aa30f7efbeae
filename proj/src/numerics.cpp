#include "nullmoe/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nullmoe {

bool all_finite(const Matrix& m) { return m.allFinite(); }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  Matrix c = a * b;
  if (!c.allFinite()) throw NumericError("matmul: non-finite output");
  return c;
}

void matmul_backward(const Matrix& a, const Matrix& b, const Matrix& dc, Matrix& da, Matrix& db) {
  if (dc.rows() != a.rows() || dc.cols() != b.cols())
    throw ShapeError("matmul_backward: upstream gradient shape mismatch");
  da = dc * b.transpose();
  db = a.transpose() * dc;
}

Matrix softmax_rows(const Matrix& logits) {
  if (!logits.allFinite()) throw NumericError("softmax_rows: non-finite input");
  Matrix out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    Scalar m = logits(r, 0);
    for (Index c = 1; c < logits.cols(); ++c) m = std::max(m, logits(r, c));
    Scalar denom = 0;
    for (Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = std::exp(logits(r, c) - m);
      denom += out(r, c);
    }
    for (Index c = 0; c < logits.cols(); ++c) out(r, c) /= denom;
  }
  return out;
}

void softmax_rows_backward(const Matrix& probs, const Matrix& dprobs, Matrix& dlogits) {
  dlogits.resize(probs.rows(), probs.cols());
  for (Index r = 0; r < probs.rows(); ++r) {
    Scalar dot = 0;
    for (Index c = 0; c < probs.cols(); ++c) dot += dprobs(r, c) * probs(r, c);
    for (Index c = 0; c < probs.cols(); ++c)
      dlogits(r, c) = probs(r, c) * (dprobs(r, c) - dot);
  }
}

void topk_rows(const Matrix& scores, int k, TieBreak tie, IntMatrix& indices, Matrix& values) {
  (void)tie;  // single policy; parameter kept for the call-site contract
  if (k < 0 || k > scores.cols())
    throw ShapeError("topk_rows: k=" + std::to_string(k) + " out of range for " +
                     std::to_string(scores.cols()) + " columns");
  indices.resize(scores.rows(), k);
  values.resize(scores.rows(), k);
  std::vector<int> order(static_cast<size_t>(scores.cols()));
  for (Index r = 0; r < scores.rows(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int i, int j) {
      if (scores(r, i) != scores(r, j)) return scores(r, i) > scores(r, j);
      return i < j;
    });
    for (int c = 0; c < k; ++c) {
      indices(r, c) = order[static_cast<size_t>(c)];
      values(r, c) = scores(r, order[static_cast<size_t>(c)]);
    }
  }
}

std::vector<Index> stable_argsort(std::span<const Index> keys) {
  std::vector<Index> perm(keys.size());
  std::iota(perm.begin(), perm.end(), Index{0});
  std::stable_sort(perm.begin(), perm.end(),
                   [&](Index i, Index j) { return keys[static_cast<size_t>(i)] < keys[static_cast<size_t>(j)]; });
  return perm;
}

Matrix scatter_add(Matrix dest, std::span<const Index> row_index, const Matrix& src) {
  if (static_cast<Index>(row_index.size()) != src.rows())
    throw ShapeError("scatter_add: index count != src rows");
  if (src.rows() > 0 && src.cols() != dest.cols())
    throw ShapeError("scatter_add: column widths differ");
  for (size_t j = 0; j < row_index.size(); ++j) {
    Index r = row_index[j];
    if (r < 0 || r >= dest.rows()) throw ShapeError("scatter_add: row index out of range");
    dest.row(r) += src.row(static_cast<Index>(j));
  }
  return dest;
}

Scalar silu(Scalar x) {
  Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
  return x * s;
}

Scalar silu_grad(Scalar x) {
  Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
  return s * (Scalar(1) + x * (Scalar(1) - s));
}

Matrix silu(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < x.cols(); ++c) y(r, c) = silu(x(r, c));
  return y;
}

Matrix silu_backward(const Matrix& x, const Matrix& dy) {
  Matrix dx(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < x.cols(); ++c) dx(r, c) = dy(r, c) * silu_grad(x(r, c));
  return dx;
}

// ---------------------------------------------------------------------------
// GradTape
// ---------------------------------------------------------------------------

GradTape::NodeId GradTape::push(Matrix value, std::function<void()> back) {
  nodes_.push_back(Node{std::move(value), Matrix{}, std::move(back)});
  return static_cast<NodeId>(nodes_.size() - 1);
}

GradTape::NodeId GradTape::leaf(Matrix value) { return push(std::move(value), {}); }

GradTape::NodeId GradTape::matmul(NodeId a, NodeId b) {
  Matrix c = nullmoe::matmul(nodes_[a].value, nodes_[b].value);
  NodeId id = push(std::move(c), {});
  nodes_[id].back = [this, id, a, b] {
    Matrix da, db;
    matmul_backward(nodes_[a].value, nodes_[b].value, nodes_[id].grad, da, db);
    nodes_[a].grad += da;
    nodes_[b].grad += db;
  };
  return id;
}

GradTape::NodeId GradTape::add(NodeId a, NodeId b) {
  NodeId id = push(nodes_[a].value + nodes_[b].value, {});
  nodes_[id].back = [this, id, a, b] {
    nodes_[a].grad += nodes_[id].grad;
    nodes_[b].grad += nodes_[id].grad;
  };
  return id;
}

GradTape::NodeId GradTape::silu(NodeId a) {
  NodeId id = push(nullmoe::silu(nodes_[a].value), {});
  nodes_[id].back = [this, id, a] {
    nodes_[a].grad += silu_backward(nodes_[a].value, nodes_[id].grad);
  };
  return id;
}

GradTape::NodeId GradTape::softmax_rows(NodeId a) {
  NodeId id = push(nullmoe::softmax_rows(nodes_[a].value), {});
  nodes_[id].back = [this, id, a] {
    Matrix dz;
    softmax_rows_backward(nodes_[id].value, nodes_[id].grad, dz);
    nodes_[a].grad += dz;
  };
  return id;
}

GradTape::NodeId GradTape::scale(NodeId a, Scalar s) {
  NodeId id = push(nodes_[a].value * s, {});
  nodes_[id].back = [this, id, a, s] { nodes_[a].grad += nodes_[id].grad * s; };
  return id;
}

GradTape::NodeId GradTape::sum(NodeId a) {
  Matrix v(1, 1);
  Scalar acc = 0;
  const Matrix& x = nodes_[a].value;
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < x.cols(); ++c) acc += x(r, c);
  v(0, 0) = acc;
  NodeId id = push(std::move(v), {});
  nodes_[id].back = [this, id, a] {
    nodes_[a].grad.array() += nodes_[id].grad(0, 0);
  };
  return id;
}

void GradTape::backward(NodeId out, const Matrix& seed) {
  for (Node& n : nodes_) {
    n.grad.resize(n.value.rows(), n.value.cols());
    n.grad.setZero();
  }
  if (seed.rows() != nodes_[out].value.rows() || seed.cols() != nodes_[out].value.cols())
    throw ShapeError("GradTape::backward: seed shape mismatch");
  nodes_[out].grad = seed;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
    if (it->back) it->back();
}

}  // namespace nullmoe
