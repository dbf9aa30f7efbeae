#pragma once

#include "nullmoe/types.hpp"

#include <functional>
#include <span>
#include <vector>

namespace nullmoe {

// ---------------------------------------------------------------------------
// Dense op substrate. Every differentiable op comes as an explicit
// forward/backward pair. Reductions that feed bit-exactness checks (softmax,
// renormalization, scatter) run as sequential loops; only the large products
// go through Eigen's GEMM.
// ---------------------------------------------------------------------------

bool all_finite(const Matrix& m);

// Shape-checked product a*b. Output is verified finite.
Matrix matmul(const Matrix& a, const Matrix& b);

// dC -> (dA, dB) for C = A*B: dA = dC * B^T, dB = A^T * dC.
void matmul_backward(const Matrix& a, const Matrix& b, const Matrix& dc, Matrix& da, Matrix& db);

// Row-wise softmax, stabilized by row-max subtraction. Accumulation is
// sequential left-to-right so repeated calls are bit-identical.
Matrix softmax_rows(const Matrix& logits);

// dP -> dZ for P = softmax_rows(Z): dz = p .* (dp - <dp, p>) per row.
void softmax_rows_backward(const Matrix& probs, const Matrix& dprobs, Matrix& dlogits);

enum class TieBreak { kIndexAscending };

// Per-row k largest values. Ties resolve by ascending column index, so the
// result equals the first k entries of a full stable descending sort.
void topk_rows(const Matrix& scores, int k, TieBreak tie, IntMatrix& indices, Matrix& values);

// Stable ascending argsort of integer keys: equal keys keep input order.
std::vector<Index> stable_argsort(std::span<const Index> keys);

// dest[row_index[j]] += src[j], accumulated sequentially in j.
Matrix scatter_add(Matrix dest, std::span<const Index> row_index, const Matrix& src);

Scalar silu(Scalar x);
Scalar silu_grad(Scalar x);
Matrix silu(const Matrix& x);
Matrix silu_backward(const Matrix& x, const Matrix& dy);

// ---------------------------------------------------------------------------
// GradTape: an ordered record of ops with the inputs their backward rules
// need. backward() replays the record in reverse and accumulates gradients
// into every node. The model itself uses hand-woven backward passes; the tape
// exists as the audited composition substrate and as a second route for
// gradient cross-checks.
// ---------------------------------------------------------------------------
class GradTape {
 public:
  using NodeId = int;

  NodeId leaf(Matrix value);
  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId silu(NodeId a);
  NodeId softmax_rows(NodeId a);
  NodeId scale(NodeId a, Scalar s);
  // Sum of all entries, returned as a 1x1 node.
  NodeId sum(NodeId a);

  const Matrix& value(NodeId id) const { return nodes_[id].value; }
  const Matrix& grad(NodeId id) const { return nodes_[id].grad; }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  // Seeds d(out) and replays recorded ops in reverse order.
  void backward(NodeId out, const Matrix& seed);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void()> back;  // empty for leaves
  };

  NodeId push(Matrix value, std::function<void()> back);
  std::vector<Node> nodes_;
};

}  // namespace nullmoe
