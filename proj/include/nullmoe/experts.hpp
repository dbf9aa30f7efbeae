#pragma once

#include "nullmoe/numerics.hpp"
#include "nullmoe/rng.hpp"
#include "nullmoe/types.hpp"

#include <vector>

namespace nullmoe {

// Two-matrix FFN block: y = silu(x * w_in^T) * w_out^T, with w_in H x D and
// w_out D x H. The smooth gated unit is fixed project-wide.
struct FfnParams {
  Matrix w_in;
  Matrix w_out;
};

struct FfnGrads {
  Matrix w_in;
  Matrix w_out;
};

// Saved forward activations for one block invocation.
struct FfnState {
  Matrix hidden;     // pre-activation, rows x H
  Matrix activated;  // silu(hidden)
};

Matrix ffn_forward(const FfnParams& p, const Matrix& x, FfnState* save = nullptr);

// Accumulates parameter gradients and returns dx.
Matrix ffn_backward(const FfnParams& p, const Matrix& x, const FfnState& state, const Matrix& dy,
                    FfnGrads& grads);

// N routed expert blocks plus one shared block, all D -> H -> D.
struct ExpertBank {
  std::vector<FfnParams> experts;
  FfnParams shared;
  int d_model = 0;
  int hidden = 0;

  static ExpertBank init(int n_experts, int d_model, int hidden, Rng& rng);
  int n_experts() const { return static_cast<int>(experts.size()); }
  // (N + 1) * 2 * D * H
  Index parameter_count() const;
};

struct ExpertBankGrads {
  std::vector<FfnGrads> experts;
  FfnGrads shared;

  static ExpertBankGrads zeros_like(const ExpertBank& bank);
  void set_zero();
};

}  // namespace nullmoe
