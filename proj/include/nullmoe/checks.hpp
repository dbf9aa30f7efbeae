#pragma once

#include "nullmoe/moe_layer.hpp"
#include "nullmoe/types.hpp"

#include <functional>
#include <string>
#include <vector>

namespace nullmoe {

struct CheckResult {
  std::string name;
  bool pass = false;
  double max_err = 0;
  std::string detail;
};

using CheckList = std::vector<CheckResult>;

// Central finite differences of f over every entry of param, compared to the
// analytic gradient. Returns the Frobenius-relative error.
double fd_relative_error(const std::function<double()>& f, Matrix& param, const Matrix& analytic,
                         double h = 1e-6);

// An independently written standard top-k token-choice MoE (N real experts,
// no null machinery). Shares the execution primitives so the comparison with
// the M = 0 layer isolates the null-expansion logic.
struct StandardMoEResult {
  Matrix y;
  Matrix dx;
  Matrix drouter;
  ExpertBankGrads dbank;
  Scalar balance = 0;
  Scalar z = 0;
  Matrix drouter_aux;
  Matrix dx_aux;
};
StandardMoEResult reference_standard_moe(const LayerParams& p, const Matrix& x, int k_max,
                                         const Matrix& dy, Scalar w_bal, Scalar w_z);

// Verification suites behind `nullmoe verify`. Counts scale with `thorough`
// (the acceptance suite runs the full counts).
CheckList check_gradients(uint64_t seed, bool thorough = false);
CheckList check_dispatch(uint64_t seed, bool thorough = false);
CheckList check_router(uint64_t seed, bool thorough = false);
CheckList check_losses(uint64_t seed, bool thorough = false);
CheckList run_check_suite(const std::string& suite, uint64_t seed, bool thorough = false);
bool known_check_suite(const std::string& suite);

// Dense-fallback comparison: layer with M = 0 against the standard reference,
// forward and every gradient compared bitwise. Returns the mismatch count.
CheckResult check_dense_fallback(uint64_t seed, int instances);

// Threshold-vs-expanded equivalence on random tokens (M >= k_max).
CheckResult check_threshold_equivalence(uint64_t seed, int tokens);

// Solution-space recovery: a K^{2k'}_{0.5} layer constructed to select k'
// real + k' null per token against the K^{k'}_{1.0} layer, plus the
// copy-variant counterpart which must miss by a strict margin.
struct RecoveryResult {
  CheckResult zero_variant;
  CheckResult copy_variant;
};
RecoveryResult check_solution_space_recovery(uint64_t seed);

// Router-only training with L_bal on fixed random tokens; realized E[K]
// should converge to k_max * rho'.
struct SparsityCellResult {
  double realized_ek = 0;
  double target = 0;
  double rel_err = 0;
  bool pass = false;
};
SparsityCellResult sparsity_control_cell(int n_experts, int k_max, double rho, uint64_t seed,
                                         int steps = 1200, int tokens = 2048);

}  // namespace nullmoe
