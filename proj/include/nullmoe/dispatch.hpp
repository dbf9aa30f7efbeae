#pragma once

#include "nullmoe/experts.hpp"
#include "nullmoe/router.hpp"
#include "nullmoe/types.hpp"

#include <cstdint>
#include <vector>

namespace nullmoe {

// Grouped-dispatch plan: flattened (token, slot) selections stably permuted
// by expanded expert id. Null selections sort last because their ids are
// >= n_experts, so the real prefix [0, num_real) feeds the grouped compute.
struct DispatchPlan {
  int n_tokens = 0;
  int k_max = 0;
  int n_experts = 0;
  int n_slots = 0;

  std::vector<Index> order;           // T*k_max: selection slot per sorted position
  std::vector<Index> num_per_expert;  // N+M histogram of selections
  Index num_real = 0;
  std::vector<Index> sorted_tokens;   // T*k_max: token per sorted position
  Vector sorted_gates;                // T*k_max: gate per sorted position (0 on null tail)
  std::vector<Index> real_offsets;    // N+1 prefix sums over real experts
};

DispatchPlan build_plan(const RoutingDecision& decision);

// Activations saved by the grouped forward for its backward pass.
struct GroupedState {
  Matrix gathered_x;  // num_real x D, grouped by expert
  Matrix hidden;      // num_real x H (pre-activation)
  Matrix activated;   // num_real x H
  Matrix expert_out;  // num_real x D (pre-gate expert outputs)
};

// Routed-expert output: y[t] = sum_i gate_i * E_i(x_t) over the token's
// selected real experts. Tokens with r = 0 stay zero rows.
Matrix grouped_execute(const Matrix& x, const DispatchPlan& plan, const ExpertBank& bank,
                       GroupedState* save = nullptr);

// dy -> (dx accumulated, expert grads accumulated, per-(token,slot) gate
// gradients). dgates is resized and zeroed here.
void grouped_backward(const Matrix& dy, const Matrix& x, const DispatchPlan& plan,
                      const ExpertBank& bank, const GroupedState& state, Matrix& dx,
                      ExpertBankGrads& dbank, Matrix& dgates);

// Reference semantics: direct per-token gate-weighted mixture. Ground truth
// for the grouped path.
Matrix naive_execute(const Matrix& x, const RoutingDecision& decision, const ExpertBank& bank);

void naive_backward(const Matrix& dy, const Matrix& x, const RoutingDecision& decision,
                    const ExpertBank& bank, Matrix& dx, ExpertBankGrads& dbank, Matrix& dgates);

// Routed multiply-accumulate counts from the plan histogram; nulls cost zero.
struct FlopCount {
  int64_t routed_macs = 0;   // proportional to num_real
  int64_t dense_macs = 0;    // every slot real: T * k_max blocks
  int64_t shared_macs = 0;   // shared expert over all tokens

  double routed_fraction() const {
    return dense_macs == 0 ? 0.0 : static_cast<double>(routed_macs) / static_cast<double>(dense_macs);
  }
};

FlopCount flop_report(const DispatchPlan& plan, int d_model, int hidden);

}  // namespace nullmoe
