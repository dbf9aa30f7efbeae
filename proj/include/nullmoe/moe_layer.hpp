#pragma once

#include "nullmoe/dispatch.hpp"
#include "nullmoe/experts.hpp"
#include "nullmoe/losses.hpp"
#include "nullmoe/router.hpp"

namespace nullmoe {

// One MoE layer: y = E_shared(x) + sum_i g_i * E_i(x), with the routed sum
// running through the grouped dispatch. The zero variant contributes nothing
// for null slots; the copy variant adds the un-renormalized null gate mass
// times the input and leaves real gates un-renormalized.
struct LayerParams {
  Matrix router_w;  // (N + 1) x D; last row produces the single null logit
  ExpertBank bank;

  static LayerParams init(const RoutingConfig& cfg, int d_model, int hidden, Rng& rng);
};

struct LayerGrads {
  Matrix router_w;
  ExpertBankGrads bank;

  static LayerGrads zeros_like(const LayerParams& p);
  void set_zero();
};

struct LayerState {
  Matrix x;                // input batch (kept for backward)
  Matrix logits;           // T x (N + 1)
  RoutingConfig cfg;       // effective config (nulls masked during dense warmup)
  RoutingDecision decision;
  DispatchPlan plan;
  GroupedState grouped;
  FfnState shared_state;
  bool dense_warmup = false;
};

// dense_warmup masks the null slots (M treated as 0) and routes top-k_max
// over the real experts with zero-variant gating.
Matrix layer_forward(const LayerParams& p, const Matrix& x, const RoutingConfig& cfg,
                     bool dense_warmup, LayerState* save);

// Task-path backward. Gradients flow through gate values and expert outputs;
// the top-k selection set itself carries zero gradient. Accumulates into dx
// (must be presized T x D) and grads.
void layer_backward(const LayerParams& p, const LayerState& state, const Matrix& dy, Matrix& dx,
                    LayerGrads& grads);

// Pushes a router-logit gradient into the weight and input gradients:
// drouter_w += dlogits^T x, dx += dlogits W. Single definition so every
// caller accumulates with identical arithmetic.
void apply_logit_grads(const Matrix& dlogits, const Matrix& x, const Matrix& router_w,
                       Matrix& drouter_w, Matrix& dx);

struct AuxLosses {
  Scalar balance = 0;
  Scalar z = 0;
  RoutingStats stats;
};

AuxLosses aux_losses(const LayerState& state);

// Adds d(w_bal * L_bal + w_z * L_z) to dx and grads.router_w. f is treated
// as a stop-gradient constant; P and the z term flow through the expanded
// softmax with the M null copies tied to the single null row.
void aux_backward(const LayerParams& p, const LayerState& state, const RoutingStats& stats,
                  Scalar w_bal, Scalar w_z, Matrix& dx, LayerGrads& grads);

}  // namespace nullmoe
