#pragma once

#include "nullmoe/router.hpp"
#include "nullmoe/types.hpp"

namespace nullmoe {

// Per-slot routing statistics over the expanded pool. f is the fraction of
// routed selections per slot (each token contributes k_max selections); P is
// the mean expanded-softmax probability. Null selections are pooled and split
// evenly across the M copies, matching the expectation of random copy
// assignment instead of the deterministic tie order.
struct RoutingStats {
  Vector f;  // length N + M
  Vector P;  // length N + M
  Index n_tokens = 0;
  int n_experts = 0;
  int n_null_copies = 0;

  int n_slots() const { return n_experts + n_null_copies; }
  // Total selection mass on null slots.
  double null_fraction() const;
};

RoutingStats routing_stats(const RoutingDecision& decision);

// L_bal = (N + M) * sum_i f_i * P_i. f is a constant w.r.t. parameters;
// gradient flows through P only.
Scalar load_balance_loss(const RoutingStats& stats);

// L_z = mean over tokens of log^2(sum_i exp(logit_i)) over the expanded
// logits, stabilized by max subtraction.
Scalar z_loss(const Matrix& expanded_logits);
Scalar z_loss_from_lse(const Vector& lse);

struct LossWeights {
  Scalar balance = Scalar(0.02);
  Scalar z = Scalar(0.001);
};

Scalar total_loss(Scalar task, Scalar balance, Scalar z, const LossWeights& w = {});

// Gradient of w_bal * L_bal + w_z * L_z with respect to the raw router
// logits, T x (N+1); the M null copies tie back to the single null column.
// f is a stop-gradient constant; the balance term flows through the expanded
// softmax, the z term through the log-sum-exp directly.
Matrix loss_logit_grads(const RoutingDecision& decision, const RoutingStats& stats, Scalar w_bal,
                        Scalar w_z);

}  // namespace nullmoe
