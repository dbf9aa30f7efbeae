#pragma once

#include "nullmoe/numerics.hpp"
#include "nullmoe/types.hpp"

namespace nullmoe {

enum class NullVariant { kZero, kCopy };

inline const char* null_variant_name(NullVariant v) {
  return v == NullVariant::kZero ? "zero" : "copy";
}

// Number of duplicated null logits for n real experts at target sparsity rho:
// round(n * (1 - rho) / rho). rho outside (0, 1] is a config error.
int compute_null_copies(int n_experts, double rho);

struct RoutingConfig {
  int n_experts = 0;      // N
  int k_max = 0;          // top-K over the expanded pool
  double rho = 1.0;       // target data sparsity, (0, 1]
  NullVariant null_variant = NullVariant::kZero;
  int n_null_copies = 0;  // M, derived from rho
  bool use_shared_expert = true;

  static RoutingConfig make(int n_experts, int k_max, double rho,
                            NullVariant variant = NullVariant::kZero,
                            bool use_shared_expert = true);

  int n_slots() const { return n_experts + n_null_copies; }
  // rho' = N / (N + M); equals rho exactly when M is integral.
  double realized_rho() const {
    return static_cast<double>(n_experts) / static_cast<double>(n_slots());
  }
  // Masked copy used during dense warmup: nulls removed, plain top-k_max.
  RoutingConfig masked() const;
  void validate() const;
};

// Target expected number of real experts per token: k_max * rho.
double expected_active(const RoutingConfig& cfg);

// Routing outcome for a batch. Slot ids are expanded ids in selection order
// (ids >= n_experts are null copies). gates holds, per (token, selection
// slot): the renormalized weight over selected real experts for the zero
// variant, the raw expanded-softmax probability for the copy variant, and
// exactly 0 for null slots. The expanded softmax itself is kept in compact
// form: per-real-slot probabilities plus the (shared) per-copy null
// probability and the expanded log-sum-exp.
struct RoutingDecision {
  int n_tokens = 0;
  int n_experts = 0;
  int n_null_copies = 0;
  int k_max = 0;
  NullVariant null_variant = NullVariant::kZero;

  IntVector real_count;  // T: r per token
  IntMatrix slot_ids;    // T x k_max
  Matrix gates;          // T x k_max
  Matrix real_probs;     // T x N expanded-softmax mass on the real slots
  Vector null_prob;      // T: per-copy null probability (0 when M = 0)
  Vector lse;            // T: log-sum-exp over the expanded logits

  int n_slots() const { return n_experts + n_null_copies; }
  // Materializes the full T x (N + M) expanded softmax (tests, oracles).
  Matrix expanded_probs() const;
  // Mean real-slot count per token.
  double realized_expected_active() const;
  // Fraction of tokens with r == 0.
  double zero_real_fraction() const;
};

// Null-expanded routing from precomputed logits (T x (N+1); last column is
// the single null logit). Selection runs an explicit top-k over the expanded
// (N+M)-vector with tie order (logit desc, real before null, index asc).
RoutingDecision route_from_logits(const Matrix& logits, const RoutingConfig& cfg);

// Thresholding formulation: r = #real logits above the null logit (ties count
// as real), clamped to [k_max - M, k_max]. Must produce decisions identical
// to route_from_logits on every input.
RoutingDecision route_thresholded(const Matrix& logits, const RoutingConfig& cfg);

// Convenience: logits = x * W^T with W (N+1) x D, then route_from_logits.
RoutingDecision route(const Matrix& x, const Matrix& router_w, const RoutingConfig& cfg);
RoutingDecision route(const TokenBatch& batch, const Matrix& router_w, const RoutingConfig& cfg);

}  // namespace nullmoe
