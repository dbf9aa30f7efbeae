#include "nullmoe/losses.hpp"

#include <cmath>

namespace nullmoe {

double RoutingStats::null_fraction() const {
  double acc = 0;
  for (int c = 0; c < n_null_copies; ++c) acc += f(n_experts + c);
  return acc;
}

RoutingStats routing_stats(const RoutingDecision& d) {
  RoutingStats s;
  s.n_tokens = d.n_tokens;
  s.n_experts = d.n_experts;
  s.n_null_copies = d.n_null_copies;
  s.f = Vector::Zero(d.n_slots());
  s.P = Vector::Zero(d.n_slots());
  if (d.n_tokens == 0) return s;

  const Scalar denom = static_cast<Scalar>(d.n_tokens) * d.k_max;
  Index null_selections = 0;
  for (int t = 0; t < d.n_tokens; ++t) {
    for (int c = 0; c < d.k_max; ++c) {
      int id = d.slot_ids(t, c);
      if (id < d.n_experts)
        s.f(id) += Scalar(1) / denom;
      else
        ++null_selections;
    }
  }
  if (d.n_null_copies > 0) {
    Scalar per_copy = static_cast<Scalar>(null_selections) / denom / d.n_null_copies;
    for (int c = 0; c < d.n_null_copies; ++c) s.f(d.n_experts + c) = per_copy;
  }

  for (int j = 0; j < d.n_experts; ++j) {
    Scalar acc = 0;
    for (int t = 0; t < d.n_tokens; ++t) acc += d.real_probs(t, j);
    s.P(j) = acc / d.n_tokens;
  }
  if (d.n_null_copies > 0) {
    Scalar acc = 0;
    for (int t = 0; t < d.n_tokens; ++t) acc += d.null_prob(t);
    Scalar mean = acc / d.n_tokens;
    for (int c = 0; c < d.n_null_copies; ++c) s.P(d.n_experts + c) = mean;
  }
  return s;
}

Scalar load_balance_loss(const RoutingStats& stats) {
  Scalar acc = 0;
  for (int i = 0; i < stats.n_slots(); ++i) acc += stats.f(i) * stats.P(i);
  return static_cast<Scalar>(stats.n_slots()) * acc;
}

Scalar z_loss(const Matrix& expanded_logits) {
  if (!expanded_logits.allFinite()) throw NumericError("z_loss: non-finite logits");
  const Index t_count = expanded_logits.rows();
  if (t_count == 0) return 0;
  Scalar acc = 0;
  for (Index t = 0; t < t_count; ++t) {
    Scalar m = expanded_logits(t, 0);
    for (Index j = 1; j < expanded_logits.cols(); ++j) m = std::max(m, expanded_logits(t, j));
    Scalar denom = 0;
    for (Index j = 0; j < expanded_logits.cols(); ++j) denom += std::exp(expanded_logits(t, j) - m);
    Scalar lse = m + std::log(denom);
    acc += lse * lse;
  }
  return acc / static_cast<Scalar>(t_count);
}

Scalar z_loss_from_lse(const Vector& lse) {
  if (lse.size() == 0) return 0;
  Scalar acc = 0;
  for (Index t = 0; t < lse.size(); ++t) acc += lse(t) * lse(t);
  return acc / static_cast<Scalar>(lse.size());
}

Scalar total_loss(Scalar task, Scalar balance, Scalar z, const LossWeights& w) {
  return task + w.balance * balance + w.z * z;
}

Matrix loss_logit_grads(const RoutingDecision& d, const RoutingStats& stats, Scalar w_bal,
                        Scalar w_z) {
  const int n = d.n_experts;
  const int m = d.n_null_copies;
  const int slots = n + m;
  const Scalar t_count = static_cast<Scalar>(d.n_tokens);
  Matrix dlogits = Matrix::Zero(d.n_tokens, n + 1);
  if (d.n_tokens == 0) return dlogits;

  // dL_bal/dP_i = (N+M) * f_i and dP_i/ds_{t,i} = 1/T.
  Vector alpha(n);
  for (int j = 0; j < n; ++j) alpha(j) = w_bal * static_cast<Scalar>(slots) * stats.f(j) / t_count;
  const Scalar alpha_null =
      (m > 0) ? w_bal * static_cast<Scalar>(slots) * stats.f(n) / t_count : Scalar(0);

  for (int t = 0; t < d.n_tokens; ++t) {
    const Scalar q = d.null_prob(t);
    // z-loss acts on the log-sum-exp directly: d(lse^2)/dz_i = 2*lse*s_i.
    const Scalar zc = w_z * Scalar(2) / t_count * d.lse(t);
    Scalar inner = 0;
    for (int j = 0; j < n; ++j) inner += alpha(j) * d.real_probs(t, j);
    if (m > 0) inner += static_cast<Scalar>(m) * alpha_null * q;
    for (int j = 0; j < n; ++j)
      dlogits(t, j) = d.real_probs(t, j) * (alpha(j) - inner + zc);
    if (m > 0)
      dlogits(t, n) = static_cast<Scalar>(m) * q * (alpha_null - inner + zc);
  }
  return dlogits;
}

}  // namespace nullmoe
