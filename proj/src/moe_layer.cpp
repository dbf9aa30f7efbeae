#include "nullmoe/moe_layer.hpp"

namespace nullmoe {

LayerParams LayerParams::init(const RoutingConfig& cfg, int d_model, int hidden, Rng& rng) {
  LayerParams p;
  p.router_w = rng.gaussian(cfg.n_experts + 1, d_model, 0.02);
  p.bank = ExpertBank::init(cfg.n_experts, d_model, hidden, rng);
  return p;
}

LayerGrads LayerGrads::zeros_like(const LayerParams& p) {
  LayerGrads g;
  g.router_w = Matrix::Zero(p.router_w.rows(), p.router_w.cols());
  g.bank = ExpertBankGrads::zeros_like(p.bank);
  return g;
}

void LayerGrads::set_zero() {
  router_w.setZero();
  bank.set_zero();
}

// noinline: inlining would let the optimizer re-contract the products
// differently per call site, breaking cross-path bit comparisons
__attribute__((noinline)) void apply_logit_grads(const Matrix& dlogits, const Matrix& x,
                                                 const Matrix& router_w, Matrix& drouter_w,
                                                 Matrix& dx) {
  drouter_w.noalias() += dlogits.transpose() * x;
  dx.noalias() += dlogits * router_w;
}

Matrix layer_forward(const LayerParams& p, const Matrix& x, const RoutingConfig& cfg,
                     bool dense_warmup, LayerState* save) {
  if (x.cols() != p.router_w.cols()) throw ShapeError("layer_forward: input width mismatch");
  RoutingConfig effective = dense_warmup ? cfg.masked() : cfg;
  if (dense_warmup) effective.null_variant = NullVariant::kZero;

  Matrix logits = matmul(x, p.router_w.transpose());
  RoutingDecision decision = route_from_logits(logits, effective);
  DispatchPlan plan = build_plan(decision);

  LayerState local;
  LayerState& st = save ? *save : local;
  st.x = x;
  st.logits = std::move(logits);
  st.cfg = effective;
  st.dense_warmup = dense_warmup;

  Matrix routed = grouped_execute(x, plan, p.bank, &st.grouped);

  if (effective.null_variant == NullVariant::kCopy && effective.n_null_copies > 0) {
    for (int t = 0; t < decision.n_tokens; ++t) {
      Scalar mass = static_cast<Scalar>(effective.k_max - decision.real_count(t)) * decision.null_prob(t);
      if (mass != Scalar(0)) routed.row(t) += mass * x.row(t);
    }
  }

  Matrix y;
  if (effective.use_shared_expert) {
    Matrix shared_out = ffn_forward(p.bank.shared, x, &st.shared_state);
    y = shared_out + routed;
  } else {
    y = std::move(routed);
  }

  st.decision = std::move(decision);
  st.plan = std::move(plan);
  return y;
}

namespace {

// dgates -> d(selected real logits) for the zero variant: jacobian of the
// softmax restricted to the selected real experts.
void gate_backward_zero(const LayerState& st, const Matrix& dgates, Matrix& dlogits) {
  const RoutingDecision& d = st.decision;
  for (int t = 0; t < d.n_tokens; ++t) {
    if (d.real_count(t) == 0) continue;
    Scalar dot = 0;
    for (int c = 0; c < d.k_max; ++c)
      if (d.slot_ids(t, c) < d.n_experts) dot += dgates(t, c) * d.gates(t, c);
    for (int c = 0; c < d.k_max; ++c) {
      int id = d.slot_ids(t, c);
      if (id < d.n_experts) dlogits(t, id) += d.gates(t, c) * (dgates(t, c) - dot);
    }
  }
}

// Copy variant: gates are raw expanded-softmax values and the selected null
// copies contribute gate * x each, so the jacobian runs over the full
// expanded softmax with the M copies tied to the single null logit column.
void gate_backward_copy(const LayerState& st, const Matrix& dy, const Matrix& dgates,
                        Matrix& dlogits, Matrix& dx) {
  const RoutingDecision& d = st.decision;
  const int n = d.n_experts;
  for (int t = 0; t < d.n_tokens; ++t) {
    const int n_null_sel = d.k_max - d.real_count(t);
    const Scalar q = d.null_prob(t);
    Scalar ds_null = 0;  // per selected copy
    if (n_null_sel > 0) {
      ds_null = dy.row(t).dot(st.x.row(t));
      dx.row(t) += static_cast<Scalar>(n_null_sel) * q * dy.row(t);
    }
    Scalar inner = 0;
    for (int c = 0; c < d.k_max; ++c) {
      int id = d.slot_ids(t, c);
      if (id < n) inner += dgates(t, c) * d.real_probs(t, id);
    }
    inner += static_cast<Scalar>(n_null_sel) * q * ds_null;
    for (int c = 0; c < d.k_max; ++c) {
      int id = d.slot_ids(t, c);
      if (id < n) dlogits(t, id) += d.real_probs(t, id) * (dgates(t, c) - inner);
    }
    // unselected real slots still move through the shared normalizer
    for (int j = 0; j < n; ++j) {
      bool selected = false;
      for (int c = 0; c < d.k_max; ++c)
        if (d.slot_ids(t, c) == j) { selected = true; break; }
      if (!selected) dlogits(t, j) += d.real_probs(t, j) * (Scalar(0) - inner);
    }
    if (d.n_null_copies > 0)
      dlogits(t, n) += q * (static_cast<Scalar>(n_null_sel) * ds_null -
                            static_cast<Scalar>(d.n_null_copies) * inner);
  }
}

}  // namespace

void layer_backward(const LayerParams& p, const LayerState& st, const Matrix& dy, Matrix& dx,
                    LayerGrads& grads) {
  if (st.x.rows() == 0) throw NumericError("layer_backward: missing saved state");
  if (dy.rows() != st.x.rows() || dy.cols() != st.x.cols())
    throw ShapeError("layer_backward: dy shape mismatch");

  if (st.cfg.use_shared_expert)
    dx += ffn_backward(p.bank.shared, st.x, st.shared_state, dy, grads.bank.shared);

  Matrix dgates;
  grouped_backward(dy, st.x, st.plan, p.bank, st.grouped, dx, grads.bank, dgates);

  Matrix dlogits = Matrix::Zero(st.x.rows(), st.cfg.n_experts + 1);
  if (st.cfg.null_variant == NullVariant::kCopy)
    gate_backward_copy(st, dy, dgates, dlogits, dx);
  else
    gate_backward_zero(st, dgates, dlogits);

  apply_logit_grads(dlogits, st.x, p.router_w, grads.router_w, dx);
}

AuxLosses aux_losses(const LayerState& st) {
  AuxLosses out;
  out.stats = routing_stats(st.decision);
  out.balance = load_balance_loss(out.stats);
  out.z = z_loss_from_lse(st.decision.lse);
  return out;
}

void aux_backward(const LayerParams& p, const LayerState& st, const RoutingStats& stats,
                  Scalar w_bal, Scalar w_z, Matrix& dx, LayerGrads& grads) {
  if (st.decision.n_tokens == 0) return;
  Matrix dlogits = loss_logit_grads(st.decision, stats, w_bal, w_z);
  apply_logit_grads(dlogits, st.x, p.router_w, grads.router_w, dx);
}

}  // namespace nullmoe
