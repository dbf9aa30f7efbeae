#include "nullmoe/dispatch.hpp"

namespace nullmoe {

DispatchPlan build_plan(const RoutingDecision& d) {
  DispatchPlan plan;
  plan.n_tokens = d.n_tokens;
  plan.k_max = d.k_max;
  plan.n_experts = d.n_experts;
  plan.n_slots = d.n_slots();

  const Index total = static_cast<Index>(d.n_tokens) * d.k_max;
  std::vector<Index> keys(static_cast<size_t>(total));
  for (int t = 0; t < d.n_tokens; ++t)
    for (int c = 0; c < d.k_max; ++c)
      keys[static_cast<size_t>(t) * d.k_max + c] = d.slot_ids(t, c);

  plan.order = stable_argsort(keys);
  plan.num_per_expert.assign(static_cast<size_t>(plan.n_slots), 0);
  for (Index key : keys) ++plan.num_per_expert[static_cast<size_t>(key)];

  plan.num_real = 0;
  for (int i = 0; i < plan.n_experts; ++i) plan.num_real += plan.num_per_expert[static_cast<size_t>(i)];

  plan.sorted_tokens.resize(static_cast<size_t>(total));
  plan.sorted_gates.resize(total);
  for (Index j = 0; j < total; ++j) {
    Index flat = plan.order[static_cast<size_t>(j)];
    Index t = flat / d.k_max;
    Index c = flat % d.k_max;
    plan.sorted_tokens[static_cast<size_t>(j)] = t;
    plan.sorted_gates(j) = d.gates(t, c);
  }

  plan.real_offsets.resize(static_cast<size_t>(plan.n_experts) + 1);
  plan.real_offsets[0] = 0;
  for (int i = 0; i < plan.n_experts; ++i)
    plan.real_offsets[static_cast<size_t>(i) + 1] =
        plan.real_offsets[static_cast<size_t>(i)] + plan.num_per_expert[static_cast<size_t>(i)];
  return plan;
}

Matrix grouped_execute(const Matrix& x, const DispatchPlan& plan, const ExpertBank& bank,
                       GroupedState* save) {
  if (plan.n_tokens != x.rows())
    throw ShapeError("grouped_execute: plan was built for a different batch size");
  if (plan.n_experts != bank.n_experts())
    throw ShapeError("grouped_execute: plan/bank expert count mismatch");

  const Index nr = plan.num_real;
  const Index d_model = x.cols();
  Matrix gathered(nr, d_model);
  for (Index j = 0; j < nr; ++j) gathered.row(j) = x.row(plan.sorted_tokens[static_cast<size_t>(j)]);

  Matrix hidden(nr, bank.hidden);
  Matrix activated(nr, bank.hidden);
  Matrix expert_out(nr, d_model);
  for (int i = 0; i < plan.n_experts; ++i) {
    Index off = plan.real_offsets[static_cast<size_t>(i)];
    Index cnt = plan.real_offsets[static_cast<size_t>(i) + 1] - off;
    if (cnt == 0) continue;
    const FfnParams& e = bank.experts[static_cast<size_t>(i)];
    hidden.middleRows(off, cnt).noalias() = gathered.middleRows(off, cnt) * e.w_in.transpose();
    activated.middleRows(off, cnt) = silu(Matrix(hidden.middleRows(off, cnt)));
    expert_out.middleRows(off, cnt).noalias() = activated.middleRows(off, cnt) * e.w_out.transpose();
  }

  Matrix scaled(nr, d_model);
  for (Index j = 0; j < nr; ++j) scaled.row(j) = expert_out.row(j) * plan.sorted_gates(j);

  Matrix y = scatter_add(Matrix::Zero(x.rows(), d_model),
                         std::span<const Index>(plan.sorted_tokens.data(), static_cast<size_t>(nr)),
                         scaled);
  if (!y.allFinite()) throw NumericError("grouped_execute: non-finite output");

  if (save) {
    save->gathered_x = std::move(gathered);
    save->hidden = std::move(hidden);
    save->activated = std::move(activated);
    save->expert_out = std::move(expert_out);
  }
  return y;
}

void grouped_backward(const Matrix& dy, const Matrix& x, const DispatchPlan& plan,
                      const ExpertBank& bank, const GroupedState& state, Matrix& dx,
                      ExpertBankGrads& dbank, Matrix& dgates) {
  const Index nr = plan.num_real;
  dgates = Matrix::Zero(plan.n_tokens, plan.k_max);

  Matrix dout(nr, x.cols());
  for (Index j = 0; j < nr; ++j) {
    Index flat = plan.order[static_cast<size_t>(j)];
    Index t = flat / plan.k_max;
    Index c = flat % plan.k_max;
    dgates(t, c) = dy.row(t).dot(state.expert_out.row(j));
    dout.row(j) = dy.row(t) * plan.sorted_gates(j);
  }

  Matrix dgathered(nr, x.cols());
  for (int i = 0; i < plan.n_experts; ++i) {
    Index off = plan.real_offsets[static_cast<size_t>(i)];
    Index cnt = plan.real_offsets[static_cast<size_t>(i) + 1] - off;
    if (cnt == 0) continue;
    const FfnParams& e = bank.experts[static_cast<size_t>(i)];
    FfnGrads& g = dbank.experts[static_cast<size_t>(i)];
    auto dout_b = dout.middleRows(off, cnt);
    auto act_b = state.activated.middleRows(off, cnt);
    g.w_out.noalias() += dout_b.transpose() * act_b;
    Matrix dact = dout_b * e.w_out;
    Matrix dhid = silu_backward(Matrix(state.hidden.middleRows(off, cnt)), dact);
    g.w_in.noalias() += dhid.transpose() * state.gathered_x.middleRows(off, cnt);
    dgathered.middleRows(off, cnt).noalias() = dhid * e.w_in;
  }

  for (Index j = 0; j < nr; ++j)
    dx.row(plan.sorted_tokens[static_cast<size_t>(j)]) += dgathered.row(j);
}

Matrix naive_execute(const Matrix& x, const RoutingDecision& d, const ExpertBank& bank) {
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  for (int t = 0; t < d.n_tokens; ++t) {
    for (int c = 0; c < d.k_max; ++c) {
      int id = d.slot_ids(t, c);
      if (id >= d.n_experts) continue;
      const FfnParams& e = bank.experts[static_cast<size_t>(id)];
      Matrix out = ffn_forward(e, x.row(t));
      y.row(t) += d.gates(t, c) * out.row(0);
    }
  }
  return y;
}

void naive_backward(const Matrix& dy, const Matrix& x, const RoutingDecision& d,
                    const ExpertBank& bank, Matrix& dx, ExpertBankGrads& dbank, Matrix& dgates) {
  dgates = Matrix::Zero(d.n_tokens, d.k_max);
  for (int t = 0; t < d.n_tokens; ++t) {
    for (int c = 0; c < d.k_max; ++c) {
      int id = d.slot_ids(t, c);
      if (id >= d.n_experts) continue;
      const FfnParams& e = bank.experts[static_cast<size_t>(id)];
      FfnState st;
      Matrix out = ffn_forward(e, x.row(t), &st);
      dgates(t, c) = dy.row(t).dot(out.row(0));
      Matrix dout = dy.row(t) * d.gates(t, c);
      Matrix dxt = ffn_backward(e, x.row(t), st, dout, dbank.experts[static_cast<size_t>(id)]);
      dx.row(t) += dxt.row(0);
    }
  }
}

FlopCount flop_report(const DispatchPlan& plan, int d_model, int hidden) {
  FlopCount f;
  const int64_t per_block = 2LL * d_model * hidden;  // two matmuls per FFN block
  f.routed_macs = static_cast<int64_t>(plan.num_real) * per_block;
  f.dense_macs = static_cast<int64_t>(plan.n_tokens) * plan.k_max * per_block;
  f.shared_macs = static_cast<int64_t>(plan.n_tokens) * per_block;
  return f;
}

}  // namespace nullmoe
