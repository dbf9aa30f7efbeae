#include "nullmoe/experts.hpp"

namespace nullmoe {

Matrix ffn_forward(const FfnParams& p, const Matrix& x, FfnState* save) {
  Matrix hidden = matmul(x, p.w_in.transpose());
  Matrix activated = silu(hidden);
  Matrix y = matmul(activated, p.w_out.transpose());
  if (save) {
    save->hidden = std::move(hidden);
    save->activated = std::move(activated);
  }
  return y;
}

Matrix ffn_backward(const FfnParams& p, const Matrix& x, const FfnState& state, const Matrix& dy,
                    FfnGrads& grads) {
  grads.w_out += dy.transpose() * state.activated;
  Matrix dact = dy * p.w_out;
  Matrix dhidden = silu_backward(state.hidden, dact);
  grads.w_in += dhidden.transpose() * x;
  return dhidden * p.w_in;
}

ExpertBank ExpertBank::init(int n_experts, int d_model, int hidden, Rng& rng) {
  ExpertBank bank;
  bank.d_model = d_model;
  bank.hidden = hidden;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double out_std = 1.0 / std::sqrt(static_cast<double>(hidden));
  bank.experts.reserve(static_cast<size_t>(n_experts));
  for (int i = 0; i < n_experts; ++i)
    bank.experts.push_back({rng.gaussian(hidden, d_model, in_std), rng.gaussian(d_model, hidden, out_std)});
  bank.shared = {rng.gaussian(hidden, d_model, in_std), rng.gaussian(d_model, hidden, out_std)};
  return bank;
}

Index ExpertBank::parameter_count() const {
  Index per_block = 2 * static_cast<Index>(d_model) * hidden;
  return (static_cast<Index>(experts.size()) + 1) * per_block;
}

ExpertBankGrads ExpertBankGrads::zeros_like(const ExpertBank& bank) {
  ExpertBankGrads g;
  g.experts.resize(bank.experts.size());
  auto zero_block = [&](FfnGrads& fg) {
    fg.w_in = Matrix::Zero(bank.hidden, bank.d_model);
    fg.w_out = Matrix::Zero(bank.d_model, bank.hidden);
  };
  for (auto& e : g.experts) zero_block(e);
  zero_block(g.shared);
  return g;
}

void ExpertBankGrads::set_zero() {
  for (auto& e : experts) {
    e.w_in.setZero();
    e.w_out.setZero();
  }
  shared.w_in.setZero();
  shared.w_out.setZero();
}

}  // namespace nullmoe
