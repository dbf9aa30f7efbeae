#include "nullmoe/checks.hpp"

#include "nullmoe/dispatch.hpp"
#include "nullmoe/losses.hpp"
#include "nullmoe/rng.hpp"
#include "nullmoe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nullmoe {

namespace {

bool bits_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<size_t>(a.size())) == 0;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff();
}

CheckResult make_result(std::string name, bool pass, double err, std::string detail = {}) {
  return CheckResult{std::move(name), pass, err, std::move(detail)};
}

// Random logits with every pairwise candidate gap above `margin`, so finite
// differencing never crosses a selection boundary.
Matrix safe_random_logits(Rng& rng, int tokens, int n_experts, double scale, double margin,
                          double null_bias = 0.0) {
  Matrix logits(tokens, n_experts + 1);
  for (int t = 0; t < tokens; ++t) {
    bool ok = false;
    while (!ok) {
      for (int j = 0; j <= n_experts; ++j)
        logits(t, j) = static_cast<Scalar>(scale * rng.normal() + (j == n_experts ? null_bias : 0.0));
      ok = true;
      for (int a = 0; a <= n_experts && ok; ++a)
        for (int b = a + 1; b <= n_experts && ok; ++b)
          if (std::abs(logits(t, a) - logits(t, b)) < margin) ok = false;
    }
  }
  return logits;
}

// Solves for token activations that produce prescribed router logits:
// x = W^+ z (min-norm least squares).
Matrix tokens_for_logits(const Matrix& w_real, const Matrix& target_logits) {
  auto cod = w_real.completeOrthogonalDecomposition();
  Matrix x(target_logits.rows(), w_real.cols());
  for (Index t = 0; t < target_logits.rows(); ++t)
    x.row(t) = cod.solve(target_logits.row(t).transpose()).transpose();
  return x;
}

}  // namespace

double fd_relative_error(const std::function<double()>& f, Matrix& param, const Matrix& analytic,
                         double h) {
  Matrix fd(param.rows(), param.cols());
  for (Index r = 0; r < param.rows(); ++r) {
    for (Index c = 0; c < param.cols(); ++c) {
      const Scalar saved = param(r, c);
      param(r, c) = saved + static_cast<Scalar>(h);
      double f1 = f();
      param(r, c) = saved - static_cast<Scalar>(h);
      double f2 = f();
      param(r, c) = saved;
      fd(r, c) = static_cast<Scalar>((f1 - f2) / (2.0 * h));
    }
  }
  // floor keeps legitimately tiny gradients (e.g. a batch whose slot loads
  // happen to be perfectly uniform) from degenerating into 0/0 noise ratios
  double denom = std::max({static_cast<double>(fd.norm()),
                           static_cast<double>(analytic.norm()), 1e-4});
  return (analytic - fd).norm() / denom;
}

// ---------------------------------------------------------------------------
// Standard top-k token-choice MoE reference (no null machinery)
// ---------------------------------------------------------------------------

StandardMoEResult reference_standard_moe(const LayerParams& p, const Matrix& x, int k_max,
                                         const Matrix& dy, Scalar w_bal, Scalar w_z) {
  const int n = p.bank.n_experts();
  const int t_count = static_cast<int>(x.rows());
  Matrix logits = matmul(x, p.router_w.transpose());

  RoutingDecision d;
  d.n_tokens = t_count;
  d.n_experts = n;
  d.n_null_copies = 0;
  d.k_max = k_max;
  d.null_variant = NullVariant::kZero;
  d.real_count = IntVector::Constant(t_count, k_max);
  d.slot_ids.resize(t_count, k_max);
  d.gates.resize(t_count, k_max);
  d.real_probs.resize(t_count, n);
  d.null_prob = Vector::Zero(t_count);
  d.lse.resize(t_count);

  std::vector<int> order(static_cast<size_t>(n));
  for (int t = 0; t < t_count; ++t) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k_max, order.end(), [&](int a, int b) {
      if (logits(t, a) != logits(t, b)) return logits(t, a) > logits(t, b);
      return a < b;
    });
    for (int c = 0; c < k_max; ++c) d.slot_ids(t, c) = order[static_cast<size_t>(c)];

    // softmax over the N real logits
    Scalar mx = logits(t, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, logits(t, j));
    Scalar denom = 0;
    for (int j = 0; j < n; ++j) {
      d.real_probs(t, j) = std::exp(logits(t, j) - mx);
      denom += d.real_probs(t, j);
    }
    for (int j = 0; j < n; ++j) d.real_probs(t, j) /= denom;
    d.lse(t) = mx + std::log(denom);

    // gates: softmax over the selected logits
    Scalar gmx = -std::numeric_limits<Scalar>::infinity();
    for (int c = 0; c < k_max; ++c) gmx = std::max(gmx, logits(t, d.slot_ids(t, c)));
    Scalar gdenom = 0;
    for (int c = 0; c < k_max; ++c) {
      d.gates(t, c) = std::exp(logits(t, d.slot_ids(t, c)) - gmx);
      gdenom += d.gates(t, c);
    }
    for (int c = 0; c < k_max; ++c) d.gates(t, c) /= gdenom;
  }

  StandardMoEResult out;
  DispatchPlan plan = build_plan(d);
  GroupedState gstate;
  Matrix routed = grouped_execute(x, plan, p.bank, &gstate);
  FfnState shared_state;
  Matrix shared_out = ffn_forward(p.bank.shared, x, &shared_state);
  out.y = shared_out + routed;

  // task-path backward, mirroring the production op order
  out.dbank = ExpertBankGrads::zeros_like(p.bank);
  out.dx = Matrix::Zero(x.rows(), x.cols());
  out.dx += ffn_backward(p.bank.shared, x, shared_state, dy, out.dbank.shared);
  Matrix dgates;
  grouped_backward(dy, x, plan, p.bank, gstate, out.dx, out.dbank, dgates);

  Matrix dlogits = Matrix::Zero(t_count, n + 1);
  for (int t = 0; t < t_count; ++t) {
    Scalar dot = 0;
    for (int c = 0; c < k_max; ++c) dot += dgates(t, c) * d.gates(t, c);
    for (int c = 0; c < k_max; ++c)
      dlogits(t, d.slot_ids(t, c)) += d.gates(t, c) * (dgates(t, c) - dot);
  }
  out.drouter = Matrix::Zero(n + 1, x.cols());
  apply_logit_grads(dlogits, x, p.router_w, out.drouter, out.dx);

  // auxiliary losses over the N real slots
  RoutingStats stats = routing_stats(d);
  out.balance = load_balance_loss(stats);
  out.z = z_loss_from_lse(d.lse);
  Matrix daux = loss_logit_grads(d, stats, w_bal, w_z);
  out.drouter_aux = Matrix::Zero(n + 1, x.cols());
  out.dx_aux = Matrix::Zero(x.rows(), x.cols());
  apply_logit_grads(daux, x, p.router_w, out.drouter_aux, out.dx_aux);
  return out;
}

// ---------------------------------------------------------------------------
// Dense fallback (M = 0 bit identity)
// ---------------------------------------------------------------------------

CheckResult check_dense_fallback(uint64_t seed, int instances) {
  int mismatches = 0;
  double worst = 0;
  for (int i = 0; i < instances; ++i) {
    Rng rng(Rng::mix(seed, 0xdf01ULL + static_cast<uint64_t>(i)));
    const int n = 4 + rng.uniform_int(8);
    const int k = 1 + rng.uniform_int(std::min(n, 4));
    const int d_model = 6 + rng.uniform_int(8);
    const int hidden = 6 + rng.uniform_int(8);
    const int t_count = 8 + rng.uniform_int(24);

    RoutingConfig cfg = RoutingConfig::make(n, k, 1.0);
    LayerParams p = LayerParams::init(cfg, d_model, hidden, rng);
    p.router_w *= Scalar(40);  // spread logits so selections are well-defined
    Matrix x = rng.gaussian(t_count, d_model);
    Matrix dy = rng.gaussian(t_count, d_model);

    LayerState st;
    Matrix y = layer_forward(p, x, cfg, false, &st);
    LayerGrads grads = LayerGrads::zeros_like(p);
    Matrix dx = Matrix::Zero(t_count, d_model);
    layer_backward(p, st, dy, dx, grads);
    AuxLosses aux = aux_losses(st);
    LayerGrads grads_aux = LayerGrads::zeros_like(p);
    Matrix dx_aux = Matrix::Zero(t_count, d_model);
    aux_backward(p, st, aux.stats, Scalar(1), Scalar(1), dx_aux, grads_aux);

    StandardMoEResult ref = reference_standard_moe(p, x, k, dy, Scalar(1), Scalar(1));

    bool same = bits_equal(y, ref.y) && bits_equal(dx, ref.dx) &&
                bits_equal(grads.router_w, ref.drouter) &&
                bits_equal(grads_aux.router_w, ref.drouter_aux) && bits_equal(dx_aux, ref.dx_aux);
    same = same && aux.balance == ref.balance && aux.z == ref.z;
    same = same && bits_equal(grads.bank.shared.w_in, ref.dbank.shared.w_in) &&
           bits_equal(grads.bank.shared.w_out, ref.dbank.shared.w_out);
    for (int e = 0; e < n && same; ++e)
      same = bits_equal(grads.bank.experts[static_cast<size_t>(e)].w_in,
                        ref.dbank.experts[static_cast<size_t>(e)].w_in) &&
             bits_equal(grads.bank.experts[static_cast<size_t>(e)].w_out,
                        ref.dbank.experts[static_cast<size_t>(e)].w_out);
    if (!same) {
      ++mismatches;
      worst = std::max(worst, max_abs_diff(y, ref.y));
      worst = std::max(worst, max_abs_diff(dx, ref.dx));
      worst = std::max(worst, max_abs_diff(grads.router_w, ref.drouter));
    }
  }
  return make_result("dense_fallback_bit_identity", mismatches == 0, worst,
                     std::to_string(instances) + " instances, " + std::to_string(mismatches) +
                         " mismatches");
}

// ---------------------------------------------------------------------------
// Threshold-vs-expanded equivalence
// ---------------------------------------------------------------------------

namespace {

bool decisions_identical(const RoutingDecision& a, const RoutingDecision& b) {
  if (a.n_tokens != b.n_tokens || a.k_max != b.k_max) return false;
  for (int t = 0; t < a.n_tokens; ++t) {
    if (a.real_count(t) != b.real_count(t)) return false;
    for (int c = 0; c < a.k_max; ++c)
      if (a.slot_ids(t, c) != b.slot_ids(t, c)) return false;
  }
  return bits_equal(a.gates, b.gates) && bits_equal(a.real_probs, b.real_probs) &&
         bits_equal(Matrix(a.null_prob), Matrix(b.null_prob)) &&
         bits_equal(Matrix(a.lse), Matrix(b.lse));
}

}  // namespace

CheckResult check_threshold_equivalence(uint64_t seed, int tokens) {
  int done = 0, mismatches = 0, chunk_id = 0;
  while (done < tokens) {
    Rng rng(Rng::mix(seed, 0x7e01ULL + static_cast<uint64_t>(chunk_id++)));
    const int n = 4 + rng.uniform_int(16);
    const int k = 1 + rng.uniform_int(std::min(n, 8));
    // rho low enough that M >= k_max
    const double rho_max = static_cast<double>(n) / (n + k);
    const double rho = std::min(rho_max, 0.15 + 0.6 * rng.uniform());
    RoutingConfig cfg = RoutingConfig::make(n, k, rho);
    if (cfg.n_null_copies < k) {
      continue;  // rounding edge; resample
    }
    const int t_count = std::min(512, tokens - done);
    Matrix logits = rng.gaussian(t_count, n + 1, 1.5);
    RoutingDecision a = route_from_logits(logits, cfg);
    RoutingDecision b = route_thresholded(logits, cfg);
    if (!decisions_identical(a, b)) ++mismatches;
    done += t_count;
  }
  return make_result("threshold_expansion_equivalence", mismatches == 0,
                     static_cast<double>(mismatches),
                     std::to_string(tokens) + " tokens, " + std::to_string(mismatches) +
                         " mismatched chunks");
}

// ---------------------------------------------------------------------------
// Solution-space recovery
// ---------------------------------------------------------------------------

RecoveryResult check_solution_space_recovery(uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x50faceULL));
  const int n = 8, d_model = 16, hidden = 12, t_count = 40, k_dense = 2;

  Matrix w_real = rng.gaussian(n, d_model);
  // prescribed logits: exactly 2 experts above zero per token, the rest below
  Matrix target_logits(t_count, n);
  for (int t = 0; t < t_count; ++t) {
    int a = rng.uniform_int(n);
    int b = (a + 1 + rng.uniform_int(n - 1)) % n;
    for (int j = 0; j < n; ++j)
      target_logits(t, j) = static_cast<Scalar>((j == a || j == b) ? rng.uniform(0.8, 1.6)
                                                                   : rng.uniform(-1.6, -0.8));
  }
  Matrix x = tokens_for_logits(w_real, target_logits);

  RoutingConfig sparse_cfg = RoutingConfig::make(n, 2 * k_dense, 0.5);
  RoutingConfig dense_cfg = RoutingConfig::make(n, k_dense, 1.0);

  LayerParams sparse = LayerParams::init(sparse_cfg, d_model, hidden, rng);
  sparse.router_w.topRows(n) = w_real;
  sparse.router_w.row(n).setZero();  // null logit 0: between the 2nd and 3rd real logit
  LayerParams dense;
  dense.router_w = sparse.router_w;
  dense.bank = sparse.bank;

  LayerState sparse_state, dense_state;
  Matrix y_sparse = layer_forward(sparse, x, sparse_cfg, false, &sparse_state);
  Matrix y_dense = layer_forward(dense, x, dense_cfg, false, &dense_state);

  bool select_ok = true;
  for (int t = 0; t < t_count; ++t) select_ok &= sparse_state.decision.real_count(t) == k_dense;
  double err = max_abs_diff(y_sparse, y_dense);

  RecoveryResult out;
  out.zero_variant = make_result("solution_space_recovery.zero", select_ok && err < 1e-10, err,
                                 "2 real + 2 null vs top-2 dense");

  // Copy-variant counterpart: no null-logit setting reproduces the dense
  // output. Tokens are shifted along a direction orthogonal to the real
  // router rows so a single weight row can realize any constant null logit.
  Vector v = rng.gaussian_vector(d_model);
  auto cod = w_real.completeOrthogonalDecomposition();
  // cod.solve(W v) is the min-norm preimage of W v, i.e. the projection of v
  // onto the row space; subtracting it leaves the orthogonal component
  Vector u = v - cod.solve(w_real * v);
  Matrix x_shift = x;
  for (int t = 0; t < t_count; ++t) x_shift.row(t) += u.transpose();

  LayerState dense_shift_state;
  Matrix y_dense_shift = layer_forward(dense, x_shift, dense_cfg, false, &dense_shift_state);

  RoutingConfig copy_cfg = sparse_cfg;
  copy_cfg.null_variant = NullVariant::kCopy;
  LayerParams copy_layer;
  copy_layer.bank = sparse.bank;
  copy_layer.router_w = sparse.router_w;
  const Scalar u2 = u.squaredNorm();

  double best = std::numeric_limits<double>::infinity();
  for (double c = -8.0; c <= 8.0 + 1e-9; c += 0.25) {
    copy_layer.router_w.row(n) = (static_cast<Scalar>(c) / u2) * u.transpose();
    Matrix y_copy = layer_forward(copy_layer, x_shift, copy_cfg, false, nullptr);
    best = std::min(best, max_abs_diff(y_copy, y_dense_shift));
  }
  out.copy_variant = make_result("solution_space_recovery.copy_margin", best > 1e-2, best,
                                 "min distance over null-logit grid");
  return out;
}

// ---------------------------------------------------------------------------
// Sparsity control (router-only L_bal training)
// ---------------------------------------------------------------------------

SparsityCellResult sparsity_control_cell(int n_experts, int k_max, double rho, uint64_t seed,
                                         int steps, int tokens) {
  const int d_model = 32;
  Rng rng(Rng::mix(seed, 0x5ba1ULL));
  RoutingConfig cfg = RoutingConfig::make(n_experts, k_max, rho);
  Matrix x = rng.gaussian(tokens, d_model);
  Matrix w = rng.gaussian(n_experts + 1, d_model, 0.02);

  TrainConfig opt;
  opt.lr_peak = 1.0;
  opt.lr_mult = 1.0;
  opt.weight_decay = 0.0;
  opt.total_steps = steps;

  AdamState adam;
  const int tail_start = steps - std::max(1, steps / 5);
  double tail_sum = 0;
  int tail_n = 0;
  for (int step = 0; step < steps; ++step) {
    Matrix logits = matmul(x, w.transpose());
    RoutingDecision d = route_from_logits(logits, cfg);
    RoutingStats stats = routing_stats(d);
    Matrix dlogits = loss_logit_grads(d, stats, Scalar(1), Scalar(0));
    Matrix dw = dlogits.transpose() * x;
    adamw_step(w, dw, adam, opt, 4e-3, step + 1);
    if (step >= tail_start) {
      tail_sum += d.realized_expected_active();
      ++tail_n;
    }
  }

  SparsityCellResult res;
  res.realized_ek = tail_sum / std::max(1, tail_n);
  res.target = k_max * cfg.realized_rho();
  res.rel_err = std::abs(res.realized_ek - res.target) / res.target;
  res.pass = res.rel_err <= 0.05;
  return res;
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

namespace {

CheckResult fd_many(const std::string& name, uint64_t seed, int instances, double tol,
                    const std::function<double(Rng&)>& one) {
  double worst = 0;
  for (int i = 0; i < instances; ++i) {
    Rng rng(Rng::mix(Rng::mix(seed, std::hash<std::string>{}(name)), static_cast<uint64_t>(i)));
    worst = std::max(worst, one(rng));
  }
  return make_result(name, worst < tol, worst, std::to_string(instances) + " instances");
}

struct LayerFdSetup {
  RoutingConfig cfg;
  LayerParams params;
  Matrix x;
  Matrix upstream;
};

LayerFdSetup make_layer_fd_setup(Rng& rng, NullVariant variant) {
  LayerFdSetup s;
  const int n = 5, k = 2, d_model = 8, hidden = 7, t_count = 6;
  s.cfg = RoutingConfig::make(n, k, 0.5, variant);
  s.params = LayerParams::init(s.cfg, d_model, hidden, rng);
  // logits with comfortable selection margins so h = 1e-6 probes never flip
  // the top-k set (a flip would step f, which the analytic side treats as
  // constant). Orthonormal router rows keep the token solve well conditioned,
  // so the probes stay far below the margin.
  Matrix logits = safe_random_logits(rng, t_count, n, 1.2, 2e-3, 0.3);
  Matrix gauss = rng.gaussian(d_model, d_model);
  Eigen::HouseholderQR<Matrix> qr(gauss);
  Matrix q = qr.householderQ();
  s.params.router_w = q.leftCols(n + 1).transpose();
  s.x = tokens_for_logits(s.params.router_w, logits);
  s.upstream = rng.gaussian(t_count, d_model);
  return s;
}

double layer_loss(const LayerParams& p, const Matrix& x, const RoutingConfig& cfg,
                  const Matrix& weights) {
  Matrix y = layer_forward(p, x, cfg, false, nullptr);
  double acc = 0;
  for (Index r = 0; r < y.rows(); ++r)
    for (Index c = 0; c < y.cols(); ++c) acc += y(r, c) * weights(r, c);
  return acc;
}

double aux_loss_value(const LayerParams& p, const Matrix& x, const RoutingConfig& cfg, Scalar wb,
                      Scalar wz) {
  LayerState st;
  layer_forward(p, x, cfg, false, &st);
  AuxLosses a = aux_losses(st);
  return wb * a.balance + wz * a.z;
}

}  // namespace

CheckList check_gradients(uint64_t seed, bool thorough) {
  CheckList out;
  const int n_inst = thorough ? 20 : 8;
  const double tol = 1e-5;

  out.push_back(fd_many("gradients.matmul", seed, std::max(n_inst, 20), tol, [&](Rng& rng) {
    Matrix a = rng.gaussian(5, 7), b = rng.gaussian(7, 3), r = rng.gaussian(5, 3);
    auto f = [&] {
      Matrix c = matmul(a, b);
      double acc = 0;
      for (Index i = 0; i < c.rows(); ++i)
        for (Index j = 0; j < c.cols(); ++j) acc += c(i, j) * r(i, j);
      return acc;
    };
    Matrix da, db;
    matmul_backward(a, b, r, da, db);
    return std::max(fd_relative_error(f, a, da), fd_relative_error(f, b, db));
  }));

  out.push_back(fd_many("gradients.softmax_rows", seed, std::max(n_inst, 20), tol, [&](Rng& rng) {
    Matrix z = rng.gaussian(4, 6), r = rng.gaussian(4, 6);
    auto f = [&] {
      Matrix p = softmax_rows(z);
      double acc = 0;
      for (Index i = 0; i < p.rows(); ++i)
        for (Index j = 0; j < p.cols(); ++j) acc += p(i, j) * r(i, j);
      return acc;
    };
    Matrix p = softmax_rows(z), dz;
    softmax_rows_backward(p, r, dz);
    return fd_relative_error(f, z, dz);
  }));

  out.push_back(fd_many("gradients.grad_tape", seed, std::max(n_inst, 20), tol, [&](Rng& rng) {
    Matrix av = rng.gaussian(3, 4), bv = rng.gaussian(4, 5), cv = rng.gaussian(3, 5);
    auto run = [&](bool want_grads, Matrix* ga, Matrix* gb, Matrix* gc) {
      GradTape tape;
      auto a = tape.leaf(av), b = tape.leaf(bv), c = tape.leaf(cv);
      auto prod = tape.matmul(a, b);
      auto act = tape.silu(prod);
      auto mix = tape.add(act, c);
      auto probs = tape.softmax_rows(mix);
      auto scaled = tape.scale(probs, Scalar(1.7));
      auto back = tape.matmul(scaled, tape.leaf(Matrix(bv.transpose())));
      auto total = tape.sum(tape.silu(back));
      if (want_grads) {
        Matrix seed_m(1, 1);
        seed_m(0, 0) = 1;
        tape.backward(total, seed_m);
        *ga = tape.grad(a);
        *gb = tape.grad(b);
        *gc = tape.grad(c);
      }
      return static_cast<double>(tape.value(total)(0, 0));
    };
    Matrix ga, gb, gc;
    run(true, &ga, &gb, &gc);
    auto f = [&] { return run(false, nullptr, nullptr, nullptr); };
    double e1 = fd_relative_error(f, av, ga);
    double e2 = fd_relative_error(f, cv, gc);
    return std::max(e1, e2);
  }));

  for (NullVariant variant : {NullVariant::kZero, NullVariant::kCopy}) {
    std::string tag = variant == NullVariant::kZero ? "zero" : "copy";
    out.push_back(fd_many("gradients.layer_inputs." + tag, seed, n_inst, tol, [&, variant](Rng& rng) {
      LayerFdSetup s = make_layer_fd_setup(rng, variant);
      LayerState st;
      layer_forward(s.params, s.x, s.cfg, false, &st);
      LayerGrads grads = LayerGrads::zeros_like(s.params);
      Matrix dx = Matrix::Zero(s.x.rows(), s.x.cols());
      layer_backward(s.params, st, s.upstream, dx, grads);
      auto f = [&] { return layer_loss(s.params, s.x, s.cfg, s.upstream); };
      return fd_relative_error(f, s.x, dx);
    }));
    out.push_back(fd_many("gradients.layer_router." + tag, seed, n_inst, tol, [&, variant](Rng& rng) {
      LayerFdSetup s = make_layer_fd_setup(rng, variant);
      LayerState st;
      layer_forward(s.params, s.x, s.cfg, false, &st);
      LayerGrads grads = LayerGrads::zeros_like(s.params);
      Matrix dx = Matrix::Zero(s.x.rows(), s.x.cols());
      layer_backward(s.params, st, s.upstream, dx, grads);
      auto f = [&] { return layer_loss(s.params, s.x, s.cfg, s.upstream); };
      return fd_relative_error(f, s.params.router_w, grads.router_w);
    }));
    out.push_back(fd_many("gradients.layer_experts." + tag, seed, n_inst, tol, [&, variant](Rng& rng) {
      LayerFdSetup s = make_layer_fd_setup(rng, variant);
      LayerState st;
      layer_forward(s.params, s.x, s.cfg, false, &st);
      LayerGrads grads = LayerGrads::zeros_like(s.params);
      Matrix dx = Matrix::Zero(s.x.rows(), s.x.cols());
      layer_backward(s.params, st, s.upstream, dx, grads);
      auto f = [&] { return layer_loss(s.params, s.x, s.cfg, s.upstream); };
      int e = rng.uniform_int(s.cfg.n_experts);
      double e1 = fd_relative_error(f, s.params.bank.experts[static_cast<size_t>(e)].w_in,
                                    grads.bank.experts[static_cast<size_t>(e)].w_in);
      double e2 = fd_relative_error(f, s.params.bank.shared.w_out, grads.bank.shared.w_out);
      return std::max(e1, e2);
    }));
  }

  out.push_back(fd_many("gradients.loss_balance", seed, n_inst, tol, [&](Rng& rng) {
    LayerFdSetup s = make_layer_fd_setup(rng, NullVariant::kZero);
    LayerState st;
    layer_forward(s.params, s.x, s.cfg, false, &st);
    AuxLosses a = aux_losses(st);
    LayerGrads grads = LayerGrads::zeros_like(s.params);
    Matrix dx = Matrix::Zero(s.x.rows(), s.x.cols());
    aux_backward(s.params, st, a.stats, Scalar(1), Scalar(0), dx, grads);
    auto f = [&] { return aux_loss_value(s.params, s.x, s.cfg, Scalar(1), Scalar(0)); };
    double e1 = fd_relative_error(f, s.params.router_w, grads.router_w);
    double e2 = fd_relative_error(f, s.x, dx);
    return std::max(e1, e2);
  }));

  out.push_back(fd_many("gradients.loss_z", seed, n_inst, tol, [&](Rng& rng) {
    LayerFdSetup s = make_layer_fd_setup(rng, NullVariant::kZero);
    LayerState st;
    layer_forward(s.params, s.x, s.cfg, false, &st);
    AuxLosses a = aux_losses(st);
    LayerGrads grads = LayerGrads::zeros_like(s.params);
    Matrix dx = Matrix::Zero(s.x.rows(), s.x.cols());
    aux_backward(s.params, st, a.stats, Scalar(0), Scalar(1), dx, grads);
    auto f = [&] { return aux_loss_value(s.params, s.x, s.cfg, Scalar(0), Scalar(1)); };
    double e1 = fd_relative_error(f, s.params.router_w, grads.router_w);
    double e2 = fd_relative_error(f, s.x, dx);
    return std::max(e1, e2);
  }));

  {
    Rng rng(Rng::mix(seed, 0x0d41ULL));
    LayerFdSetup s = make_layer_fd_setup(rng, NullVariant::kZero);
    LayerState st;
    layer_forward(s.params, s.x, s.cfg, false, &st);
    LayerGrads grads = LayerGrads::zeros_like(s.params);
    Matrix dx = Matrix::Zero(s.x.rows(), s.x.cols());
    Matrix zero_dy = Matrix::Zero(s.x.rows(), s.x.cols());
    layer_backward(s.params, st, zero_dy, dx, grads);
    double worst = std::max({dx.cwiseAbs().maxCoeff(), grads.router_w.cwiseAbs().maxCoeff(),
                             grads.bank.shared.w_in.cwiseAbs().maxCoeff()});
    out.push_back(make_result("gradients.zero_upstream", worst == 0.0, worst));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch suite
// ---------------------------------------------------------------------------

namespace {

// Logits whose null placement forces a specific real count per token.
Matrix logits_with_forced_r(Rng& rng, int tokens, int n, int k, const std::vector<int>& r_per_token) {
  Matrix logits(tokens, n + 1);
  for (int t = 0; t < tokens; ++t) {
    std::vector<Scalar> vals(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) vals[static_cast<size_t>(j)] = static_cast<Scalar>(rng.normal());
    std::vector<Scalar> sorted = vals;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    int r = r_per_token[static_cast<size_t>(t)];
    Scalar null_logit;
    if (r >= k)
      null_logit = sorted[static_cast<size_t>(n - 1)] - 1;  // below every real
    else if (r == 0)
      null_logit = sorted[0] + 1;  // above every real
    else
      null_logit = (sorted[static_cast<size_t>(r - 1)] + sorted[static_cast<size_t>(r)]) / 2;
    for (int j = 0; j < n; ++j) logits(t, j) = vals[static_cast<size_t>(j)];
    logits(t, n) = null_logit;
  }
  return logits;
}

struct ExecComparison {
  double fwd = 0;
  double bwd = 0;
};

ExecComparison compare_grouped_naive(Rng& rng, const RoutingConfig& cfg, int tokens, int d_model,
                                     int hidden, const std::vector<int>& r_per_token) {
  ExpertBank bank = ExpertBank::init(cfg.n_experts, d_model, hidden, rng);
  Matrix x = rng.gaussian(tokens, d_model);
  Matrix logits = logits_with_forced_r(rng, tokens, cfg.n_experts, cfg.k_max, r_per_token);
  RoutingDecision d = route_from_logits(logits, cfg);
  DispatchPlan plan = build_plan(d);

  GroupedState gs;
  Matrix y_grouped = grouped_execute(x, plan, bank, &gs);
  Matrix y_naive = naive_execute(x, d, bank);

  ExecComparison cmp;
  cmp.fwd = max_abs_diff(y_grouped, y_naive);

  Matrix dy = rng.gaussian(tokens, d_model);
  Matrix dx_g = Matrix::Zero(tokens, d_model), dx_n = Matrix::Zero(tokens, d_model);
  ExpertBankGrads gb = ExpertBankGrads::zeros_like(bank), nb = ExpertBankGrads::zeros_like(bank);
  Matrix dg_g, dg_n;
  grouped_backward(dy, x, plan, bank, gs, dx_g, gb, dg_g);
  naive_backward(dy, x, d, bank, dx_n, nb, dg_n);
  cmp.bwd = std::max(max_abs_diff(dx_g, dx_n), max_abs_diff(dg_g, dg_n));
  for (int e = 0; e < cfg.n_experts; ++e) {
    cmp.bwd = std::max(cmp.bwd, max_abs_diff(gb.experts[static_cast<size_t>(e)].w_in,
                                             nb.experts[static_cast<size_t>(e)].w_in));
    cmp.bwd = std::max(cmp.bwd, max_abs_diff(gb.experts[static_cast<size_t>(e)].w_out,
                                             nb.experts[static_cast<size_t>(e)].w_out));
  }
  return cmp;
}

}  // namespace

CheckList check_dispatch(uint64_t seed, bool thorough) {
  CheckList out;
  const int cases = thorough ? 110 : 30;

  {
    Rng rng(Rng::mix(seed, 0xd15aULL));
    double worst_fwd = 0, worst_bwd = 0;
    for (int i = 0; i < cases; ++i) {
      const int n = 4 + rng.uniform_int(8);
      const int k = 1 + rng.uniform_int(std::min(n, 4));
      double rho = 1.0;
      if (i % 4 != 0) rho = 0.2 + 0.6 * rng.uniform();
      RoutingConfig cfg = RoutingConfig::make(n, k, rho);
      const int tokens = 1 + rng.uniform_int(48);
      std::vector<int> r(static_cast<size_t>(tokens));
      for (auto& v : r) {
        int lo = std::max(0, k - cfg.n_null_copies);
        v = lo + rng.uniform_int(k - lo + 1);
      }
      if (i % 7 == 0 && cfg.n_null_copies >= k)
        std::fill(r.begin(), r.end(), 0);  // all-null batch
      ExecComparison cmp = compare_grouped_naive(rng, cfg, tokens, 5 + rng.uniform_int(6),
                                                 5 + rng.uniform_int(6), r);
      worst_fwd = std::max(worst_fwd, cmp.fwd);
      worst_bwd = std::max(worst_bwd, cmp.bwd);
    }
    out.push_back(make_result("dispatch.grouped_vs_naive.forward", worst_fwd < 1e-9, worst_fwd,
                              std::to_string(cases) + " random configs"));
    out.push_back(make_result("dispatch.grouped_vs_naive.backward", worst_bwd < 1e-8, worst_bwd,
                              std::to_string(cases) + " random configs"));
  }

  {
    // plan histogram against a direct counting oracle + permutation stability
    Rng rng(Rng::mix(seed, 0xd15bULL));
    bool ok = true;
    for (int i = 0; i < 20 && ok; ++i) {
      RoutingConfig cfg = RoutingConfig::make(6, 3, 0.5);
      const int tokens = 32;
      std::vector<int> r(static_cast<size_t>(tokens));
      for (auto& v : r) v = rng.uniform_int(cfg.k_max + 1);
      Matrix logits = logits_with_forced_r(rng, tokens, cfg.n_experts, cfg.k_max, r);
      RoutingDecision d = route_from_logits(logits, cfg);
      DispatchPlan plan = build_plan(d);
      std::vector<Index> counts(static_cast<size_t>(cfg.n_slots()), 0);
      for (int t = 0; t < tokens; ++t)
        for (int c = 0; c < cfg.k_max; ++c) ++counts[static_cast<size_t>(d.slot_ids(t, c))];
      ok = counts == plan.num_per_expert;
      Index total = 0;
      for (Index v : counts) total += v;
      ok = ok && total == static_cast<Index>(tokens) * cfg.k_max;
      // stability: within an expert group, flattened selection ids ascend
      for (size_t j = 1; j < plan.order.size() && ok; ++j) {
        Index id_prev = d.slot_ids(plan.order[j - 1] / cfg.k_max,
                                   static_cast<int>(plan.order[j - 1] % cfg.k_max));
        Index id_cur =
            d.slot_ids(plan.order[j] / cfg.k_max, static_cast<int>(plan.order[j] % cfg.k_max));
        if (id_prev == id_cur) ok = plan.order[j - 1] < plan.order[j];
      }
      // null selections occupy the tail
      for (Index j = plan.num_real; j < static_cast<Index>(plan.order.size()) && ok; ++j) {
        Index flat = plan.order[static_cast<size_t>(j)];
        ok = d.slot_ids(flat / cfg.k_max, static_cast<int>(flat % cfg.k_max)) >= cfg.n_experts;
      }
    }
    out.push_back(make_result("dispatch.plan_oracle", ok, ok ? 0.0 : 1.0));
  }

  {
    // outputs independent of M given identical real selections
    Rng rng(Rng::mix(seed, 0xd15cULL));
    RoutingConfig cfg = RoutingConfig::make(8, 4, 0.5);
    ExpertBank bank = ExpertBank::init(8, 6, 7, rng);
    Matrix x = rng.gaussian(24, 6);
    std::vector<int> r(24);
    for (auto& v : r) v = rng.uniform_int(5);
    Matrix logits = logits_with_forced_r(rng, 24, 8, 4, r);
    RoutingDecision d = route_from_logits(logits, cfg);
    Matrix y1 = grouped_execute(x, build_plan(d), bank);
    RoutingDecision d2 = d;
    d2.n_null_copies = 24;  // same real selections, fatter null pool
    Matrix y2 = grouped_execute(x, build_plan(d2), bank);
    double err = max_abs_diff(y1, y2);
    out.push_back(make_result("dispatch.truncation_m_independence", err == 0.0, err));
  }

  {
    // flop accounting anchors
    Rng rng(Rng::mix(seed, 0xd15dULL));
    const int n = 16, k = 4, d_model = 32, hidden = 64, tokens = 4096;
    RoutingConfig cfg = RoutingConfig::make(n, k, 0.5);
    std::vector<int> r(static_cast<size_t>(tokens));
    // per-token real count ~ Binomial(k, rho): a plan at the target sparsity
    for (auto& v : r) {
      v = 0;
      for (int j = 0; j < k; ++j) v += rng.uniform() < 0.5 ? 1 : 0;
    }
    Matrix logits = logits_with_forced_r(rng, tokens, n, k, r);
    RoutingDecision d = route_from_logits(logits, cfg);
    DispatchPlan plan = build_plan(d);
    FlopCount fc = flop_report(plan, d_model, hidden);
    double frac = fc.routed_fraction();
    bool ok = std::abs(frac - 0.5) < 0.10 * 0.5;

    std::vector<int> r_zero(static_cast<size_t>(tokens), 0);
    RoutingDecision d0 =
        route_from_logits(logits_with_forced_r(rng, tokens, n, k, r_zero), cfg);
    FlopCount f0 = flop_report(build_plan(d0), d_model, hidden);
    ok = ok && f0.routed_macs == 0;

    RoutingConfig dense = RoutingConfig::make(n, k, 1.0);
    RoutingDecision dd = route_from_logits(rng.gaussian(tokens, n + 1), dense);
    FlopCount fd = flop_report(build_plan(dd), d_model, hidden);
    ok = ok && fd.routed_macs == fd.dense_macs;
    out.push_back(make_result("dispatch.flop_report", ok, std::abs(frac - 0.5)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Router suite
// ---------------------------------------------------------------------------

CheckList check_router(uint64_t seed, bool thorough) {
  CheckList out;

  {
    bool ok = compute_null_copies(64, 0.5) == 64 && compute_null_copies(64, 0.25) == 192 &&
              compute_null_copies(64, 1.0) == 0 && compute_null_copies(16, 0.17) == 78;
    bool threw = false;
    try {
      compute_null_copies(64, 0.0);
    } catch (const ConfigError&) {
      threw = true;
    }
    out.push_back(make_result("router.null_copies", ok && threw, ok && threw ? 0.0 : 1.0));
  }

  {
    RoutingConfig a = RoutingConfig::make(16, 8, 0.5);
    RoutingConfig b = RoutingConfig::make(16, 2, 1.0);
    RoutingConfig c = RoutingConfig::make(16, 12, 0.17);
    double err = std::max({std::abs(expected_active(a) - 4.0), std::abs(expected_active(b) - 2.0),
                           std::abs(expected_active(c) - 2.04)});
    out.push_back(make_result("router.expected_active", err < 1e-12, err));
  }

  out.push_back(check_threshold_equivalence(seed, thorough ? 20000 : 4000));

  {
    // includes the M < k_max regime, where r >= k_max - M must hold
    Rng rng(Rng::mix(seed, 0x2007ULL));
    bool ok = true;
    for (int i = 0; i < 40 && ok; ++i) {
      int n = 6 + rng.uniform_int(10);
      int k = 2 + rng.uniform_int(std::min(n - 1, 5));
      double rho = 0.5 + 0.45 * rng.uniform();  // keeps M small, often < k
      RoutingConfig cfg = RoutingConfig::make(n, k, rho);
      Matrix logits = rng.gaussian(64, n + 1, 1.3);
      RoutingDecision a = route_from_logits(logits, cfg);
      RoutingDecision b = route_thresholded(logits, cfg);
      ok = decisions_identical(a, b);
      for (int t = 0; t < a.n_tokens; ++t)
        if (a.real_count(t) < k - cfg.n_null_copies) ok = false;
    }
    out.push_back(make_result("router.threshold_general_m", ok, ok ? 0.0 : 1.0));
  }

  {
    // M = 0 reduces to a standard top-k router, bit for bit
    Rng rng(Rng::mix(seed, 0x2008ULL));
    bool ok = true;
    for (int i = 0; i < 30 && ok; ++i) {
      int n = 4 + rng.uniform_int(10);
      int k = 1 + rng.uniform_int(n);
      RoutingConfig cfg = RoutingConfig::make(n, k, 1.0);
      Matrix logits = rng.gaussian(40, n + 1, 1.5);
      RoutingDecision d = route_from_logits(logits, cfg);
      std::vector<int> order(static_cast<size_t>(n));
      for (int t = 0; t < 40 && ok; ++t) {
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
          if (logits(t, a) != logits(t, b)) return logits(t, a) > logits(t, b);
          return a < b;
        });
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (int c = 0; c < k; ++c) mx = std::max(mx, logits(t, order[static_cast<size_t>(c)]));
        Scalar denom = 0;
        std::vector<Scalar> g(static_cast<size_t>(k));
        for (int c = 0; c < k; ++c) {
          g[static_cast<size_t>(c)] = std::exp(logits(t, order[static_cast<size_t>(c)]) - mx);
          denom += g[static_cast<size_t>(c)];
        }
        for (int c = 0; c < k; ++c) {
          if (d.slot_ids(t, c) != order[static_cast<size_t>(c)]) ok = false;
          if (d.gates(t, c) != g[static_cast<size_t>(c)] / denom) ok = false;
        }
        if (d.real_count(t) != k) ok = false;
      }
    }
    out.push_back(make_result("router.m0_standard_bit_identity", ok, ok ? 0.0 : 1.0));
  }

  {
    // renormalized expanded-softmax gates equal the restricted softmax
    Rng rng(Rng::mix(seed, 0x2009ULL));
    double worst = 0;
    for (int i = 0; i < 25; ++i) {
      int n = 4 + rng.uniform_int(12);
      int k = 1 + rng.uniform_int(std::min(n, 6));
      RoutingConfig cfg = RoutingConfig::make(n, k, 0.3 + 0.5 * rng.uniform());
      Matrix logits = rng.gaussian(32, n + 1, 1.5);
      RoutingDecision d = route_from_logits(logits, cfg);
      for (int t = 0; t < d.n_tokens; ++t) {
        if (d.real_count(t) == 0) continue;
        Scalar sel_mass = 0;
        for (int c = 0; c < k; ++c)
          if (d.slot_ids(t, c) < n) sel_mass += d.real_probs(t, d.slot_ids(t, c));
        for (int c = 0; c < k; ++c) {
          int id = d.slot_ids(t, c);
          if (id >= n) continue;
          double renorm = d.real_probs(t, id) / sel_mass;
          worst = std::max(worst, std::abs(renorm - static_cast<double>(d.gates(t, c))));
        }
        Scalar gate_sum = 0;
        for (int c = 0; c < k; ++c) gate_sum += d.gates(t, c);
        worst = std::max(worst, std::abs(static_cast<double>(gate_sum) - 1.0));
      }
    }
    out.push_back(make_result("router.renorm_restricted_identity", worst < 1e-10, worst));
  }

  {
    // raising the null logit never increases r
    Rng rng(Rng::mix(seed, 0x200aULL));
    bool ok = true;
    RoutingConfig cfg = RoutingConfig::make(8, 4, 0.5);
    for (int i = 0; i < 20 && ok; ++i) {
      Matrix logits(1, 9);
      for (int j = 0; j < 8; ++j) logits(0, j) = static_cast<Scalar>(rng.normal());
      int prev_r = cfg.k_max;
      for (double nl = -4.0; nl <= 4.0; nl += 0.05) {
        logits(0, 8) = static_cast<Scalar>(nl);
        RoutingDecision d = route_from_logits(logits, cfg);
        if (d.real_count(0) > prev_r) ok = false;
        prev_r = d.real_count(0);
      }
    }
    out.push_back(make_result("router.null_monotonicity", ok, ok ? 0.0 : 1.0));
  }

  {
    // exact real == null tie selects the real expert
    RoutingConfig cfg = RoutingConfig::make(4, 2, 0.5);
    Matrix logits(1, 5);
    logits << 2.0, 1.0, -1.0, -2.0, 1.0;  // expert 1 ties the null logit
    RoutingDecision d = route_from_logits(logits, cfg);
    bool ok = d.real_count(0) == 2 && d.slot_ids(0, 0) == 0 && d.slot_ids(0, 1) == 1;
    RoutingDecision dt = route_thresholded(logits, cfg);
    ok = ok && decisions_identical(d, dt);
    out.push_back(make_result("router.real_first_tie_rule", ok, ok ? 0.0 : 1.0));
  }

  {
    // expanded probabilities form a distribution
    Rng rng(Rng::mix(seed, 0x200bULL));
    RoutingConfig cfg = RoutingConfig::make(12, 4, 0.25);
    Matrix logits = rng.gaussian(64, 13, 2.0);
    RoutingDecision d = route_from_logits(logits, cfg);
    Matrix p = d.expanded_probs();
    double worst = 0;
    for (Index t = 0; t < p.rows(); ++t) {
      double s = 0;
      for (Index j = 0; j < p.cols(); ++j) s += p(t, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
    out.push_back(make_result("router.expanded_probs_sum", worst < 1e-12, worst));
  }

  {
    RecoveryResult rec = check_solution_space_recovery(seed);
    out.push_back(rec.zero_variant);
    out.push_back(rec.copy_variant);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses suite
// ---------------------------------------------------------------------------

CheckList check_losses(uint64_t seed, bool thorough) {
  CheckList out;
  (void)thorough;

  {
    RoutingStats s;
    s.n_experts = 16;
    s.n_null_copies = 16;
    s.n_tokens = 1;
    s.f = Vector::Constant(32, Scalar(1) / 32);
    s.P = Vector::Constant(32, Scalar(1) / 32);
    Scalar uniform = load_balance_loss(s);
    s.f.setZero();
    s.P.setZero();
    s.f(0) = 1;
    s.P(0) = 1;
    Scalar peak = load_balance_loss(s);
    bool ok = uniform == Scalar(1) && peak == Scalar(32);
    out.push_back(make_result("losses.balance_anchors", ok,
                              std::abs(static_cast<double>(uniform) - 1.0)));
  }

  {
    Rng rng(Rng::mix(seed, 0x70a0ULL));
    double worst = 0;
    for (int i = 0; i < 25; ++i) {
      int slots = 3 + rng.uniform_int(60);
      RoutingStats s;
      s.n_experts = slots;
      s.n_null_copies = 0;
      s.n_tokens = 1;
      s.f.resize(slots);
      s.P.resize(slots);
      Scalar fs = 0, ps = 0;
      for (int j = 0; j < slots; ++j) {
        s.f(j) = static_cast<Scalar>(rng.uniform());
        s.P(j) = static_cast<Scalar>(rng.uniform());
        fs += s.f(j);
        ps += s.P(j);
      }
      s.f /= fs;
      s.P /= ps;
      long double acc = 0;
      for (int j = 0; j < slots; ++j)
        acc += static_cast<long double>(s.f(j)) * static_cast<long double>(s.P(j));
      acc *= slots;
      worst = std::max(worst, std::abs(static_cast<double>(load_balance_loss(s)) -
                                       static_cast<double>(acc)));
    }
    out.push_back(make_result("losses.balance_resummation_oracle", worst < 1e-12, worst));
  }

  {
    Matrix z = Matrix::Zero(3, 128);
    double expect = std::log(128.0) * std::log(128.0);
    double err = std::abs(static_cast<double>(z_loss(z)) - expect);
    Matrix z2(1, 2);
    z2 << std::log(Scalar(0.5)), std::log(Scalar(0.5));  // LSE = 0
    double err2 = std::abs(static_cast<double>(z_loss(z2)));
    out.push_back(make_result("losses.z_anchors", err < 1e-10 && err2 < 1e-12,
                              std::max(err, err2)));
  }

  {
    Rng rng(Rng::mix(seed, 0x70a1ULL));
    double worst = 0;
    for (int i = 0; i < 25; ++i) {
      int slots = 2 + rng.uniform_int(40);
      int tokens = 1 + rng.uniform_int(20);
      Matrix z = rng.gaussian(tokens, slots, 3.0);
      long double acc = 0;
      for (int t = 0; t < tokens; ++t) {
        long double m = z(t, 0);
        for (int j = 1; j < slots; ++j) m = std::max(m, static_cast<long double>(z(t, j)));
        long double denom = 0;
        for (int j = 0; j < slots; ++j) denom += expl(static_cast<long double>(z(t, j)) - m);
        long double lse = m + logl(denom);
        acc += lse * lse;
      }
      acc /= tokens;
      worst = std::max(worst,
                       std::abs(static_cast<double>(z_loss(z)) - static_cast<double>(acc)));
    }
    out.push_back(make_result("losses.z_extended_precision_oracle", worst < 1e-10, worst));
  }

  {
    double v = total_loss(Scalar(1.0), Scalar(1.0), Scalar(23.535));
    double expect = 1.0 + 0.02 * 1.0 + 0.001 * 23.535;
    LossWeights off{0, 0};
    double v2 = total_loss(Scalar(1.7), Scalar(5.0), Scalar(9.0), off);
    Rng rng(Rng::mix(seed, 0x70a2ULL));
    double worst = std::max(std::abs(v - expect), std::abs(v2 - 1.7));
    for (int i = 0; i < 10; ++i) {
      Scalar a = static_cast<Scalar>(rng.normal()), b = static_cast<Scalar>(rng.normal()),
             c = static_cast<Scalar>(rng.normal());
      LossWeights w{Scalar(0.02), Scalar(0.001)};
      double lhs = total_loss(2 * a, b, c, w) - total_loss(a, b, c, w);
      worst = std::max(worst, std::abs(lhs - static_cast<double>(a)));
    }
    out.push_back(make_result("losses.total_loss", worst < 1e-12, worst));
  }

  {
    // stats invariants on routed batches
    Rng rng(Rng::mix(seed, 0x70a3ULL));
    double worst = 0;
    for (int i = 0; i < 10; ++i) {
      RoutingConfig cfg = RoutingConfig::make(8, 3, 0.4);
      Matrix logits = rng.gaussian(50, 9, 1.5);
      RoutingDecision d = route_from_logits(logits, cfg);
      RoutingStats s = routing_stats(d);
      Scalar fsum = 0, psum = 0;
      for (int j = 0; j < s.n_slots(); ++j) {
        fsum += s.f(j);
        psum += s.P(j);
        if (s.f(j) < 0 || s.P(j) < 0) worst = 1.0;
      }
      worst = std::max(worst, std::abs(static_cast<double>(fsum) - 1.0));
      worst = std::max(worst, std::abs(static_cast<double>(psum) - 1.0));
    }
    out.push_back(make_result("losses.stats_normalization", worst < 1e-12, worst));
  }
  return out;
}

bool known_check_suite(const std::string& suite) {
  return suite == "gradients" || suite == "dispatch" || suite == "router" || suite == "losses" ||
         suite == "all";
}

CheckList run_check_suite(const std::string& suite, uint64_t seed, bool thorough) {
  if (!known_check_suite(suite)) throw ConfigError("unknown verify suite '" + suite + "'");
  CheckList out;
  auto extend = [&](CheckList more) {
    for (auto& c : more) out.push_back(std::move(c));
  };
  if (suite == "gradients" || suite == "all") extend(check_gradients(seed, thorough));
  if (suite == "dispatch" || suite == "all") extend(check_dispatch(seed, thorough));
  if (suite == "router" || suite == "all") extend(check_router(seed, thorough));
  if (suite == "losses" || suite == "all") extend(check_losses(seed, thorough));
  return out;
}

}  // namespace nullmoe
