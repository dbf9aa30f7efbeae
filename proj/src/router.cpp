#include "nullmoe/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nullmoe {

int compute_null_copies(int n_experts, double rho) {
  if (!(rho > 0.0) || rho > 1.0)
    throw ConfigError("rho must lie in (0, 1], got " + std::to_string(rho));
  if (n_experts < 1) throw ConfigError("need at least one real expert");
  return static_cast<int>(std::llround(n_experts * (1.0 - rho) / rho));
}

RoutingConfig RoutingConfig::make(int n_experts, int k_max, double rho, NullVariant variant,
                                  bool use_shared_expert) {
  RoutingConfig cfg;
  cfg.n_experts = n_experts;
  cfg.k_max = k_max;
  cfg.rho = rho;
  cfg.null_variant = variant;
  cfg.n_null_copies = compute_null_copies(n_experts, rho);
  cfg.use_shared_expert = use_shared_expert;
  cfg.validate();
  return cfg;
}

RoutingConfig RoutingConfig::masked() const {
  RoutingConfig m = *this;
  m.n_null_copies = 0;
  m.rho = 1.0;
  return m;
}

void RoutingConfig::validate() const {
  if (n_experts < 1) throw ConfigError("n_experts must be >= 1");
  if (k_max < 1 || k_max > n_experts)
    throw ConfigError("k_max must lie in [1, n_experts]");
  if (!(rho > 0.0) || rho > 1.0) throw ConfigError("rho must lie in (0, 1]");
  if (n_null_copies < 0) throw ConfigError("n_null_copies must be >= 0");
  if (rho == 1.0 && n_null_copies != 0)
    throw ConfigError("rho = 1 requires zero null copies");
}

double expected_active(const RoutingConfig& cfg) { return cfg.k_max * cfg.rho; }

Matrix RoutingDecision::expanded_probs() const {
  Matrix p(n_tokens, n_slots());
  for (int t = 0; t < n_tokens; ++t) {
    for (int j = 0; j < n_experts; ++j) p(t, j) = real_probs(t, j);
    for (int c = 0; c < n_null_copies; ++c) p(t, n_experts + c) = null_prob(t);
  }
  return p;
}

double RoutingDecision::realized_expected_active() const {
  if (n_tokens == 0) return 0.0;
  double acc = 0;
  for (int t = 0; t < n_tokens; ++t) acc += real_count(t);
  return acc / n_tokens;
}

double RoutingDecision::zero_real_fraction() const {
  if (n_tokens == 0) return 0.0;
  int zeros = 0;
  for (int t = 0; t < n_tokens; ++t) zeros += (real_count(t) == 0) ? 1 : 0;
  return static_cast<double>(zeros) / n_tokens;
}

namespace {

// Compact expanded softmax over (N real logits, M copies of the null logit).
// Writes the per-real-slot probabilities, per-copy null probability and the
// expanded log-sum-exp for one token. Sequential accumulation.
void expanded_softmax_row(const Matrix& logits, Index t, int n, int m, RoutingDecision& d) {
  Scalar mx = logits(t, 0);
  for (int j = 1; j < n; ++j) mx = std::max(mx, logits(t, j));
  const Scalar z_null = logits(t, n);
  if (m > 0) mx = std::max(mx, z_null);
  Scalar denom = 0;
  for (int j = 0; j < n; ++j) {
    d.real_probs(t, j) = std::exp(logits(t, j) - mx);
    denom += d.real_probs(t, j);
  }
  Scalar e_null = 0;
  if (m > 0) {
    e_null = std::exp(z_null - mx);
    denom += static_cast<Scalar>(m) * e_null;
  }
  for (int j = 0; j < n; ++j) d.real_probs(t, j) /= denom;
  d.null_prob(t) = (m > 0) ? e_null / denom : Scalar(0);
  d.lse(t) = mx + std::log(denom);
}

// Fills gates for one token given slot_ids/real_count. Zero variant: softmax
// restricted to the selected real logits (algebraically equal to
// expanded-softmax renormalization, and bit-insensitive to the null logit).
// Copy variant: raw expanded-softmax probabilities, no renormalization.
void fill_gates_row(const Matrix& logits, Index t, const RoutingConfig& cfg, RoutingDecision& d) {
  const int k = cfg.k_max;
  const int r = d.real_count(t);
  for (int c = 0; c < k; ++c) d.gates(t, c) = 0;
  if (r == 0) return;
  if (cfg.null_variant == NullVariant::kCopy) {
    for (int c = 0; c < k; ++c) {
      int id = d.slot_ids(t, c);
      if (id < cfg.n_experts) d.gates(t, c) = d.real_probs(t, id);
    }
    return;
  }
  Scalar mx = -std::numeric_limits<Scalar>::infinity();
  for (int c = 0; c < k; ++c) {
    int id = d.slot_ids(t, c);
    if (id < cfg.n_experts) mx = std::max(mx, logits(t, id));
  }
  Scalar denom = 0;
  for (int c = 0; c < k; ++c) {
    int id = d.slot_ids(t, c);
    if (id < cfg.n_experts) {
      d.gates(t, c) = std::exp(logits(t, id) - mx);
      denom += d.gates(t, c);
    }
  }
  for (int c = 0; c < k; ++c) {
    int id = d.slot_ids(t, c);
    if (id < cfg.n_experts) d.gates(t, c) /= denom;
  }
}

RoutingDecision init_decision(const Matrix& logits, const RoutingConfig& cfg) {
  cfg.validate();
  if (logits.cols() != cfg.n_experts + 1)
    throw ShapeError("route: logits must have n_experts + 1 columns");
  if (!logits.allFinite()) throw NumericError("route: non-finite logits");
  RoutingDecision d;
  d.n_tokens = static_cast<int>(logits.rows());
  d.n_experts = cfg.n_experts;
  d.n_null_copies = cfg.n_null_copies;
  d.k_max = cfg.k_max;
  d.null_variant = cfg.null_variant;
  d.real_count.resize(d.n_tokens);
  d.slot_ids.resize(d.n_tokens, cfg.k_max);
  d.gates.resize(d.n_tokens, cfg.k_max);
  d.real_probs.resize(d.n_tokens, cfg.n_experts);
  d.null_prob.resize(d.n_tokens);
  d.lse.resize(d.n_tokens);
  return d;
}

}  // namespace

RoutingDecision route_from_logits(const Matrix& logits, const RoutingConfig& cfg) {
  RoutingDecision d = init_decision(logits, cfg);
  const int n = cfg.n_experts;
  const int m = cfg.n_null_copies;
  const int k = cfg.k_max;

  // Only the first min(M, k) null copies can ever be selected: copies are
  // identical and ties resolve by ascending index.
  const int null_candidates = std::min(m, k);
  std::vector<int> order(static_cast<size_t>(n + null_candidates));

  for (Index t = 0; t < logits.rows(); ++t) {
    const Scalar z_null = logits(t, n);
    std::iota(order.begin(), order.end(), 0);
    auto key = [&](int id) { return id < n ? logits(t, id) : z_null; };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      Scalar za = key(a), zb = key(b);
      if (za != zb) return za > zb;
      bool a_real = a < n, b_real = b < n;
      if (a_real != b_real) return a_real;  // real before null on exact ties
      return a < b;
    });
    int r = 0;
    for (int c = 0; c < k; ++c) {
      d.slot_ids(t, c) = order[static_cast<size_t>(c)];
      if (d.slot_ids(t, c) < n) ++r;
    }
    d.real_count(t) = r;
    expanded_softmax_row(logits, t, n, m, d);
    fill_gates_row(logits, t, cfg, d);
  }
  return d;
}

RoutingDecision route_thresholded(const Matrix& logits, const RoutingConfig& cfg) {
  RoutingDecision d = init_decision(logits, cfg);
  const int n = cfg.n_experts;
  const int m = cfg.n_null_copies;
  const int k = cfg.k_max;

  std::vector<int> order(static_cast<size_t>(n));
  for (Index t = 0; t < logits.rows(); ++t) {
    const Scalar z_null = logits(t, n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (logits(t, a) != logits(t, b)) return logits(t, a) > logits(t, b);
      return a < b;
    });
    int above = 0;  // reals at or above the null logit (ties select as real)
    if (m > 0) {
      for (int j = 0; j < n; ++j) above += (logits(t, j) >= z_null) ? 1 : 0;
    } else {
      above = n;
    }
    int r = std::min(k, above);
    r = std::max(r, k - m);  // at most M slots can be null
    d.real_count(t) = r;

    // Selection order mirrors the expanded sort: reals at/above the null
    // logit first, then null copies, then any reals below the null logit.
    int head = std::min(r, above);
    int c = 0;
    for (int j = 0; j < head; ++j) d.slot_ids(t, c++) = order[static_cast<size_t>(j)];
    for (int j = 0; j < k - r; ++j) d.slot_ids(t, c++) = n + j;
    for (int j = head; j < r; ++j) d.slot_ids(t, c++) = order[static_cast<size_t>(j)];

    expanded_softmax_row(logits, t, n, m, d);
    fill_gates_row(logits, t, cfg, d);
  }
  return d;
}

RoutingDecision route(const Matrix& x, const Matrix& router_w, const RoutingConfig& cfg) {
  if (router_w.rows() != cfg.n_experts + 1)
    throw ShapeError("route: router weights must have n_experts + 1 rows");
  Matrix logits = matmul(x, router_w.transpose());
  return route_from_logits(logits, cfg);
}

RoutingDecision route(const TokenBatch& batch, const Matrix& router_w, const RoutingConfig& cfg) {
  return route(batch.x, router_w, cfg);
}

}  // namespace nullmoe
