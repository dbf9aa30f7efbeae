#include "nullmoe/checks.hpp"
#include "nullmoe/dispatch.hpp"
#include "nullmoe/rng.hpp"

#include <doctest.h>

using namespace nullmoe;

TEST_SUITE_BEGIN("dispatch");

namespace {

// Places the null logit so token t activates exactly r_per_token[t] reals.
Matrix forced_logits(Rng& rng, int tokens, int n, int k, const std::vector<int>& r_per_token) {
  Matrix logits(tokens, n + 1);
  for (int t = 0; t < tokens; ++t) {
    std::vector<Scalar> vals(static_cast<size_t>(n));
    for (auto& v : vals) v = static_cast<Scalar>(rng.normal());
    std::vector<Scalar> sorted = vals;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    int r = r_per_token[static_cast<size_t>(t)];
    Scalar null_logit;
    if (r >= k)
      null_logit = sorted.back() - 1;
    else if (r == 0)
      null_logit = sorted.front() + 1;
    else
      null_logit = (sorted[static_cast<size_t>(r - 1)] + sorted[static_cast<size_t>(r)]) / 2;
    for (int j = 0; j < n; ++j) logits(t, j) = vals[static_cast<size_t>(j)];
    logits(t, n) = null_logit;
  }
  return logits;
}

}  // namespace

TEST_CASE("plan for a single token with one real and one null selection") {
  RoutingConfig cfg = RoutingConfig::make(4, 2, 0.5);
  Rng rng(3);
  Matrix logits = forced_logits(rng, 1, 4, 2, {1});
  RoutingDecision d = route_from_logits(logits, cfg);
  DispatchPlan plan = build_plan(d);
  CHECK(plan.num_real == 1);
  Index real_total = 0;
  for (int i = 0; i < 4; ++i) real_total += plan.num_per_expert[static_cast<size_t>(i)];
  CHECK(real_total == 1);
  CHECK(plan.num_per_expert[4] == 1);  // first null copy takes the tail slot
  CHECK(plan.sorted_gates(plan.order.size() - 1) == 0.0);
}

TEST_CASE("all-null batch produces empty grouped compute and zero output") {
  RoutingConfig cfg = RoutingConfig::make(4, 2, 0.5);
  Rng rng(5);
  Matrix logits = forced_logits(rng, 6, 4, 2, std::vector<int>(6, 0));
  RoutingDecision d = route_from_logits(logits, cfg);
  DispatchPlan plan = build_plan(d);
  CHECK(plan.num_real == 0);
  ExpertBank bank = ExpertBank::init(4, 5, 6, rng);
  Matrix x = rng.gaussian(6, 5);
  Matrix y = grouped_execute(x, plan, bank);
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
  CHECK((naive_execute(x, d, bank) - y).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("histogram matches the counting oracle and sums to T*k_max") {
  Rng rng(7);
  RoutingConfig cfg = RoutingConfig::make(6, 3, 0.5);
  std::vector<int> r(40);
  for (auto& v : r) v = rng.uniform_int(4);
  RoutingDecision d = route_from_logits(forced_logits(rng, 40, 6, 3, r), cfg);
  DispatchPlan plan = build_plan(d);
  std::vector<Index> counts(static_cast<size_t>(cfg.n_slots()), 0);
  for (int t = 0; t < 40; ++t)
    for (int c = 0; c < 3; ++c) ++counts[static_cast<size_t>(d.slot_ids(t, c))];
  CHECK(counts == plan.num_per_expert);
  Index total = 0;
  for (Index v : plan.num_per_expert) total += v;
  CHECK(total == 120);
  // null selections occupy the sorted tail
  for (Index j = plan.num_real; j < static_cast<Index>(plan.order.size()); ++j) {
    Index flat = plan.order[static_cast<size_t>(j)];
    CHECK(d.slot_ids(flat / 3, static_cast<int>(flat % 3)) >= 6);
  }
}

TEST_CASE("single token, single expert, gate 1.0 reduces to the expert itself") {
  Rng rng(9);
  RoutingConfig cfg = RoutingConfig::make(4, 2, 0.5);
  Matrix logits = forced_logits(rng, 1, 4, 2, {1});
  RoutingDecision d = route_from_logits(logits, cfg);
  REQUIRE(d.real_count(0) == 1);
  REQUIRE(d.gates(0, 0) == 1.0);
  ExpertBank bank = ExpertBank::init(4, 5, 6, rng);
  Matrix x = rng.gaussian(1, 5);
  Matrix y = grouped_execute(x, build_plan(d), bank);
  Matrix direct = ffn_forward(bank.experts[static_cast<size_t>(d.slot_ids(0, 0))], x);
  CHECK((y - direct).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("grouped execution matches the naive loop: T=64 N=8 k=4 rho=0.5") {
  Rng rng(11);
  RoutingConfig cfg = RoutingConfig::make(8, 4, 0.5);
  std::vector<int> r(64);
  for (auto& v : r) v = rng.uniform_int(5);
  Matrix logits = forced_logits(rng, 64, 8, 4, r);
  RoutingDecision d = route_from_logits(logits, cfg);
  DispatchPlan plan = build_plan(d);
  ExpertBank bank = ExpertBank::init(8, 12, 16, rng);
  Matrix x = rng.gaussian(64, 12);

  GroupedState gs;
  Matrix yg = grouped_execute(x, plan, bank, &gs);
  Matrix yn = naive_execute(x, d, bank);
  CHECK((yg - yn).cwiseAbs().maxCoeff() < 1e-9);

  Matrix dy = rng.gaussian(64, 12);
  Matrix dxg = Matrix::Zero(64, 12), dxn = Matrix::Zero(64, 12);
  ExpertBankGrads gg = ExpertBankGrads::zeros_like(bank), gn = ExpertBankGrads::zeros_like(bank);
  Matrix dgg, dgn;
  grouped_backward(dy, x, plan, bank, gs, dxg, gg, dgg);
  naive_backward(dy, x, d, bank, dxn, gn, dgn);
  CHECK((dxg - dxn).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((dgg - dgn).cwiseAbs().maxCoeff() < 1e-8);
  for (int e = 0; e < 8; ++e) {
    CHECK((gg.experts[static_cast<size_t>(e)].w_in - gn.experts[static_cast<size_t>(e)].w_in)
              .cwiseAbs()
              .maxCoeff() < 1e-8);
    CHECK((gg.experts[static_cast<size_t>(e)].w_out - gn.experts[static_cast<size_t>(e)].w_out)
              .cwiseAbs()
              .maxCoeff() < 1e-8);
  }
}

TEST_CASE("grouped/naive equivalence across the full check battery") {
  CheckList checks = check_dispatch(1234, false);
  for (const auto& c : checks) {
    INFO(c.name, " max_err=", c.max_err, " ", c.detail);
    CHECK(c.pass);
  }
}

TEST_CASE("outputs are independent of M given identical real selections") {
  Rng rng(13);
  RoutingConfig cfg = RoutingConfig::make(8, 4, 0.5);
  std::vector<int> r(24);
  for (auto& v : r) v = rng.uniform_int(5);
  RoutingDecision d = route_from_logits(forced_logits(rng, 24, 8, 4, r), cfg);
  ExpertBank bank = ExpertBank::init(8, 6, 7, rng);
  Matrix x = rng.gaussian(24, 6);
  Matrix y1 = grouped_execute(x, build_plan(d), bank);
  RoutingDecision wider = d;
  wider.n_null_copies = 40;
  Matrix y2 = grouped_execute(x, build_plan(wider), bank);
  CHECK((y1 - y2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("flop report anchors") {
  Rng rng(15);
  RoutingConfig cfg = RoutingConfig::make(4, 2, 0.5);
  RoutingDecision d = route_from_logits(forced_logits(rng, 10, 4, 2, std::vector<int>(10, 0)), cfg);
  FlopCount fc = flop_report(build_plan(d), 8, 16);
  CHECK(fc.routed_macs == 0);
  CHECK(fc.dense_macs == 10LL * 2 * 2 * 8 * 16);

  RoutingConfig dense = RoutingConfig::make(4, 2, 1.0);
  RoutingDecision dd = route_from_logits(rng.gaussian(10, 5), dense);
  FlopCount fd = flop_report(build_plan(dd), 8, 16);
  CHECK(fd.routed_macs == fd.dense_macs);
}

TEST_CASE("plan built for a different batch is rejected") {
  Rng rng(17);
  RoutingConfig cfg = RoutingConfig::make(4, 2, 0.5);
  RoutingDecision d = route_from_logits(rng.gaussian(6, 5), cfg);
  DispatchPlan plan = build_plan(d);
  ExpertBank bank = ExpertBank::init(4, 5, 6, rng);
  CHECK_THROWS_AS(grouped_execute(rng.gaussian(9, 5), plan, bank), ShapeError);
}

TEST_SUITE_END();
