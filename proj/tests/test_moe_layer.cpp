#include "nullmoe/checks.hpp"
#include "nullmoe/model.hpp"
#include "nullmoe/moe_layer.hpp"
#include "nullmoe/rng.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace nullmoe;

TEST_SUITE_BEGIN("moe_layer");

namespace {

// Logits-controlled layer setup: tokens are solved back from prescribed
// router logits so routing outcomes are exact by construction.
struct ControlledLayer {
  RoutingConfig cfg;
  LayerParams params;
  Matrix x;
};

ControlledLayer controlled_layer(Rng& rng, const Matrix& logits, int n, int k, double rho,
                                 NullVariant variant, int d_model, int hidden) {
  ControlledLayer c;
  c.cfg = RoutingConfig::make(n, k, rho, variant);
  c.params = LayerParams::init(c.cfg, d_model, hidden, rng);
  c.params.router_w = rng.gaussian(n + 1, d_model);
  auto cod = c.params.router_w.completeOrthogonalDecomposition();
  c.x.resize(logits.rows(), d_model);
  for (Index t = 0; t < logits.rows(); ++t)
    c.x.row(t) = cod.solve(logits.row(t).transpose()).transpose();
  return c;
}

}  // namespace

TEST_CASE("all-null token returns exactly the shared expert output") {
  Rng rng(51);
  Matrix logits(3, 5);
  for (int t = 0; t < 3; ++t) {
    for (int j = 0; j < 4; ++j) logits(t, j) = static_cast<Scalar>(rng.normal());
    logits(t, 4) = 10.0;  // null wins every slot
  }
  ControlledLayer c = controlled_layer(rng, logits, 4, 2, 0.5, NullVariant::kZero, 8, 6);
  LayerState st;
  Matrix y = layer_forward(c.params, c.x, c.cfg, false, &st);
  for (int t = 0; t < 3; ++t) CHECK(st.decision.real_count(t) == 0);
  Matrix shared_only = ffn_forward(c.params.bank.shared, c.x);
  CHECK((y - shared_only).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("M=0 layer is bit-identical to the standard top-k reference") {
  CheckResult res = check_dense_fallback(7, 25);
  INFO(res.detail);
  CHECK(res.pass);
  CHECK(res.max_err == 0.0);
}

TEST_CASE("copy variant realizes the dilution form") {
  Rng rng(53);
  Matrix logits(6, 7);
  for (int t = 0; t < 6; ++t) {
    for (int j = 0; j < 6; ++j) logits(t, j) = static_cast<Scalar>(rng.normal());
    logits(t, 6) = static_cast<Scalar>(rng.normal() + 0.5);
  }
  ControlledLayer c = controlled_layer(rng, logits, 6, 3, 0.5, NullVariant::kCopy, 9, 8);
  LayerState st;
  Matrix y = layer_forward(c.params, c.x, c.cfg, false, &st);

  // independent reconstruction: y = shared(x) + sum selected real expanded
  // probs * E_i(x) + rho_hat * x, with rho_hat the selected null gate mass
  Matrix expanded = st.decision.expanded_probs();
  Matrix expect = ffn_forward(c.params.bank.shared, c.x);
  for (int t = 0; t < 6; ++t) {
    Scalar null_mass = 0;
    for (int s = 0; s < 3; ++s) {
      int id = st.decision.slot_ids(t, s);
      if (id < 6) {
        Matrix out = ffn_forward(c.params.bank.experts[static_cast<size_t>(id)], c.x.row(t));
        expect.row(t) += expanded(t, id) * out.row(0);
      } else {
        null_mass += expanded(t, id);
      }
    }
    expect.row(t) += null_mass * c.x.row(t);
  }
  CHECK((y - expect).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("output magnitude is invariant to the null logit at fixed selection") {
  Rng rng(57);
  const int n = 6, k = 3, d_model = 9, hidden = 8, tokens = 12;
  RoutingConfig cfg = RoutingConfig::make(n, k, 0.5);
  // logits with a clear gap between the 2nd and 3rd real expert
  Matrix base(tokens, n + 1);
  for (int t = 0; t < tokens; ++t) {
    for (int j = 0; j < n; ++j) base(t, j) = static_cast<Scalar>(j < 2 ? 3.0 + rng.uniform() : -3.0 - rng.uniform());
    base(t, n) = 0.0;
  }
  ControlledLayer c = controlled_layer(rng, base, n, k, 0.5, NullVariant::kZero, d_model, hidden);

  // move the null logit inside the same gap: adding a small multiple of the
  // top-two real rows raises it to ~0.6 without touching the selection set
  LayerState st1, st2;
  Matrix y1 = layer_forward(c.params, c.x, cfg, false, &st1);
  LayerParams moved = c.params;
  moved.router_w.row(n) += Scalar(0.1) * (c.params.router_w.row(0) + c.params.router_w.row(1));
  Matrix y2 = layer_forward(moved, c.x, cfg, false, &st2);
  for (int t = 0; t < tokens; ++t) {
    REQUIRE(st1.decision.real_count(t) == 2);
    REQUIRE(st2.decision.real_count(t) == 2);
    CHECK(st2.logits(t, n) != st1.logits(t, n));  // the null logit really moved
  }
  CHECK((y1 - y2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("solution-space recovery and the copy-variant violation") {
  RecoveryResult rec = check_solution_space_recovery(61);
  CHECK(rec.zero_variant.pass);
  CHECK(rec.zero_variant.max_err < 1e-10);
  CHECK(rec.copy_variant.pass);
  CHECK(rec.copy_variant.max_err > 1e-2);
}

TEST_CASE("layer gradients pass finite-difference checks") {
  for (const auto& c : check_gradients(303, false)) {
    INFO(c.name, " max_err=", c.max_err);
    CHECK(c.pass);
  }
}

TEST_CASE("dense warmup masks the null slots") {
  Rng rng(63);
  RoutingConfig cfg = RoutingConfig::make(6, 3, 0.25);
  LayerParams p = LayerParams::init(cfg, 8, 6, rng);
  Matrix x = rng.gaussian(10, 8);
  LayerState st;
  layer_forward(p, x, cfg, true, &st);
  CHECK(st.cfg.n_null_copies == 0);
  for (int t = 0; t < 10; ++t) CHECK(st.decision.real_count(t) == 3);
}

TEST_CASE("expert bank bookkeeping") {
  Rng rng(65);
  ExpertBank bank = ExpertBank::init(5, 8, 12, rng);
  CHECK(bank.parameter_count() == 6LL * 2 * 8 * 12);
  CHECK(bank.n_experts() == 5);
}

TEST_CASE("checkpoint round-trips byte-exactly") {
  namespace fs = std::filesystem;
  ModelConfig cfg;
  cfg.d_model = 10;
  cfg.hidden = 8;
  cfg.n_layers = 2;
  cfg.routing = RoutingConfig::make(6, 3, 0.5);
  Model m = Model::init(cfg, 777);

  fs::path dir = fs::temp_directory_path() / "nullmoe_ckpt_test";
  fs::create_directories(dir);
  fs::path p1 = dir / "a.bin", p2 = dir / "b.bin";
  save_checkpoint(p1, m);
  Model loaded = load_checkpoint(p1);
  save_checkpoint(p2, loaded);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(!s1.empty());
  CHECK(loaded.cfg.routing.n_null_copies == 6);

  // truncation is detected
  std::string cut = s1.substr(0, s1.size() / 2);
  fs::path p3 = dir / "cut.bin";
  std::ofstream(p3, std::ios::binary) << cut;
  CHECK_THROWS_AS(load_checkpoint(p3), IoError);
  fs::remove_all(dir);
}

TEST_CASE("model stack forward/backward shapes and residual wiring") {
  Rng rng(67);
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.hidden = 6;
  cfg.n_layers = 3;
  cfg.routing = RoutingConfig::make(4, 2, 0.5);
  Model m = Model::init(cfg, 55);
  Matrix x = rng.gaussian(12, 8);
  ModelState st;
  Matrix y = model_forward(m, x, false, &st);
  CHECK(y.rows() == 12);
  CHECK(st.layers.size() == 3);

  ModelLosses aux = model_aux_losses(st);
  CHECK(aux.stats.size() == 3);
  ModelGrads grads = ModelGrads::zeros_like(m);
  Matrix dy = rng.gaussian(12, 8);
  model_backward(m, st, dy, LossWeights{}, aux, grads);
  CHECK(grads.layers[0].router_w.cwiseAbs().maxCoeff() > 0.0);
}

TEST_SUITE_END();
