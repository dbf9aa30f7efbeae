#include "nullmoe/config.hpp"
#include "nullmoe/io_util.hpp"

#include <doctest.h>

#include <string>

using namespace nullmoe;

TEST_SUITE_BEGIN("config");

TEST_CASE("csv quoting and shortest round-trip numbers") {
  CHECK(csv_escape("plain") == "plain");
  CHECK(csv_escape("a,b") == "\"a,b\"");
  CHECK(csv_escape("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(csv_escape("line\nbreak") == "\"line\nbreak\"");
  CHECK(format_double(0.5) == "0.5");
  CHECK(format_double(0.78) == "0.78");
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
  CHECK(format_int(-42) == "-42");
}

namespace {

const char* kSample = R"(# toy run
version = 1
routing.n_experts = 8
routing.k_max = 4
routing.rho = 0.5
model.d_model = 16
train.total_steps = 10
train.warmup_steps = 2
train.dense_warmup_steps = 1
)";

}  // namespace

TEST_CASE("parse applies values and defaults") {
  RunConfig cfg = parse_run_config(kSample);
  CHECK(cfg.model.routing.n_experts == 8);
  CHECK(cfg.model.routing.k_max == 4);
  CHECK(cfg.model.routing.n_null_copies == 8);
  CHECK(cfg.model.d_model == 16);
  CHECK(cfg.model.hidden == 64);  // default
  CHECK(cfg.train.total_steps == 10);
  CHECK(cfg.data.vision_fraction == doctest::Approx(0.78));
}

TEST_CASE("canonicalize then re-parse is a fixed point") {
  RunConfig cfg = parse_run_config(kSample);
  std::string canon = canonical_config(cfg);
  RunConfig cfg2 = parse_run_config(canon);
  std::string canon2 = canonical_config(cfg2);
  CHECK(canon == canon2);
  CHECK(config_hash_hex(cfg) == config_hash_hex(cfg2));
}

TEST_CASE("unknown keys fail fast with a line anchor") {
  std::string bad = std::string(kSample) + "routing.k_mxa = 3\n";
  try {
    parse_run_config(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("line 10") != std::string::npos);
    CHECK(msg.find("k_mxa") != std::string::npos);
  }
}

TEST_CASE("malformed values and structure are rejected") {
  CHECK_THROWS_AS(parse_run_config("version = 1\nrouting.k_max = four\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("version = 1\njust a line\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("version = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("routing.k_max = 2\n"), ConfigError);  // missing version
  CHECK_THROWS_AS(parse_run_config("version = 1\nversion = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("version = 1\nrouting.rho = 1.7\n"), ConfigError);
  CHECK_THROWS_AS(
      parse_run_config("version = 1\nrouting.null_variant = maybe\n"), ConfigError);
}

TEST_CASE("hash is sensitive to any value change") {
  RunConfig a = parse_run_config(kSample);
  RunConfig b = a;
  b.train.total_steps += 1;
  CHECK(config_hash_hex(a) != config_hash_hex(b));
  CHECK(config_hash_hex(a).size() == 16);
}

TEST_CASE("comments and spacing do not affect the parse") {
  RunConfig a = parse_run_config(kSample);
  RunConfig b = parse_run_config(
      "version=1 # compact\nrouting.n_experts   =  8\nrouting.k_max=4\nrouting.rho =0.5\n"
      "model.d_model= 16\ntrain.total_steps =10\ntrain.warmup_steps=2\n"
      "train.dense_warmup_steps = 1  # trailing\n");
  CHECK(canonical_config(a) == canonical_config(b));
}

TEST_SUITE_END();
