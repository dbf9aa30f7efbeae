#include "nullmoe/io_util.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

TEST_SUITE_BEGIN("cli");

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  std::string cmd = std::string(NULLMOE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WEXITSTATUS(rc);
}

fs::path workdir() {
  fs::path dir = fs::temp_directory_path() / "nullmoe_cli_tests";
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

const char* kTinyConfig = R"(version = 1
model.d_model = 16
model.hidden = 16
model.n_layers = 1
routing.n_experts = 8
routing.k_max = 4
routing.rho = 0.5
data.tokens_per_batch = 96
data.n_templates = 8
data.teacher_hidden = 32
train.total_steps = 30
train.warmup_steps = 5
train.dense_warmup_steps = 5
train.stats_every = 0
train.eval_batches = 1
)";

}  // namespace

TEST_CASE("missing config file exits 2") {
  fs::path dir = workdir();
  CHECK(run_cli("train --config " + (dir / "nope.cfg").string() + " --out " +
                    (dir / "x").string(),
                dir / "log1.txt") == 2);
}

TEST_CASE("config with an unknown key exits 2 and anchors the line") {
  fs::path dir = workdir();
  write_file(dir / "bad.cfg", std::string(kTinyConfig) + "routing.k_mx = 2\n");
  CHECK(run_cli("train --config " + (dir / "bad.cfg").string() + " --out " +
                    (dir / "y").string(),
                dir / "log2.txt") == 2);
  std::string log = nullmoe::read_text_file(dir / "log2.txt");
  CHECK(log.find("line") != std::string::npos);
}

TEST_CASE("zero-step config trains to a manifest and empty metrics") {
  fs::path dir = workdir();
  std::string cfg = kTinyConfig;
  cfg.replace(cfg.find("train.total_steps = 30"), std::string("train.total_steps = 30").size(),
              "train.total_steps = 0");
  cfg.replace(cfg.find("train.warmup_steps = 5"), std::string("train.warmup_steps = 5").size(),
              "train.warmup_steps = 0");
  cfg.replace(cfg.find("train.dense_warmup_steps = 5"),
              std::string("train.dense_warmup_steps = 5").size(), "train.dense_warmup_steps = 0");
  write_file(dir / "zero.cfg", cfg);
  fs::remove_all(dir / "zero_run");
  CHECK(run_cli("train --config " + (dir / "zero.cfg").string() + " --out " +
                    (dir / "zero_run").string(),
                dir / "log3.txt") == 0);
  CHECK(fs::exists(dir / "zero_run" / "manifest.json"));
  std::ifstream metrics(dir / "zero_run" / "metrics.csv");
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) ++lines;
  CHECK(lines == 1);  // header only
}

TEST_CASE("short train run emits metrics with the realized E[K] column") {
  fs::path dir = workdir();
  write_file(dir / "tiny.cfg", kTinyConfig);
  fs::remove_all(dir / "run");
  CHECK(run_cli("train --config " + (dir / "tiny.cfg").string() + " --out " +
                    (dir / "run").string() + " --seed 5",
                dir / "log4.txt") == 0);
  std::ifstream metrics(dir / "run" / "metrics.csv");
  std::string header;
  std::getline(metrics, header);
  CHECK(header.find("realized_ek") != std::string::npos);
}

TEST_CASE("verify: unknown suite exits 2, real suite prints one line per check") {
  fs::path dir = workdir();
  CHECK(run_cli("verify --suite nonsense", dir / "log5.txt") == 2);
  CHECK(run_cli("verify --suite losses --seed 3", dir / "log6.txt") == 0);
  std::string log = nullmoe::read_text_file(dir / "log6.txt");
  CHECK(log.find("losses.balance_anchors") != std::string::npos);
  CHECK(log.find("PASS") != std::string::npos);
  CHECK(log.find("max_err=") != std::string::npos);
  // determinism under a fixed seed
  CHECK(run_cli("verify --suite losses --seed 3", dir / "log7.txt") == 0);
  CHECK(nullmoe::read_text_file(dir / "log7.txt") == log);
}

TEST_CASE("analyze: truncated checkpoint exits 3") {
  fs::path dir = workdir();
  write_file(dir / "tiny2.cfg", kTinyConfig);
  fs::path run = dir / "run_trunc";
  fs::remove_all(run);
  REQUIRE(run_cli("train --config " + (dir / "tiny2.cfg").string() + " --out " + run.string(),
                  dir / "log8.txt") == 0);
  // truncate the final checkpoint
  fs::path ckpt = run / "checkpoints" / "30.bin";
  REQUIRE(fs::exists(ckpt));
  auto size = fs::file_size(ckpt);
  fs::resize_file(ckpt, size / 2);
  CHECK(run_cli("analyze --out " + run.string(), dir / "log9.txt") == 3);
}

TEST_CASE("sweep: empty and duplicate grids exit 2, a 1x1 grid emits rows per seed") {
  fs::path dir = workdir();
  write_file(dir / "tiny3.cfg", kTinyConfig);
  CHECK(run_cli("sweep --config " + (dir / "tiny3.cfg").string() + " --out " +
                    (dir / "s1").string() + " --grid ,",
                dir / "log10.txt") == 2);
  CHECK(run_cli("sweep --config " + (dir / "tiny3.cfg").string() + " --out " +
                    (dir / "s2").string() + " --grid 4:0.5,4:0.5",
                dir / "log11.txt") == 2);
  fs::remove_all(dir / "s3");
  CHECK(run_cli("sweep --config " + (dir / "tiny3.cfg").string() + " --out " +
                    (dir / "s3").string() + " --grid 4:0.5 --seed 1 --seed 2",
                dir / "log12.txt") == 0);
  std::ifstream csv(dir / "s3" / "sweep.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "k_max,rho,seed,final_loss,realized_ek,r0_fraction");
  int rows = 0;
  std::string line;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 2);
}

TEST_SUITE_END();
