// nullmoe command-line entry point: train / sweep / verify / analyze.
//
// Exit codes: 0 success, 1 failed verification, 2 usage or config error,
// 3 runtime or numeric error.

#include "nullmoe/analyze.hpp"
#include "nullmoe/checks.hpp"
#include "nullmoe/config.hpp"
#include "nullmoe/io_util.hpp"
#include "nullmoe/parallel.hpp"
#include "nullmoe/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;
using namespace nullmoe;

struct GridCell {
  int k_max;
  double rho;
};

std::vector<GridCell> parse_grid(const std::string& spec) {
  std::vector<GridCell> cells;
  std::set<std::pair<int, long long>> seen;
  size_t pos = 0;
  while (pos < spec.size()) {
    size_t comma = spec.find(',', pos);
    std::string item = spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    pos = comma == std::string::npos ? spec.size() : comma + 1;
    if (item.empty()) continue;
    size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw ConfigError("grid cell '" + item + "' must look like k:rho");
    GridCell cell{};
    try {
      cell.k_max = std::stoi(item.substr(0, colon));
      cell.rho = std::stod(item.substr(colon + 1));
    } catch (...) {
      throw ConfigError("grid cell '" + item + "' must look like k:rho");
    }
    auto key = std::make_pair(cell.k_max, static_cast<long long>(cell.rho * 1e9));
    if (!seen.insert(key).second)
      throw ConfigError("grid cell '" + item + "' appears twice (output dirs would overlap)");
    cells.push_back(cell);
  }
  if (cells.empty()) throw ConfigError("empty sweep grid");
  return cells;
}

std::string rho_tag(double rho) {
  std::string s = format_double(rho);
  for (auto& c : s)
    if (c == '.') c = 'p';
  return s;
}

// A missing or unreadable config file is a usage error, not a runtime one.
RunConfig load_config_or_usage(const std::string& path) {
  try {
    return load_run_config(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

int cmd_train(const std::string& config_path, const std::string& out, uint64_t seed) {
  RunConfig cfg = load_config_or_usage(config_path);
  TrainSummary s = train(cfg, out, seed);
  std::printf("run %s: steps=%d final_task_loss=%s realized_ek=%s r0_fraction=%s\n",
              s.run_dir.string().c_str(), s.steps, format_double(s.final_task_loss).c_str(),
              format_double(s.eval.realized_ek).c_str(),
              format_double(s.eval.r0_fraction).c_str());
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out, const std::string& grid,
              std::vector<uint64_t> seeds) {
  RunConfig base = load_config_or_usage(config_path);
  std::vector<GridCell> cells = parse_grid(grid);
  if (seeds.empty()) seeds = {1, 2, 3};
  std::set<uint64_t> seen_seeds;
  for (uint64_t s : seeds)
    if (!seen_seeds.insert(s).second)
      throw ConfigError("seed " + std::to_string(s) + " listed twice (runs would collide)");
  fs::create_directories(out);

  struct Job {
    GridCell cell;
    uint64_t seed;
    TrainSummary summary;
  };
  std::vector<Job> runs;
  for (const auto& cell : cells)
    for (uint64_t seed : seeds) runs.push_back({cell, seed, {}});

  std::vector<std::function<void()>> jobs;
  for (auto& r : runs) {
    jobs.emplace_back([&r, &base, &out] {
      RunConfig cfg = base;
      cfg.model.routing =
          RoutingConfig::make(base.model.routing.n_experts, r.cell.k_max, r.cell.rho,
                              base.model.routing.null_variant,
                              base.model.routing.use_shared_expert);
      fs::path dir = fs::path(out) / ("k" + std::to_string(r.cell.k_max) + "_rho" +
                                      rho_tag(r.cell.rho)) /
                     ("seed" + std::to_string(r.seed));
      r.summary = train(cfg, dir, r.seed);
    });
  }
  run_jobs(std::move(jobs));

  CsvWriter csv(fs::path(out) / "sweep.csv",
                {"k_max", "rho", "seed", "final_loss", "realized_ek", "r0_fraction"});
  for (const auto& r : runs)
    csv.row({format_int(r.cell.k_max), format_double(r.cell.rho),
             format_int(static_cast<long long>(r.seed)), format_double(r.summary.final_task_loss),
             format_double(r.summary.eval.realized_ek),
             format_double(r.summary.eval.r0_fraction)});
  std::printf("sweep complete: %zu runs -> %s/sweep.csv\n", runs.size(), out.c_str());
  return 0;
}

int cmd_verify(const std::string& suite, uint64_t seed) {
  if (!known_check_suite(suite)) throw ConfigError("unknown verify suite '" + suite + "'");
  CheckList checks = run_check_suite(suite, seed);
  bool all_pass = true;
  for (const auto& c : checks) {
    std::printf("%-44s %s max_err=%.3g%s%s\n", c.name.c_str(), c.pass ? "PASS" : "FAIL", c.max_err,
                c.detail.empty() ? "" : "  ", c.detail.c_str());
    all_pass &= c.pass;
  }
  std::printf("%s: %zu checks, %s\n", suite.c_str(), checks.size(),
              all_pass ? "all passed" : "FAILURES present");
  return all_pass ? 0 : 1;
}

int cmd_analyze(const std::string& run_dir, int batches) {
  fs::path out = analyze_run(run_dir, batches);
  std::printf("analysis written to %s\n", out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-choice mixture-of-experts with zero-compute experts"};
  app.require_subcommand(1);

  std::string config_path, out_dir, grid, suite = "all", run_dir;
  uint64_t seed = 1;
  std::vector<uint64_t> seeds;
  int analyze_batches = 4;

  auto* train_cmd = app.add_subcommand("train", "run one training experiment");
  train_cmd->add_option("--config", config_path, "config file")->required();
  train_cmd->add_option("--out", out_dir, "output run directory")->required();
  train_cmd->add_option("--seed", seed, "run seed");

  auto* sweep_cmd = app.add_subcommand("sweep", "run a (k_max, rho) grid");
  sweep_cmd->add_option("--config", config_path, "base config file")->required();
  sweep_cmd->add_option("--out", out_dir, "sweep output directory")->required();
  sweep_cmd->add_option("--grid", grid, "cells as k:rho[,k:rho...]")->required();
  sweep_cmd->add_option("--seed", seeds, "seed list (repeatable)");

  auto* verify_cmd = app.add_subcommand("verify", "run verification suites");
  verify_cmd->add_option("--suite", suite, "gradients|dispatch|router|losses|all");
  verify_cmd->add_option("--seed", seed, "suite seed");

  auto* analyze_cmd = app.add_subcommand("analyze", "write analytics for a finished run");
  analyze_cmd->add_option("--out", run_dir, "run directory to analyze")->required();
  analyze_cmd->add_option("--batches", analyze_batches, "evaluation batches");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, out_dir, seed);
    if (sweep_cmd->parsed()) return cmd_sweep(config_path, out_dir, grid, seeds);
    if (verify_cmd->parsed()) return cmd_verify(suite, seed);
    if (analyze_cmd->parsed()) return cmd_analyze(run_dir, analyze_batches);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 2;
}
