#include "nullmoe/copy_expert_study.hpp"

#include "nullmoe/io_util.hpp"
#include "nullmoe/parallel.hpp"

#include <algorithm>

namespace nullmoe {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

}  // namespace

VariantComparison run_comparison(const RunConfig& base, std::span<const uint64_t> seeds,
                                 const std::filesystem::path& out_dir, bool copy_null_warmup) {
  if (seeds.size() < 3) throw ConfigError("run_comparison: need at least 3 seeds");
  std::filesystem::create_directories(out_dir);

  struct Cell {
    NullVariant variant;
    uint64_t seed;
    TrainSummary summary;
  };
  std::vector<Cell> cells;
  for (NullVariant variant : {NullVariant::kZero, NullVariant::kCopy})
    for (uint64_t seed : seeds) cells.push_back({variant, seed, {}});

  std::vector<std::function<void()>> jobs;
  for (auto& cell : cells) {
    jobs.emplace_back([&cell, &base, &out_dir, copy_null_warmup] {
      RunConfig cfg = base;
      cfg.model.routing.null_variant = cell.variant;
      if (cell.variant == NullVariant::kCopy && copy_null_warmup &&
          cfg.train.null_warmup_steps == 0)
        cfg.train.null_warmup_steps = std::max(1, cfg.train.total_steps / 10);
      auto dir = out_dir / (std::string(null_variant_name(cell.variant)) + "_seed" +
                            std::to_string(cell.seed));
      cell.summary = train(cfg, dir, cell.seed);
    });
  }
  run_jobs(std::move(jobs));

  VariantComparison cmp;
  std::vector<double> zero_mass, copy_mass, gaps;
  for (const auto& cell : cells) {
    VariantRunStats s;
    s.variant = cell.variant;
    s.seed = cell.seed;
    s.final_loss = cell.summary.final_task_loss;
    s.r0_fraction = cell.summary.eval.r0_fraction;
    s.rk_fraction = cell.summary.eval.rk_fraction;
    s.dilution_estimate = cell.summary.eval.dilution_estimate;
    s.polarization = cell.summary.eval.polarization;
    cmp.runs.push_back(std::move(s));
  }
  for (const auto& r : cmp.runs)
    if (r.variant == NullVariant::kZero) zero_mass.push_back(r.extreme_mass());
  for (const auto& r : cmp.runs) {
    if (r.variant != NullVariant::kCopy) continue;
    copy_mass.push_back(r.extreme_mass());
    for (const auto& z : cmp.runs)
      if (z.variant == NullVariant::kZero && z.seed == r.seed)
        gaps.push_back(r.extreme_mass() - z.extreme_mass());
  }
  cmp.zero_extreme_median = median(zero_mass);
  cmp.copy_extreme_median = median(copy_mass);
  cmp.polarization_gap_median = median(gaps);

  CsvWriter csv(out_dir / "comparison.csv",
                {"variant", "seed", "final_loss", "r0_fraction", "rk_fraction",
                 "polarization_gap"});
  for (const auto& r : cmp.runs) {
    double gap = 0;
    if (r.variant == NullVariant::kCopy) {
      for (const auto& z : cmp.runs)
        if (z.variant == NullVariant::kZero && z.seed == r.seed)
          gap = r.extreme_mass() - z.extreme_mass();
    }
    csv.row({null_variant_name(r.variant), format_int(static_cast<long long>(r.seed)),
             format_double(r.final_loss), format_double(r.r0_fraction),
             format_double(r.rk_fraction), format_double(gap)});
  }
  return cmp;
}

}  // namespace nullmoe
