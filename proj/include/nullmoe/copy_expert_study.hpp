#pragma once

#include "nullmoe/trainer.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace nullmoe {

struct VariantRunStats {
  NullVariant variant = NullVariant::kZero;
  uint64_t seed = 0;
  double final_loss = 0;
  double r0_fraction = 0;
  double rk_fraction = 0;
  double dilution_estimate = 0;
  Vector polarization;

  double extreme_mass() const { return r0_fraction + rk_fraction; }
};

// Matched zero-vs-copy comparison: both arms share seeds, data and every
// non-variant config knob. polarization_gap is the copy arm's mass at
// r in {0, k_max} minus the zero arm's for the same seed.
struct VariantComparison {
  std::vector<VariantRunStats> runs;
  double zero_extreme_median = 0;
  double copy_extreme_median = 0;
  double polarization_gap_median = 0;
};

// copy_null_warmup keeps the copy arm's null-copy ramp on (the default
// mitigation); pass false to reproduce the raw pathology.
VariantComparison run_comparison(const RunConfig& base, std::span<const uint64_t> seeds,
                                 const std::filesystem::path& out_dir,
                                 bool copy_null_warmup = true);

}  // namespace nullmoe
