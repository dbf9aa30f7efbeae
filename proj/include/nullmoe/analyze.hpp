#pragma once

#include <filesystem>

namespace nullmoe {

// Replays evaluation batches through the latest checkpoint of a finished run
// and writes modality.csv, polarization.csv, map.csv and per-sequence
// heatmap SVGs into <run_dir>/analysis.
std::filesystem::path analyze_run(const std::filesystem::path& run_dir, int n_batches = 4);

}  // namespace nullmoe
