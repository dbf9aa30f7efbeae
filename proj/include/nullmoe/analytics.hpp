#pragma once

#include "nullmoe/router.hpp"
#include "nullmoe/types.hpp"

#include <span>
#include <string>
#include <vector>

namespace nullmoe {

// Per-token compute utilization: fraction of top-K slots filled by real
// experts, averaged across MoE layers with equal weight. Scores live in
// [0, 1]: 0 is complete null routing, 1 full computation.
struct ComputeMap {
  std::vector<int> seq_id;
  std::vector<int> pos;
  std::vector<Modality> modality;
  std::vector<uint8_t> redundant;
  Vector score;

  Index tokens() const { return score.size(); }
};

ComputeMap compute_map(std::span<const RoutingDecision> layer_decisions, const TokenBatch& batch);

struct ModalityRow {
  Modality modality;
  double token_share = 0;
  double compute_share = 0;
  double compute_intensity = 0;
};

struct ModalityReport {
  std::vector<ModalityRow> rows;

  const ModalityRow* find(Modality m) const;
};

// Shares and intensities per modality. compute_share_m is proportional to
// token_share_m * intensity_m; both share columns sum to 1 (the compute
// column only when total compute > 0).
ModalityReport modality_report(const ComputeMap& map);

// Normalized histogram of per-token real-slot counts r in {0..k_max} for one
// routing decision batch.
Vector polarization_hist(const RoutingDecision& decision);

// Pooled histogram across layers (every (token, layer) pair counts once).
Vector polarization_hist(std::span<const RoutingDecision> layer_decisions);

// Grayscale SVG heatmap, one rect per token in row-major grid order plus a
// legend. Token count must equal rows*cols; text strips pass rows = 1.
std::string render_heatmap(const ComputeMap& map, int grid_rows, int grid_cols);

}  // namespace nullmoe
