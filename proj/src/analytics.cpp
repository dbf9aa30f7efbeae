#include "nullmoe/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace nullmoe {

ComputeMap compute_map(std::span<const RoutingDecision> layer_decisions, const TokenBatch& batch) {
  if (layer_decisions.empty()) throw ShapeError("compute_map: need at least one layer's decisions");
  const Index t_count = batch.tokens();
  for (const auto& d : layer_decisions)
    if (d.n_tokens != t_count) throw ShapeError("compute_map: decision/batch token count mismatch");

  ComputeMap map;
  map.seq_id = batch.seq_id;
  map.pos = batch.pos;
  map.modality = batch.modality;
  map.redundant = batch.redundant;
  map.score.resize(t_count);
  for (Index t = 0; t < t_count; ++t) {
    double acc = 0;
    for (const auto& d : layer_decisions)
      acc += static_cast<double>(d.real_count(t)) / d.k_max;
    map.score(t) = static_cast<Scalar>(acc / static_cast<double>(layer_decisions.size()));
  }
  return map;
}

const ModalityRow* ModalityReport::find(Modality m) const {
  for (const auto& r : rows)
    if (r.modality == m) return &r;
  return nullptr;
}

ModalityReport modality_report(const ComputeMap& map) {
  if (map.tokens() == 0) throw ShapeError("modality_report: empty compute map");
  const Index t_count = map.tokens();

  double total_compute = 0;
  for (Index t = 0; t < t_count; ++t) total_compute += map.score(t);

  ModalityReport report;
  for (Modality m : {Modality::kVision, Modality::kText}) {
    Index n = 0;
    double compute = 0;
    for (Index t = 0; t < t_count; ++t) {
      if (map.modality[static_cast<size_t>(t)] != m) continue;
      ++n;
      compute += map.score(t);
    }
    if (n == 0) continue;
    ModalityRow row;
    row.modality = m;
    row.token_share = static_cast<double>(n) / static_cast<double>(t_count);
    row.compute_share = total_compute > 0 ? compute / total_compute : 0.0;
    row.compute_intensity = compute / static_cast<double>(n);
    report.rows.push_back(row);
  }
  return report;
}

Vector polarization_hist(const RoutingDecision& d) {
  return polarization_hist(std::span<const RoutingDecision>(&d, 1));
}

Vector polarization_hist(std::span<const RoutingDecision> layer_decisions) {
  if (layer_decisions.empty() || layer_decisions[0].n_tokens == 0)
    throw ShapeError("polarization_hist: empty decisions");
  const int k = layer_decisions[0].k_max;
  Vector hist = Vector::Zero(k + 1);
  Index total = 0;
  for (const auto& d : layer_decisions) {
    if (d.k_max != k) throw ShapeError("polarization_hist: mixed k_max");
    for (int t = 0; t < d.n_tokens; ++t) hist(d.real_count(t)) += 1;
    total += d.n_tokens;
  }
  hist /= static_cast<Scalar>(total);
  return hist;
}

namespace {

std::string gray_fill(double score) {
  int level = static_cast<int>(std::lround(std::clamp(score, 0.0, 1.0) * 255.0));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", level, level, level);
  return buf;
}

}  // namespace

std::string render_heatmap(const ComputeMap& map, int grid_rows, int grid_cols) {
  if (grid_rows < 1 || grid_cols < 1 ||
      map.tokens() != static_cast<Index>(grid_rows) * grid_cols)
    throw ShapeError("render_heatmap: token count != grid_rows * grid_cols");

  constexpr int cell = 12;
  constexpr int legend_w = 36;
  const int width = grid_cols * cell + legend_w;
  const int height = std::max(grid_rows * cell, 5 * cell);

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "  <title>per-token compute score</title>\n";
  for (int r = 0; r < grid_rows; ++r) {
    for (int c = 0; c < grid_cols; ++c) {
      Index t = static_cast<Index>(r) * grid_cols + c;
      svg << "  <rect x=\"" << c * cell << "\" y=\"" << r * cell << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"" << gray_fill(map.score(t)) << "\"/>\n";
    }
  }
  // legend: five swatches from 0 to 1
  const int lx = grid_cols * cell + 8;
  for (int i = 0; i < 5; ++i) {
    double v = static_cast<double>(i) / 4.0;
    svg << "  <rect x=\"" << lx << "\" y=\"" << i * cell << "\" width=\"" << cell << "\" height=\""
        << cell << "\" fill=\"" << gray_fill(v) << "\" stroke=\"#808080\"/>\n";
    char label[8];
    std::snprintf(label, sizeof(label), "%.2f", v);
    svg << "  <text x=\"" << lx + cell + 3 << "\" y=\"" << i * cell + cell - 3
        << "\" font-size=\"8\" fill=\"#404040\">" << label << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace nullmoe
