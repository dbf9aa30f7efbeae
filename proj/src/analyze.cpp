#include "nullmoe/analyze.hpp"

#include "nullmoe/analytics.hpp"
#include "nullmoe/config.hpp"
#include "nullmoe/io_util.hpp"
#include "nullmoe/model.hpp"
#include "nullmoe/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>

namespace nullmoe {

namespace {

std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir, long long* step_out) {
  std::filesystem::path best;
  long long best_step = -1;
  auto dir = run_dir / "checkpoints";
  if (!std::filesystem::is_directory(dir)) throw IoError("no checkpoints directory in " + run_dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".bin") continue;
    long long step = -1;
    try {
      step = std::stoll(entry.path().stem().string());
    } catch (...) {
      continue;
    }
    if (step > best_step) {
      best_step = step;
      best = entry.path();
    }
  }
  if (best_step < 0) throw IoError("no checkpoints found in " + dir.string());
  *step_out = best_step;
  return best;
}

}  // namespace

std::filesystem::path analyze_run(const std::filesystem::path& run_dir, int n_batches) {
  RunConfig cfg = load_run_config(run_dir / "config.txt");
  nlohmann::json manifest = nlohmann::json::parse(read_text_file(run_dir / "manifest.json"));
  const uint64_t seed = manifest.at("seed").get<uint64_t>();

  long long ckpt_step = 0;
  Model model = load_checkpoint(latest_checkpoint(run_dir, &ckpt_step));

  SynthConfig data = cfg.data;
  data.seed = Rng::mix(cfg.data.seed, seed);
  SynthTask task = make_synth_task(data);

  auto out_dir = run_dir / "analysis";
  std::filesystem::create_directories(out_dir);

  ComputeMap combined;
  const int k = model.cfg.routing.k_max;
  Vector r_counts = Vector::Zero(k + 1);
  long long pairs = 0;
  ComputeMap first_map;

  const int base = 1'000'000 + static_cast<int>(Rng::mix(seed, 0xe7a1ULL) % 1000) * 100;
  for (int b = 0; b < n_batches; ++b) {
    auto [batch, targets] = gen_batch(task, data, base + b);
    (void)targets;
    ModelState state;
    model_forward(model, batch.x, false, &state);
    std::vector<RoutingDecision> decisions;
    for (auto& ls : state.layers) decisions.push_back(ls.decision);
    ComputeMap map = compute_map(decisions, batch);
    for (const auto& d : decisions) {
      for (int t = 0; t < d.n_tokens; ++t) r_counts(d.real_count(t)) += 1;
      pairs += d.n_tokens;
    }
    for (Index t = 0; t < map.tokens(); ++t) {
      combined.seq_id.push_back(b * 100000 + map.seq_id[static_cast<size_t>(t)]);
      combined.pos.push_back(map.pos[static_cast<size_t>(t)]);
      combined.modality.push_back(map.modality[static_cast<size_t>(t)]);
      combined.redundant.push_back(map.redundant[static_cast<size_t>(t)]);
    }
    Vector merged(combined.score.size() + map.score.size());
    if (combined.score.size() > 0) merged.head(combined.score.size()) = combined.score;
    merged.tail(map.score.size()) = map.score;
    combined.score = merged;
    if (b == 0) first_map = map;
  }

  {
    CsvWriter csv(out_dir / "map.csv", {"seq_id", "pos", "modality", "score"});
    for (Index t = 0; t < combined.tokens(); ++t)
      csv.row({format_int(combined.seq_id[static_cast<size_t>(t)]),
               format_int(combined.pos[static_cast<size_t>(t)]),
               modality_name(combined.modality[static_cast<size_t>(t)]),
               format_double(combined.score(t))});
  }
  {
    ModalityReport report = modality_report(combined);
    CsvWriter csv(out_dir / "modality.csv",
                  {"step", "modality", "token_share", "compute_share", "compute_intensity"});
    for (const auto& row : report.rows)
      csv.row({format_int(ckpt_step), modality_name(row.modality), format_double(row.token_share),
               format_double(row.compute_share), format_double(row.compute_intensity)});
  }
  {
    CsvWriter csv(out_dir / "polarization.csv", {"step", "r", "token_fraction"});
    for (int r = 0; r <= k; ++r)
      csv.row({format_int(ckpt_step), format_int(r),
               format_double(pairs > 0 ? r_counts(r) / static_cast<double>(pairs) : 0.0)});
  }

  // Heatmaps from the first batch: up to four vision sequences plus the text
  // strip. Conditioning tokens (pos 0 when n_tasks > 1) stay out of the grid.
  const bool conditioned = data.n_tasks > 1;
  std::map<int, std::vector<Index>> by_seq;
  for (Index t = 0; t < first_map.tokens(); ++t)
    by_seq[first_map.seq_id[static_cast<size_t>(t)]].push_back(t);
  int rendered_vision = 0;
  for (const auto& [seq, idx] : by_seq) {
    std::vector<Index> rows = idx;
    if (rows.empty()) continue;
    const bool vision = first_map.modality[static_cast<size_t>(rows[0])] == Modality::kVision;
    if (vision && rendered_vision >= 4) continue;
    if (conditioned && vision) rows.erase(rows.begin());
    if (rows.empty()) continue;
    ComputeMap sub;
    sub.score.resize(static_cast<Index>(rows.size()));
    for (size_t i = 0; i < rows.size(); ++i) {
      sub.seq_id.push_back(first_map.seq_id[static_cast<size_t>(rows[i])]);
      sub.pos.push_back(first_map.pos[static_cast<size_t>(rows[i])]);
      sub.modality.push_back(first_map.modality[static_cast<size_t>(rows[i])]);
      sub.redundant.push_back(first_map.redundant[static_cast<size_t>(rows[i])]);
      sub.score(static_cast<Index>(i)) = first_map.score(rows[i]);
    }
    int grid_rows = 1, grid_cols = static_cast<int>(rows.size());
    if (vision) {
      int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(rows.size()))));
      if (side * side == static_cast<int>(rows.size())) {
        grid_rows = side;
        grid_cols = side;
      }
    }
    std::string name =
        vision ? "heatmap_vision_" + std::to_string(seq) + ".svg" : "heatmap_text.svg";
    write_text_file(out_dir / name, render_heatmap(sub, grid_rows, grid_cols));
    if (vision) ++rendered_vision;
  }
  return out_dir;
}

}  // namespace nullmoe
