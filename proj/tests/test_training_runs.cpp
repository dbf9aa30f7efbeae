#include "nullmoe/analyze.hpp"
#include "nullmoe/io_util.hpp"
#include "nullmoe/trainer.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace nullmoe;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("training_runs");

namespace {

RunConfig small_run_config() {
  RunConfig cfg;
  cfg.model.d_model = 16;
  cfg.model.hidden = 24;
  cfg.model.n_layers = 2;
  cfg.model.routing = RoutingConfig::make(8, 4, 0.5);
  cfg.data.d_model = 16;
  cfg.data.tokens_per_batch = 192;
  cfg.data.n_templates = 8;
  cfg.data.teacher_hidden = 48;
  cfg.train.total_steps = 240;
  cfg.train.warmup_steps = 20;
  cfg.train.dense_warmup_steps = 30;
  cfg.train.stats_every = 100;
  cfg.train.eval_batches = 2;
  return cfg;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

}  // namespace

TEST_CASE("short toy run learns and writes the full run directory") {
  RunConfig cfg = small_run_config();
  fs::path dir = fs::temp_directory_path() / "nullmoe_short_run";
  fs::remove_all(dir);
  TrainSummary s = train(cfg, dir, 1);

  CHECK(fs::exists(dir / "config.txt"));
  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "checkpoints" / "240.bin"));
  CHECK(fs::exists(dir / "stats" / "0.csv"));
  CHECK(fs::exists(dir / "stats" / "200.csv"));

  // learning happened: final-window task loss well below the first step's
  std::ifstream metrics(dir / "metrics.csv");
  std::string line;
  std::getline(metrics, line);
  std::getline(metrics, line);
  double first_loss = std::stod(line.substr(line.find(',', line.find(',') + 1) + 1));
  CHECK(s.final_task_loss < 0.7 * first_loss);
  fs::remove_all(dir);
}

TEST_CASE("identical config and seed reproduce metrics.csv byte for byte") {
  RunConfig cfg = small_run_config();
  cfg.train.total_steps = 60;
  cfg.train.dense_warmup_steps = 10;
  cfg.train.warmup_steps = 5;
  fs::path d1 = fs::temp_directory_path() / "nullmoe_det_a";
  fs::path d2 = fs::temp_directory_path() / "nullmoe_det_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  train(cfg, d1, 9);
  train(cfg, d2, 9);
  CHECK(slurp(d1 / "metrics.csv") == slurp(d2 / "metrics.csv"));
  CHECK(slurp(d1 / "checkpoints" / "60.bin") == slurp(d2 / "checkpoints" / "60.bin"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("non-finite loss aborts with a diagnostic snapshot") {
  RunConfig cfg = small_run_config();
  cfg.train.total_steps = 40;
  cfg.train.dense_warmup_steps = 0;
  cfg.train.warmup_steps = 0;
  cfg.train.lr_mult = 5e11;  // absurd on purpose
  fs::path dir = fs::temp_directory_path() / "nullmoe_diverge";
  fs::remove_all(dir);
  CHECK_THROWS_AS(train(cfg, dir, 2), NumericError);
  CHECK(fs::exists(dir / "diagnostic.txt"));
  fs::remove_all(dir);
}

TEST_CASE("analyze_run replays a checkpoint into analytics csvs and svgs") {
  RunConfig cfg = small_run_config();
  cfg.train.total_steps = 50;
  cfg.train.dense_warmup_steps = 10;
  cfg.train.warmup_steps = 5;
  cfg.data.image_tokens = 16;  // 4x4 grids
  fs::path dir = fs::temp_directory_path() / "nullmoe_analyze";
  fs::remove_all(dir);
  train(cfg, dir, 6);
  fs::path out = analyze_run(dir, 2);
  CHECK(fs::exists(out / "map.csv"));
  CHECK(fs::exists(out / "modality.csv"));
  CHECK(fs::exists(out / "polarization.csv"));
  CHECK(fs::exists(out / "heatmap_text.svg"));
  bool any_vision = false;
  for (const auto& e : fs::directory_iterator(out))
    any_vision |= e.path().filename().string().rfind("heatmap_vision_", 0) == 0;
  CHECK(any_vision);

  std::ifstream map(out / "map.csv");
  std::string header;
  std::getline(map, header);
  CHECK(header == "seq_id,pos,modality,score");
  fs::remove_all(dir);
}

TEST_CASE("analyze of a dense run reports compute score 1 everywhere") {
  RunConfig cfg = small_run_config();
  cfg.model.routing = RoutingConfig::make(8, 2, 1.0);
  cfg.train.total_steps = 30;
  cfg.train.dense_warmup_steps = 5;
  cfg.train.warmup_steps = 5;
  fs::path dir = fs::temp_directory_path() / "nullmoe_analyze_dense";
  fs::remove_all(dir);
  train(cfg, dir, 8);
  fs::path out = analyze_run(dir, 1);
  std::ifstream map(out / "map.csv");
  std::string line;
  std::getline(map, line);
  int rows = 0;
  while (std::getline(map, line)) {
    ++rows;
    CHECK(line.substr(line.rfind(',') + 1) == "1");
  }
  CHECK(rows > 0);
  fs::remove_all(dir);
}

TEST_CASE("conditioning token shifts the compute map between tasks") {
  // two-task stream: a template group is informative only under its task, so
  // a trained model should spend real experts on it exactly then
  RunConfig cfg;
  cfg.model.d_model = 24;
  cfg.model.hidden = 48;
  cfg.model.n_layers = 2;
  cfg.model.routing = RoutingConfig::make(8, 4, 0.5);
  cfg.data.d_model = 24;
  cfg.data.tokens_per_batch = 256;
  cfg.data.n_templates = 8;
  cfg.data.n_tasks = 2;
  cfg.data.redundancy = 1.0;
  cfg.data.vision_fraction = 0.7;
  cfg.data.teacher_hidden = 48;
  cfg.train.total_steps = 900;
  cfg.train.warmup_steps = 50;
  cfg.train.dense_warmup_steps = 80;
  cfg.train.lr_mult = 50;
  cfg.train.stats_every = 0;
  cfg.train.eval_batches = 1;

  fs::path dir = fs::temp_directory_path() / "nullmoe_conditioning";
  fs::remove_all(dir);
  TrainSummary summary = train(cfg, dir, 13);
  Model model = load_checkpoint(summary.final_checkpoint);

  SynthConfig data = cfg.data;
  data.seed = Rng::mix(cfg.data.seed, 13);
  SynthTask task = make_synth_task(data);

  // score the same template token under both task signals
  double informative_score = 0, idle_score = 0;
  int informative_n = 0, idle_n = 0;
  for (int tmpl = 0; tmpl < cfg.data.n_templates; ++tmpl) {
    for (int tid = 0; tid < 2; ++tid) {
      Matrix x(1, cfg.model.d_model);
      x.row(0) = task.templates.row(tmpl);
      x(0, cfg.model.d_model - 1) = tid == 0 ? Scalar(1.5) : Scalar(-1.5);
      ModelState st;
      model_forward(model, x, false, &st);
      double score = 0;
      for (const auto& ls : st.layers)
        score += static_cast<double>(ls.decision.real_count(0)) / ls.decision.k_max /
                 static_cast<double>(st.layers.size());
      bool informative = task.template_task[static_cast<size_t>(tmpl)] == tid;
      if (informative) {
        informative_score += score;
        ++informative_n;
      } else {
        idle_score += score;
        ++idle_n;
      }
    }
  }
  informative_score /= informative_n;
  idle_score /= idle_n;
  INFO("informative ", informative_score, " idle ", idle_score);
  CHECK(informative_score > idle_score);
  fs::remove_all(dir);
}

TEST_SUITE_END();
