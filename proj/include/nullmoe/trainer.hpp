#pragma once

#include "nullmoe/analytics.hpp"
#include "nullmoe/losses.hpp"
#include "nullmoe/model.hpp"
#include "nullmoe/rng.hpp"
#include "nullmoe/types.hpp"

#include <filesystem>
#include <utility>
#include <vector>

namespace nullmoe {

// Synthetic two-modality stream. Text-like tokens are i.i.d. Gaussian with a
// fixed hidden nonlinear regression target; vision-like tokens are, with
// probability `redundancy`, near-duplicates of a small template set whose
// target is a fixed linear map (fittable by the residual path plus shared
// expert alone). The stream is fully determined by (seed, step).
struct SynthConfig {
  int d_model = 32;
  int tokens_per_batch = 1024;
  double vision_fraction = 0.78;
  double redundancy = 0.9;
  int n_templates = 16;
  double template_noise = 0.05;
  int image_tokens = 64;  // tokens per vision sequence (rendered as a grid)
  int n_tasks = 1;        // >1 enables the conditioning-token mechanism
  int teacher_hidden = 256;
  uint64_t seed = 0;

  void validate() const;
};

// Fixed functions behind the stream: template set, hidden teacher, linear
// vision map. Deterministic in cfg.seed.
struct SynthTask {
  Matrix templates;       // n_templates x D
  Matrix teacher_in;      // teacher_hidden x D
  Matrix teacher_out;     // D x teacher_hidden
  Matrix vision_map;      // D x D
  std::vector<int> template_task;  // task id under which a template is informative (-1: never)
};

SynthTask make_synth_task(const SynthConfig& cfg);

std::pair<TokenBatch, Matrix> gen_batch(const SynthTask& task, const SynthConfig& cfg, int step);
// Convenience overload that rebuilds the task internally.
std::pair<TokenBatch, Matrix> gen_batch(const SynthConfig& cfg, int step);

struct TrainConfig {
  double lr_peak = 2e-5;  // production-scale base rate; lr_mult rescales it for the toy task
  double lr_mult = 50.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double adam_eps = 1e-8;
  int warmup_steps = 100;
  double decay_fraction = 0.1;  // final fraction of steps spent decaying
  double decay_to = 0.1;        // floor as a fraction of peak
  int dense_warmup_steps = 150;
  int null_warmup_steps = 0;  // linear ramp of M after dense warmup (copy-expert study)
  int total_steps = 1500;
  LossWeights aux;
  int stats_every = 250;
  int checkpoint_every = 0;  // 0: final checkpoint only
  int final_loss_window = 0; // 0: last 10% of steps
  int eval_batches = 4;

  double peak_lr() const { return lr_peak * lr_mult; }
  void validate() const;
};

double wsd_lr(int step, const TrainConfig& cfg);

struct AdamState {
  Matrix m;
  Matrix v;
};

// Decoupled weight decay, bias-corrected moments. `t` is 1-based.
void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, const TrainConfig& cfg,
                double lr, int t);

struct RunConfig {
  ModelConfig model;
  SynthConfig data;
  TrainConfig train;
};

// End-of-run evaluation on held-out batches (plus one fully-redundant batch
// so the redundant-vision group is measured in isolation).
struct EvalReport {
  double task_loss = 0;
  double realized_ek = 0;     // mean real slots per (token, layer)
  double r0_fraction = 0;     // pooled over (token, layer)
  double rk_fraction = 0;
  double vision_intensity = 0;
  double text_intensity = 0;
  double redundant_vision_intensity = 0;
  double dilution_estimate = 0;  // mean selected null gate mass per token
  Vector polarization;           // pooled histogram over r
};

EvalReport evaluate_model(const Model& model, const SynthConfig& data, uint64_t seed,
                          int n_batches);

struct TrainSummary {
  int steps = 0;
  double final_task_loss = 0;  // mean over the final window
  double final_total_loss = 0;
  EvalReport eval;
  double realized_rho = 0;
  std::filesystem::path run_dir;
  std::filesystem::path final_checkpoint;
};

// Runs the toy loop and writes the run directory: config snapshot,
// metrics.csv, stats/<step>.csv, checkpoints/<step>.bin, manifest.json.
// Aborts with NumericError (after writing a diagnostic snapshot) if the loss
// goes non-finite.
TrainSummary train(const RunConfig& cfg, const std::filesystem::path& out_dir, uint64_t seed);

}  // namespace nullmoe
