#include "nullmoe/trainer.hpp"

#include "nullmoe/config.hpp"
#include "nullmoe/dispatch.hpp"
#include "nullmoe/io_util.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <deque>

namespace nullmoe {

void SynthConfig::validate() const {
  if (d_model < 4) throw ConfigError("data: d_model too small");
  if (tokens_per_batch < 1) throw ConfigError("data: tokens_per_batch must be >= 1");
  if (vision_fraction < 0.0 || vision_fraction > 1.0)
    throw ConfigError("data: vision_fraction must lie in [0, 1]");
  if (redundancy < 0.0 || redundancy > 1.0)
    throw ConfigError("data: redundancy must lie in [0, 1]");
  if (n_templates < 1) throw ConfigError("data: n_templates must be >= 1");
  if (image_tokens < 1) throw ConfigError("data: image_tokens must be >= 1");
  if (n_tasks < 1 || n_tasks > 2) throw ConfigError("data: n_tasks must be 1 or 2");
  if (teacher_hidden < 1) throw ConfigError("data: teacher_hidden must be >= 1");
}

void TrainConfig::validate() const {
  if (total_steps < 0) throw ConfigError("train: total_steps must be >= 0");
  if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
  if (dense_warmup_steps < 0) throw ConfigError("train: dense_warmup_steps must be >= 0");
  if (total_steps > 0 && dense_warmup_steps >= total_steps + 1)
    throw ConfigError("train: dense warmup must not exceed total steps");
  if (decay_fraction < 0.0 || decay_fraction > 1.0)
    throw ConfigError("train: decay_fraction must lie in [0, 1]");
  if (decay_to < 0.0 || decay_to > 1.0) throw ConfigError("train: decay_to must lie in [0, 1]");
  if (total_steps > 0) {
    int decay_steps = static_cast<int>(std::llround(decay_fraction * total_steps));
    if (warmup_steps > total_steps - decay_steps)
      throw ConfigError("train: warmup and decay windows overlap");
  }
  if (lr_peak <= 0.0 || lr_mult <= 0.0) throw ConfigError("train: learning rate must be positive");
}

// ---------------------------------------------------------------------------
// Synthetic stream
// ---------------------------------------------------------------------------

SynthTask make_synth_task(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(Rng::mix(cfg.seed, 0x7a5cULL));
  SynthTask task;

  // Templates cluster around a common direction so the vision-like stream
  // occupies its own region of activation space, as encoder embeddings do.
  Vector dir = rng.gaussian_vector(cfg.d_model);
  dir /= dir.norm();
  Vector mu = Scalar(3.0) * dir;
  task.templates.resize(cfg.n_templates, cfg.d_model);
  for (int i = 0; i < cfg.n_templates; ++i)
    task.templates.row(i) = mu.transpose() + rng.gaussian(1, cfg.d_model, 0.6).row(0);

  const double in_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double out_std = 1.6 / std::sqrt(static_cast<double>(cfg.teacher_hidden));
  task.teacher_in = rng.gaussian(cfg.teacher_hidden, cfg.d_model, in_std);
  task.teacher_out = rng.gaussian(cfg.d_model, cfg.teacher_hidden, out_std);

  task.vision_map = Matrix::Identity(cfg.d_model, cfg.d_model) +
                    rng.gaussian(cfg.d_model, cfg.d_model, 0.4 * in_std);

  task.template_task.resize(static_cast<size_t>(cfg.n_templates), -1);
  if (cfg.n_tasks > 1)
    for (int i = 0; i < cfg.n_templates; ++i)
      task.template_task[static_cast<size_t>(i)] = i % cfg.n_tasks;
  return task;
}

namespace {

Vector teacher_eval(const SynthTask& task, const Vector& x) {
  Vector h = task.teacher_in * x;
  for (Index i = 0; i < h.size(); ++i) h(i) = std::tanh(h(i));
  return task.teacher_out * h;
}

constexpr Scalar kTaskSignal = Scalar(1.5);

Scalar task_signal(int task_id) { return task_id == 0 ? kTaskSignal : -kTaskSignal; }

}  // namespace

std::pair<TokenBatch, Matrix> gen_batch(const SynthTask& task, const SynthConfig& cfg, int step) {
  cfg.validate();
  Rng rng(Rng::mix(Rng::mix(cfg.seed, 0xba7cULL), static_cast<uint64_t>(step)));

  const int t_total = cfg.tokens_per_batch;
  const int n_vision = static_cast<int>(std::llround(cfg.vision_fraction * t_total));
  const int d = cfg.d_model;
  const bool conditioned = cfg.n_tasks > 1;

  TokenBatch batch;
  batch.x.resize(t_total, d);
  Matrix targets(t_total, d);
  batch.modality.resize(static_cast<size_t>(t_total));
  batch.seq_id.resize(static_cast<size_t>(t_total));
  batch.pos.resize(static_cast<size_t>(t_total));
  batch.redundant.resize(static_cast<size_t>(t_total));
  batch.task_id.resize(static_cast<size_t>(t_total));

  const int per_image = cfg.image_tokens + (conditioned ? 1 : 0);
  const int n_images = (n_vision + per_image - 1) / std::max(per_image, 1);
  std::vector<int> image_task(static_cast<size_t>(std::max(n_images, 1)), 0);
  if (conditioned)
    for (auto& t : image_task) t = rng.uniform_int(cfg.n_tasks);
  const int text_task = conditioned ? rng.uniform_int(cfg.n_tasks) : 0;

  for (int t = 0; t < t_total; ++t) {
    const bool is_vision = t < n_vision;
    int seq, pos, tid;
    if (is_vision) {
      seq = t / per_image;
      pos = t % per_image;
      tid = image_task[static_cast<size_t>(seq)];
    } else {
      seq = n_images;  // single text strip after the vision sequences
      pos = t - n_vision;
      tid = text_task;
    }
    batch.modality[static_cast<size_t>(t)] = is_vision ? Modality::kVision : Modality::kText;
    batch.seq_id[static_cast<size_t>(t)] = seq;
    batch.pos[static_cast<size_t>(t)] = pos;
    batch.task_id[static_cast<size_t>(t)] = tid;

    Vector x(d);
    bool redundant = false;
    bool informative;
    if (conditioned && is_vision && pos == 0) {
      // conditioning token: the task id itself, no informative content
      for (Index i = 0; i < d; ++i) x(i) = static_cast<Scalar>(0.1 * rng.normal());
      informative = false;
    } else if (is_vision && rng.uniform() < cfg.redundancy) {
      int idx = rng.uniform_int(cfg.n_templates);
      x = task.templates.row(idx).transpose();
      for (Index i = 0; i < d; ++i) x(i) += static_cast<Scalar>(cfg.template_noise * rng.normal());
      redundant = true;
      informative = conditioned && task.template_task[static_cast<size_t>(idx)] == tid;
    } else {
      for (Index i = 0; i < d; ++i) x(i) = static_cast<Scalar>(rng.normal());
      informative = true;
    }
    if (conditioned) x(d - 1) = task_signal(tid);

    batch.redundant[static_cast<size_t>(t)] = redundant ? 1 : 0;
    batch.x.row(t) = x.transpose();
    Vector y = informative ? teacher_eval(task, x) : Vector(task.vision_map * x);
    targets.row(t) = y.transpose();
  }
  return {std::move(batch), std::move(targets)};
}

std::pair<TokenBatch, Matrix> gen_batch(const SynthConfig& cfg, int step) {
  SynthTask task = make_synth_task(cfg);
  return gen_batch(task, cfg, step);
}

// ---------------------------------------------------------------------------
// Schedule and optimizer
// ---------------------------------------------------------------------------

double wsd_lr(int step, const TrainConfig& cfg) {
  const double peak = cfg.peak_lr();
  if (cfg.total_steps <= 0) return peak;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return peak * static_cast<double>(step) / cfg.warmup_steps;
  const int decay_steps = static_cast<int>(std::llround(cfg.decay_fraction * cfg.total_steps));
  const int decay_start = cfg.total_steps - decay_steps;
  if (decay_steps > 0 && step >= decay_start) {
    const int last = cfg.total_steps - 1;
    double u = last > decay_start
                   ? static_cast<double>(step - decay_start) / (last - decay_start)
                   : 1.0;
    return peak * (1.0 - u * (1.0 - cfg.decay_to));
  }
  return peak;
}

void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, const TrainConfig& cfg,
                double lr, int t) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols())
    throw ShapeError("adamw_step: param/grad shape mismatch");
  if (state.m.size() == 0) {
    state.m = Matrix::Zero(param.rows(), param.cols());
    state.v = Matrix::Zero(param.rows(), param.cols());
  }
  const Scalar b1 = static_cast<Scalar>(cfg.beta1);
  const Scalar b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar bc1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(t));
  const Scalar bc2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(t));
  const Scalar eps = static_cast<Scalar>(cfg.adam_eps);
  const Scalar wd = static_cast<Scalar>(cfg.weight_decay);
  const Scalar lrs = static_cast<Scalar>(lr);
  for (Index r = 0; r < param.rows(); ++r) {
    for (Index c = 0; c < param.cols(); ++c) {
      Scalar g = grad(r, c);
      state.m(r, c) = b1 * state.m(r, c) + (Scalar(1) - b1) * g;
      state.v(r, c) = b2 * state.v(r, c) + (Scalar(1) - b2) * g * g;
      Scalar mhat = state.m(r, c) / bc1;
      Scalar vhat = state.v(r, c) / bc2;
      param(r, c) -= lrs * (mhat / (std::sqrt(vhat) + eps) + wd * param(r, c));
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

struct GroupAccum {
  double score_sum = 0;
  long long count = 0;

  double intensity() const { return count == 0 ? 0.0 : score_sum / static_cast<double>(count); }
};

struct EvalAccum {
  GroupAccum vision, text, redundant_vision;
  Vector r_hist;
  long long pair_count = 0;
  long long batch_count = 0;
  long long dilution_count = 0;
  double loss_sum = 0;
  double dilution_sum = 0;

  explicit EvalAccum(int k_max) : r_hist(Vector::Zero(k_max + 1)) {}
};

void eval_batch(const Model& model, const SynthTask& task, const SynthConfig& data, int step,
                EvalAccum& acc) {
  auto [batch, targets] = gen_batch(task, data, step);
  ModelState state;
  Matrix pred = model_forward(model, batch.x, false, &state);
  Matrix err = pred - targets;
  acc.loss_sum += err.squaredNorm() / static_cast<double>(err.rows() * err.cols());
  ++acc.batch_count;

  std::vector<RoutingDecision> decisions;
  decisions.reserve(state.layers.size());
  for (auto& ls : state.layers) decisions.push_back(ls.decision);
  ComputeMap map = compute_map(decisions, batch);

  const int k = model.cfg.routing.k_max;
  for (const auto& d : decisions) {
    for (int t = 0; t < d.n_tokens; ++t) {
      acc.r_hist(d.real_count(t)) += 1;
      ++acc.pair_count;
      acc.dilution_sum += static_cast<double>(k - d.real_count(t)) * d.null_prob(t);
      ++acc.dilution_count;
    }
  }
  for (Index t = 0; t < map.tokens(); ++t) {
    bool is_vision = map.modality[static_cast<size_t>(t)] == Modality::kVision;
    GroupAccum& g = is_vision ? acc.vision : acc.text;
    g.score_sum += map.score(t);
    ++g.count;
    if (is_vision && map.redundant[static_cast<size_t>(t)]) {
      acc.redundant_vision.score_sum += map.score(t);
      ++acc.redundant_vision.count;
    }
  }
}

}  // namespace

EvalReport evaluate_model(const Model& model, const SynthConfig& data, uint64_t seed,
                          int n_batches) {
  SynthTask task = make_synth_task(data);
  const int k = model.cfg.routing.k_max;
  EvalAccum acc(k);

  // Held-out steps far beyond any training horizon.
  const int base = 1'000'000 + static_cast<int>(Rng::mix(seed, 0xe7a1ULL) % 1000) * 100;
  for (int i = 0; i < n_batches; ++i) eval_batch(model, task, data, base + i, acc);

  // A fully redundant batch isolates the redundant-vision group.
  SynthConfig redundant_cfg = data;
  redundant_cfg.redundancy = 1.0;
  EvalAccum redundant_acc(k);
  eval_batch(model, task, redundant_cfg, 2'000'000, redundant_acc);

  EvalReport rep;
  rep.task_loss = acc.batch_count ? acc.loss_sum / static_cast<double>(acc.batch_count) : 0.0;
  rep.vision_intensity = acc.vision.intensity();
  rep.text_intensity = acc.text.intensity();
  rep.redundant_vision_intensity = redundant_acc.redundant_vision.count > 0
                                       ? redundant_acc.redundant_vision.intensity()
                                       : acc.redundant_vision.intensity();
  rep.dilution_estimate =
      acc.dilution_count ? acc.dilution_sum / static_cast<double>(acc.dilution_count) : 0.0;
  if (acc.pair_count > 0) {
    rep.r0_fraction = acc.r_hist(0) / static_cast<double>(acc.pair_count);
    rep.rk_fraction = acc.r_hist(k) / static_cast<double>(acc.pair_count);
    double mean_r = 0;
    for (int r = 0; r <= k; ++r) mean_r += r * acc.r_hist(r);
    rep.realized_ek = mean_r / static_cast<double>(acc.pair_count);
    rep.polarization = acc.r_hist / static_cast<Scalar>(acc.pair_count);
  } else {
    rep.polarization = acc.r_hist;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

std::string iso_timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct ParamRegistry {
  std::vector<Matrix*> params;
  std::vector<Matrix*> grads;

  static ParamRegistry build(Model& model, ModelGrads& g) {
    ParamRegistry reg;
    for (size_t l = 0; l < model.layers.size(); ++l) {
      LayerParams& p = model.layers[l];
      LayerGrads& lg = g.layers[l];
      reg.params.push_back(&p.router_w);
      reg.grads.push_back(&lg.router_w);
      reg.params.push_back(&p.bank.shared.w_in);
      reg.grads.push_back(&lg.bank.shared.w_in);
      reg.params.push_back(&p.bank.shared.w_out);
      reg.grads.push_back(&lg.bank.shared.w_out);
      for (size_t e = 0; e < p.bank.experts.size(); ++e) {
        reg.params.push_back(&p.bank.experts[e].w_in);
        reg.grads.push_back(&lg.bank.experts[e].w_in);
        reg.params.push_back(&p.bank.experts[e].w_out);
        reg.grads.push_back(&lg.bank.experts[e].w_out);
      }
    }
    return reg;
  }
};

void write_stats_csv(const std::filesystem::path& path, const ModelLosses& aux) {
  CsvWriter csv(path, {"layer", "slot", "kind", "f", "P"});
  for (size_t l = 0; l < aux.stats.size(); ++l) {
    const RoutingStats& s = aux.stats[l];
    for (int i = 0; i < s.n_slots(); ++i) {
      csv.row({format_int(static_cast<long long>(l)), format_int(i),
               i < s.n_experts ? "real" : "null", format_double(s.f(i)), format_double(s.P(i))});
    }
  }
}

}  // namespace

TrainSummary train(const RunConfig& cfg, const std::filesystem::path& out_dir, uint64_t seed) {
  cfg.model.routing.validate();
  cfg.data.validate();
  cfg.train.validate();
  if (cfg.data.d_model != cfg.model.d_model)
    throw ConfigError("train: data width and model width differ");

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  fs::create_directories(out_dir / "stats");
  fs::create_directories(out_dir / "checkpoints");

  const std::string started_at = iso_timestamp();
  write_text_file(out_dir / "config.txt", canonical_config(cfg));

  SynthConfig data = cfg.data;
  data.seed = Rng::mix(cfg.data.seed, seed);
  SynthTask task = make_synth_task(data);

  Model model = Model::init(cfg.model, Rng::mix(seed, 0x0d31ULL));
  ModelGrads grads = ModelGrads::zeros_like(model);
  ParamRegistry reg = ParamRegistry::build(model, grads);
  std::vector<AdamState> adam(reg.params.size());

  CsvWriter metrics(out_dir / "metrics.csv",
                    {"step", "lr", "loss_total", "loss_task", "loss_balance", "loss_z",
                     "realized_ek", "r0_fraction", "dense_warmup"});

  const int total = cfg.train.total_steps;
  const int window = cfg.train.final_loss_window > 0 ? cfg.train.final_loss_window
                                                     : std::max(1, total / 10);
  std::deque<double> tail_task, tail_total;
  long long routed_macs = 0, dense_macs = 0, shared_macs = 0;

  for (int step = 0; step < total; ++step) {
    const double lr = wsd_lr(step, cfg.train);
    const bool warm = step < cfg.train.dense_warmup_steps;

    RoutingConfig routing = cfg.model.routing;
    if (!warm && cfg.train.null_warmup_steps > 0) {
      int ramp = step - cfg.train.dense_warmup_steps;
      if (ramp < cfg.train.null_warmup_steps) {
        double frac = static_cast<double>(ramp) / cfg.train.null_warmup_steps;
        routing.n_null_copies =
            static_cast<int>(std::llround(frac * cfg.model.routing.n_null_copies));
      }
    }

    try {
      auto [batch, targets] = gen_batch(task, data, step);
      ModelState state;
      Matrix pred = model_forward(model, batch.x, warm, &state, &routing);
      Matrix err = pred - targets;
      const double task_loss =
          err.squaredNorm() / static_cast<double>(err.rows() * err.cols());
      ModelLosses aux = model_aux_losses(state);
      const double step_total =
          total_loss(static_cast<Scalar>(task_loss), aux.balance, aux.z, cfg.train.aux);
      if (!std::isfinite(step_total)) throw NumericError("non-finite loss at step " + std::to_string(step));

      double ek = 0, r0 = 0;
      for (const auto& ls : state.layers) {
        ek += ls.decision.realized_expected_active() / static_cast<double>(state.layers.size());
        r0 += ls.decision.zero_real_fraction() / static_cast<double>(state.layers.size());
        FlopCount fc = flop_report(ls.plan, model.cfg.d_model, model.cfg.hidden);
        routed_macs += fc.routed_macs;
        dense_macs += fc.dense_macs;
        shared_macs += fc.shared_macs;
      }

      grads.set_zero();
      Matrix dpred = (Scalar(2) / static_cast<Scalar>(err.rows() * err.cols())) * err;
      model_backward(model, state, dpred, cfg.train.aux, aux, grads);
      for (size_t i = 0; i < reg.params.size(); ++i)
        adamw_step(*reg.params[i], *reg.grads[i], adam[i], cfg.train, lr, step + 1);

      metrics.row({format_int(step), format_double(lr), format_double(step_total),
                   format_double(task_loss), format_double(aux.balance), format_double(aux.z),
                   format_double(ek), format_double(r0), format_int(warm ? 1 : 0)});

      tail_task.push_back(task_loss);
      tail_total.push_back(step_total);
      if (static_cast<int>(tail_task.size()) > window) {
        tail_task.pop_front();
        tail_total.pop_front();
      }

      if (cfg.train.stats_every > 0 && step % cfg.train.stats_every == 0)
        write_stats_csv(out_dir / "stats" / (std::to_string(step) + ".csv"), aux);
      if (cfg.train.checkpoint_every > 0 && (step + 1) % cfg.train.checkpoint_every == 0)
        save_checkpoint(out_dir / "checkpoints" / (std::to_string(step + 1) + ".bin"), model);
    } catch (const NumericError& e) {
      write_text_file(out_dir / "diagnostic.txt",
                      std::string("aborted at step ") + std::to_string(step) + ": " + e.what() +
                          "\n");
      throw;
    }
  }
  metrics.flush();

  save_checkpoint(out_dir / "checkpoints" / (std::to_string(total) + ".bin"), model);

  TrainSummary summary;
  summary.steps = total;
  summary.run_dir = out_dir;
  summary.final_checkpoint = out_dir / "checkpoints" / (std::to_string(total) + ".bin");
  summary.realized_rho = cfg.model.routing.realized_rho();
  if (!tail_task.empty()) {
    for (double v : tail_task) summary.final_task_loss += v;
    summary.final_task_loss /= static_cast<double>(tail_task.size());
    for (double v : tail_total) summary.final_total_loss += v;
    summary.final_total_loss /= static_cast<double>(tail_total.size());
  }
  summary.eval = evaluate_model(model, data, seed, cfg.train.eval_batches);

  nlohmann::json manifest;
  manifest["run_id"] = out_dir.filename().string() + "-" + config_hash_hex(cfg);
  manifest["config_hash"] = config_hash_hex(cfg);
  manifest["seed"] = seed;
  manifest["version"] = "nullmoe-0.1.0";
  manifest["started_at"] = started_at;
  manifest["finished_at"] = iso_timestamp();
  manifest["steps"] = total;
  manifest["realized_rho"] = summary.realized_rho;
  manifest["realized_ek"] = summary.eval.realized_ek;
  manifest["target_ek"] = expected_active(cfg.model.routing);
  manifest["final_task_loss"] = summary.final_task_loss;
  manifest["flops"] = {{"routed_macs", routed_macs},
                       {"dense_macs", dense_macs},
                       {"shared_macs", shared_macs}};
  write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return summary;
}

}  // namespace nullmoe
