#include "nullmoe/config.hpp"

#include "nullmoe/io_util.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>

namespace nullmoe {

namespace {

struct RawEntry {
  std::string value;
  int line = 0;
};

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::map<std::string, RawEntry> tokenize(const std::string& text) {
  std::map<std::string, RawEntry> entries;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    size_t hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    std::string line = trim(raw);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": empty key or value");
    if (entries.count(key))
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    entries[key] = {value, line_no};
  }
  return entries;
}

long long parse_ll(const std::string& key, const RawEntry& e) {
  long long v = 0;
  auto res = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (res.ec != std::errc{} || res.ptr != e.value.data() + e.value.size())
    throw ConfigError("line " + std::to_string(e.line) + ": '" + key + "' expects an integer");
  return v;
}

double parse_f64(const std::string& key, const RawEntry& e) {
  double v = 0;
  auto res = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (res.ec != std::errc{} || res.ptr != e.value.data() + e.value.size())
    throw ConfigError("line " + std::to_string(e.line) + ": '" + key + "' expects a number");
  return v;
}

bool parse_bool(const std::string& key, const RawEntry& e) {
  if (e.value == "true") return true;
  if (e.value == "false") return false;
  throw ConfigError("line " + std::to_string(e.line) + ": '" + key + "' expects true or false");
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  auto entries = tokenize(text);
  RunConfig cfg;
  int n_experts = 16, k_max = 4;
  double rho = 0.5;
  NullVariant variant = NullVariant::kZero;
  bool use_shared = true;
  bool saw_version = false;

  auto take = [&](const std::string& key, auto&& apply) {
    auto it = entries.find(key);
    if (it == entries.end()) return;
    apply(it->second);
    entries.erase(it);
  };
  auto as_int = [&](const std::string& key, int& dst) {
    take(key, [&](const RawEntry& e) { dst = static_cast<int>(parse_ll(key, e)); });
  };
  auto as_f64 = [&](const std::string& key, double& dst) {
    take(key, [&](const RawEntry& e) { dst = parse_f64(key, e); });
  };

  take("version", [&](const RawEntry& e) {
    if (parse_ll("version", e) != 1)
      throw ConfigError("line " + std::to_string(e.line) + ": unsupported config version");
    saw_version = true;
  });

  as_int("model.d_model", cfg.model.d_model);
  as_int("model.hidden", cfg.model.hidden);
  as_int("model.n_layers", cfg.model.n_layers);

  as_int("routing.n_experts", n_experts);
  as_int("routing.k_max", k_max);
  as_f64("routing.rho", rho);
  take("routing.null_variant", [&](const RawEntry& e) {
    if (e.value == "zero") variant = NullVariant::kZero;
    else if (e.value == "copy") variant = NullVariant::kCopy;
    else throw ConfigError("line " + std::to_string(e.line) + ": null_variant must be zero or copy");
  });
  take("routing.use_shared_expert",
       [&](const RawEntry& e) { use_shared = parse_bool("routing.use_shared_expert", e); });

  as_int("data.tokens_per_batch", cfg.data.tokens_per_batch);
  as_f64("data.vision_fraction", cfg.data.vision_fraction);
  as_f64("data.redundancy", cfg.data.redundancy);
  as_int("data.n_templates", cfg.data.n_templates);
  as_f64("data.template_noise", cfg.data.template_noise);
  as_int("data.image_tokens", cfg.data.image_tokens);
  as_int("data.n_tasks", cfg.data.n_tasks);
  as_int("data.teacher_hidden", cfg.data.teacher_hidden);
  take("data.seed", [&](const RawEntry& e) {
    cfg.data.seed = static_cast<uint64_t>(parse_ll("data.seed", e));
  });

  as_f64("train.lr_peak", cfg.train.lr_peak);
  as_f64("train.lr_mult", cfg.train.lr_mult);
  as_f64("train.beta1", cfg.train.beta1);
  as_f64("train.beta2", cfg.train.beta2);
  as_f64("train.weight_decay", cfg.train.weight_decay);
  as_f64("train.adam_eps", cfg.train.adam_eps);
  as_int("train.warmup_steps", cfg.train.warmup_steps);
  as_f64("train.decay_fraction", cfg.train.decay_fraction);
  as_f64("train.decay_to", cfg.train.decay_to);
  as_int("train.dense_warmup_steps", cfg.train.dense_warmup_steps);
  as_int("train.null_warmup_steps", cfg.train.null_warmup_steps);
  as_int("train.total_steps", cfg.train.total_steps);
  take("train.w_balance", [&](const RawEntry& e) {
    cfg.train.aux.balance = static_cast<Scalar>(parse_f64("train.w_balance", e));
  });
  take("train.w_z", [&](const RawEntry& e) {
    cfg.train.aux.z = static_cast<Scalar>(parse_f64("train.w_z", e));
  });
  as_int("train.stats_every", cfg.train.stats_every);
  as_int("train.checkpoint_every", cfg.train.checkpoint_every);
  as_int("train.final_loss_window", cfg.train.final_loss_window);
  as_int("train.eval_batches", cfg.train.eval_batches);

  if (!entries.empty()) {
    const auto& [key, entry] = *entries.begin();
    throw ConfigError("line " + std::to_string(entry.line) + ": unknown key '" + key + "'");
  }
  if (!saw_version) throw ConfigError("missing required key 'version'");

  cfg.model.routing = RoutingConfig::make(n_experts, k_max, rho, variant, use_shared);
  cfg.data.d_model = cfg.model.d_model;  // one width for the whole pipeline
  cfg.data.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_text_file(path));
}

std::string canonical_config(const RunConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["version"] = "1";
  kv["model.d_model"] = format_int(cfg.model.d_model);
  kv["model.hidden"] = format_int(cfg.model.hidden);
  kv["model.n_layers"] = format_int(cfg.model.n_layers);
  kv["routing.n_experts"] = format_int(cfg.model.routing.n_experts);
  kv["routing.k_max"] = format_int(cfg.model.routing.k_max);
  kv["routing.rho"] = format_double(cfg.model.routing.rho);
  kv["routing.null_variant"] = null_variant_name(cfg.model.routing.null_variant);
  kv["routing.use_shared_expert"] = cfg.model.routing.use_shared_expert ? "true" : "false";
  kv["data.tokens_per_batch"] = format_int(cfg.data.tokens_per_batch);
  kv["data.vision_fraction"] = format_double(cfg.data.vision_fraction);
  kv["data.redundancy"] = format_double(cfg.data.redundancy);
  kv["data.n_templates"] = format_int(cfg.data.n_templates);
  kv["data.template_noise"] = format_double(cfg.data.template_noise);
  kv["data.image_tokens"] = format_int(cfg.data.image_tokens);
  kv["data.n_tasks"] = format_int(cfg.data.n_tasks);
  kv["data.teacher_hidden"] = format_int(cfg.data.teacher_hidden);
  kv["data.seed"] = format_int(static_cast<long long>(cfg.data.seed));
  kv["train.lr_peak"] = format_double(cfg.train.lr_peak);
  kv["train.lr_mult"] = format_double(cfg.train.lr_mult);
  kv["train.beta1"] = format_double(cfg.train.beta1);
  kv["train.beta2"] = format_double(cfg.train.beta2);
  kv["train.weight_decay"] = format_double(cfg.train.weight_decay);
  kv["train.adam_eps"] = format_double(cfg.train.adam_eps);
  kv["train.warmup_steps"] = format_int(cfg.train.warmup_steps);
  kv["train.decay_fraction"] = format_double(cfg.train.decay_fraction);
  kv["train.decay_to"] = format_double(cfg.train.decay_to);
  kv["train.dense_warmup_steps"] = format_int(cfg.train.dense_warmup_steps);
  kv["train.null_warmup_steps"] = format_int(cfg.train.null_warmup_steps);
  kv["train.total_steps"] = format_int(cfg.train.total_steps);
  kv["train.w_balance"] = format_double(cfg.train.aux.balance);
  kv["train.w_z"] = format_double(cfg.train.aux.z);
  kv["train.stats_every"] = format_int(cfg.train.stats_every);
  kv["train.checkpoint_every"] = format_int(cfg.train.checkpoint_every);
  kv["train.final_loss_window"] = format_int(cfg.train.final_loss_window);
  kv["train.eval_batches"] = format_int(cfg.train.eval_batches);

  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

uint64_t fnv1a64(const std::string& text) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash_hex(const RunConfig& cfg) {
  uint64_t h = fnv1a64(canonical_config(cfg));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace nullmoe
