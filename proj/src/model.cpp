#include "nullmoe/model.hpp"

#include <cstring>
#include <fstream>

namespace nullmoe {

Model Model::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.routing.validate();
  Model m;
  m.cfg = cfg;
  m.layers.reserve(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    Rng rng(Rng::mix(seed, 0x10c0ffeeULL + static_cast<uint64_t>(l)));
    m.layers.push_back(LayerParams::init(cfg.routing, cfg.d_model, cfg.hidden, rng));
  }
  return m;
}

ModelGrads ModelGrads::zeros_like(const Model& m) {
  ModelGrads g;
  g.layers.reserve(m.layers.size());
  for (const auto& l : m.layers) g.layers.push_back(LayerGrads::zeros_like(l));
  return g;
}

void ModelGrads::set_zero() {
  for (auto& l : layers) l.set_zero();
}

Matrix model_forward(const Model& m, const Matrix& x, bool dense_warmup, ModelState* save,
                     const RoutingConfig* routing_override) {
  const RoutingConfig& routing = routing_override ? *routing_override : m.cfg.routing;
  Matrix h = x;
  if (save) {
    save->inputs.clear();
    save->layers.clear();
    save->layers.resize(m.layers.size());
  }
  for (size_t l = 0; l < m.layers.size(); ++l) {
    if (save) save->inputs.push_back(h);
    Matrix out = layer_forward(m.layers[l], h, routing, dense_warmup, save ? &save->layers[l] : nullptr);
    h += out;
  }
  return h;
}

ModelLosses model_aux_losses(const ModelState& state) {
  ModelLosses out;
  const Scalar n = static_cast<Scalar>(state.layers.size());
  for (const auto& ls : state.layers) {
    AuxLosses a = aux_losses(ls);
    out.balance += a.balance / n;
    out.z += a.z / n;
    out.stats.push_back(std::move(a.stats));
  }
  return out;
}

void model_backward(const Model& m, const ModelState& state, const Matrix& dy,
                    const LossWeights& aux_w, const ModelLosses& aux, ModelGrads& grads) {
  const Scalar layer_scale = Scalar(1) / static_cast<Scalar>(m.layers.size());
  Matrix dcur = dy;
  for (size_t li = m.layers.size(); li-- > 0;) {
    Matrix dxl = Matrix::Zero(dcur.rows(), dcur.cols());
    layer_backward(m.layers[li], state.layers[li], dcur, dxl, grads.layers[li]);
    aux_backward(m.layers[li], state.layers[li], aux.stats[li], aux_w.balance * layer_scale,
                 aux_w.z * layer_scale, dxl, grads.layers[li]);
    dcur += dxl;
  }
}

// ---------------------------------------------------------------------------
// Checkpoint format, version 1. Little-endian header then raw row-major
// parameter blocks in declared order (per layer: router, shared in/out, then
// each expert in/out).
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'N', 'U', 'L', 'L', 'M', 'O', 'E', '\0'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError("checkpoint: truncated header");
  return v;
}

double read_f64(std::istream& is) {
  double v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw IoError("checkpoint: truncated header");
  return v;
}

void write_matrix(std::ostream& os, const Matrix& m) {
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(Scalar)) * m.size());
}

void read_matrix(std::istream& is, Matrix& m) {
  if (!is.read(reinterpret_cast<char*>(m.data()),
               static_cast<std::streamsize>(sizeof(Scalar)) * m.size()))
    throw IoError("checkpoint: truncated parameter block");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kMagic, 8);
  write_u32(os, kVersion);
  write_u32(os, sizeof(Scalar));
  write_u32(os, static_cast<uint32_t>(m.cfg.n_layers));
  write_u32(os, static_cast<uint32_t>(m.cfg.routing.n_experts));
  write_u32(os, static_cast<uint32_t>(m.cfg.routing.n_null_copies));
  write_u32(os, static_cast<uint32_t>(m.cfg.d_model));
  write_u32(os, static_cast<uint32_t>(m.cfg.hidden));
  write_u32(os, static_cast<uint32_t>(m.cfg.routing.k_max));
  write_f64(os, m.cfg.routing.rho);
  write_u32(os, m.cfg.routing.null_variant == NullVariant::kCopy ? 1u : 0u);
  write_u32(os, m.cfg.routing.use_shared_expert ? 1u : 0u);
  for (const auto& layer : m.layers) {
    write_matrix(os, layer.router_w);
    write_matrix(os, layer.bank.shared.w_in);
    write_matrix(os, layer.bank.shared.w_out);
    for (const auto& e : layer.bank.experts) {
      write_matrix(os, e.w_in);
      write_matrix(os, e.w_out);
    }
  }
  if (!os) throw IoError("checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());
  if (read_u32(is) != kVersion) throw IoError("checkpoint: unsupported version");
  if (read_u32(is) != sizeof(Scalar))
    throw IoError("checkpoint: scalar width differs from this build");

  ModelConfig cfg;
  cfg.n_layers = static_cast<int>(read_u32(is));
  cfg.routing.n_experts = static_cast<int>(read_u32(is));
  cfg.routing.n_null_copies = static_cast<int>(read_u32(is));
  cfg.d_model = static_cast<int>(read_u32(is));
  cfg.hidden = static_cast<int>(read_u32(is));
  cfg.routing.k_max = static_cast<int>(read_u32(is));
  cfg.routing.rho = read_f64(is);
  cfg.routing.null_variant = read_u32(is) == 1 ? NullVariant::kCopy : NullVariant::kZero;
  cfg.routing.use_shared_expert = read_u32(is) == 1;
  cfg.routing.validate();
  if (cfg.n_layers < 1 || cfg.d_model < 1 || cfg.hidden < 1)
    throw IoError("checkpoint: invalid dimensions");

  Model m;
  m.cfg = cfg;
  m.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& layer : m.layers) {
    layer.router_w.resize(cfg.routing.n_experts + 1, cfg.d_model);
    read_matrix(is, layer.router_w);
    layer.bank.d_model = cfg.d_model;
    layer.bank.hidden = cfg.hidden;
    layer.bank.shared.w_in.resize(cfg.hidden, cfg.d_model);
    layer.bank.shared.w_out.resize(cfg.d_model, cfg.hidden);
    read_matrix(is, layer.bank.shared.w_in);
    read_matrix(is, layer.bank.shared.w_out);
    layer.bank.experts.resize(static_cast<size_t>(cfg.routing.n_experts));
    for (auto& e : layer.bank.experts) {
      e.w_in.resize(cfg.hidden, cfg.d_model);
      e.w_out.resize(cfg.d_model, cfg.hidden);
      read_matrix(is, e.w_in);
      read_matrix(is, e.w_out);
    }
  }
  // Trailing bytes mean the file does not match its header.
  is.peek();
  if (!is.eof()) throw IoError("checkpoint: trailing bytes in " + path.string());
  return m;
}

}  // namespace nullmoe
