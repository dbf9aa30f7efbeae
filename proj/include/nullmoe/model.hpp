#pragma once

#include "nullmoe/moe_layer.hpp"

#include <filesystem>
#include <vector>

namespace nullmoe {

struct ModelConfig {
  int d_model = 32;
  int hidden = 64;
  int n_layers = 2;
  RoutingConfig routing;
};

// A residual stack of MoE layers: h_{l+1} = h_l + layer_l(h_l). The final
// hidden state is the prediction.
struct Model {
  ModelConfig cfg;
  std::vector<LayerParams> layers;

  static Model init(const ModelConfig& cfg, uint64_t seed);
};

struct ModelGrads {
  std::vector<LayerGrads> layers;

  static ModelGrads zeros_like(const Model& m);
  void set_zero();
};

struct ModelState {
  std::vector<Matrix> inputs;  // inputs[l] is the input to layer l
  std::vector<LayerState> layers;
};

// routing_override, when set, substitutes the routing config for every layer
// (used for the null-copy warmup ramp).
Matrix model_forward(const Model& m, const Matrix& x, bool dense_warmup, ModelState* save,
                     const RoutingConfig* routing_override = nullptr);

struct ModelLosses {
  Scalar balance = 0;  // mean over layers
  Scalar z = 0;        // mean over layers
  std::vector<RoutingStats> stats;
};

ModelLosses model_aux_losses(const ModelState& state);

// Backward through the residual stack. dy is d(task)/d(prediction); aux
// gradients are applied per layer with weight w/n_layers so the configured
// weights stay depth-free.
void model_backward(const Model& m, const ModelState& state, const Matrix& dy,
                    const LossWeights& aux_w, const ModelLosses& aux, ModelGrads& grads);

// Versioned flat binary checkpoint; byte-exact round trip.
void save_checkpoint(const std::filesystem::path& path, const Model& m);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace nullmoe
