#include "icrit/model_config.hpp"

#include <algorithm>

#include "icrit/errors.hpp"

namespace icrit {

int ModelConfig::probe_slot(int layer) const {
  auto it = std::find(probe_layers.begin(), probe_layers.end(), layer);
  return it == probe_layers.end() ? -1 : static_cast<int>(it - probe_layers.begin());
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (num_blocks < 1) fail("num_blocks must be >= 1");
  if (hidden_dim < 1 || num_heads < 1) fail("hidden_dim and num_heads must be positive");
  if (hidden_dim % num_heads != 0) fail("hidden_dim must be divisible by num_heads");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (grid_h < 1 || grid_w < 1) fail("grid must be non-empty");
  if (latent_dim < 1) fail("latent_dim must be positive");
  if (cond_tokens < 1 || cond_vocab < 1) fail("cond_tokens and cond_vocab must be positive");
  if (time_freqs < 1) fail("time_freqs must be positive");
  if (projection_dim < 1) fail("projection_dim must be positive");
  if (probe_layers.empty()) fail("probe layer set must be non-empty");
  for (std::size_t i = 0; i < probe_layers.size(); ++i) {
    if (probe_layers[i] < 1 || probe_layers[i] > num_blocks) {
      fail("probe layer " + std::to_string(probe_layers[i]) + " outside 1.." + std::to_string(num_blocks));
    }
    if (i > 0 && probe_layers[i] <= probe_layers[i - 1]) fail("probe layers must be strictly ascending");
  }
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.num_blocks = 2;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.grid_h = 2;
  c.grid_w = 2;
  c.latent_dim = 3;
  c.cond_tokens = 2;
  c.cond_vocab = 4;
  c.time_freqs = 4;
  c.probe_layers = {1};
  c.projection_dim = 4;
  return c;
}

}  // namespace icrit
