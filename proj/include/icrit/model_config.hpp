#pragma once

#include <string>
#include <vector>

namespace icrit {

/// Architecture of the double-stream backbone plus the probe/critic attachments.
///
/// Layer indices are 1-based: layer l means "after block l".
struct ModelConfig {
  int num_blocks = 8;
  int hidden_dim = 64;
  int num_heads = 4;
  int mlp_ratio = 2;
  int grid_h = 8;
  int grid_w = 8;
  /// Width of one noise token (patch * patch * image channels).
  int latent_dim = 12;
  /// Instruction tokens in the text stream (the critic, when present, follows them).
  int cond_tokens = 4;
  int cond_vocab = 8;
  /// Number of sinusoid frequencies; the time feature vector is twice this.
  int time_freqs = 32;
  std::vector<int> probe_layers = {2, 4, 6};
  bool critic_enabled = true;
  int projection_dim = 32;

  int noise_tokens() const { return grid_h * grid_w; }
  int critic_index() const { return cond_tokens; }
  int text_tokens(bool with_critic) const { return cond_tokens + (with_critic ? 1 : 0); }
  int sequence_length(bool with_critic) const { return text_tokens(with_critic) + noise_tokens(); }
  int probe_count() const { return static_cast<int>(probe_layers.size()); }
  /// Position of `layer` in probe_layers, or -1.
  int probe_slot(int layer) const;
  int deepest_probe() const { return probe_layers.back(); }

  /// Throws ConfigError on a violated invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;

  /// Desk-scale defaults: L=8, d=64, 4 heads, 8x8 token grid, probes {2,4,6}.
  static ModelConfig toy();
  /// Gradient-check scale: L=2, d=8, 2x2 grid, one probe.
  static ModelConfig micro();
};

}  // namespace icrit
