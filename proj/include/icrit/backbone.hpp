#pragma once

#include <map>
#include <vector>

#include "icrit/autograd.hpp"
#include "icrit/model_config.hpp"
#include "icrit/spatial_map.hpp"

namespace icrit {

/// Instruction code as embedded into the text stream. `null` selects the learned
/// null-condition tokens used for classifier-free guidance.
struct Condition {
  std::vector<int> codes;
  bool null = false;
};

/// Sinusoidal features of t over log-spaced frequencies: [cos..., sin...].
/// Throws DomainError for t outside [0, 1].
template <class T>
Tensor<T> time_features(T t, int freqs);

template <class T>
struct LayerTrace {
  Var<T> noise;   // S x d
  Var<T> text;    // instruction tokens, critic excluded
  Var<T> critic;  // 1 x d, undefined without a critic token
};

/// Read-only taps captured after a block's residual update.
template <class T>
struct BlockTrace {
  std::map<int, LayerTrace<T>> layers;
  /// Scaled pre-softmax scores, heads x N x N.
  std::map<int, Tensor<T>> scores;
  bool has_critic = false;
  std::size_t text_tokens = 0;  // including the critic slot if present

  const LayerTrace<T>& at(int layer) const;
  const Tensor<T>& scores_at(int layer) const;
  std::size_t noise_offset() const { return text_tokens; }
};

template <class T>
struct ForwardRequest {
  const Tensor<T>* noise = nullptr;   // S x d_z, the state x_t
  const Tensor<T>* source = nullptr;  // S x d_z source latent
  Condition condition;
  T t = T(0);
  /// Critic token appended at the last text-stream slot; undefined = absent.
  Var<T> critic_token;
  /// Optional additive mask over the joint sequence.
  const Tensor<T>* attn_mask = nullptr;
  std::vector<int> trace_layers;
  std::vector<int> score_layers;
  /// Run blocks 1..last_block only; the velocity head is skipped if < L. 0 = all.
  int last_block = 0;
};

template <class T>
struct ForwardResult {
  Var<T> velocity;  // S x d_z, undefined on early exit
  Var<T> time_embedding;  // 1 x d
  BlockTrace<T> trace;
};

/// Double-stream joint-attention transformer with adaLN-zero modulation.
template <class T>
class Backbone {
 public:
  explicit Backbone(const ModelConfig& config, std::uint64_t seed = 0);

  const ModelConfig& config() const { return config_; }

  /// Learned projection of time_features(t) to width d.
  Var<T> time_embedding(T t, Tape<T>& tape) const;

  ForwardResult<T> forward(const ForwardRequest<T>& request, Tape<T>& tape) const;

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;

  /// Zeroes every block's weights (identity residual path), for tests.
  void zero_blocks();

 private:
  struct Linear {
    Parameter<T> w, b;
  };
  struct Stream {
    Linear mod, qkv, out, ff1, ff2;
  };
  struct Block {
    Stream text, image;
  };

  Linear make_linear(const std::string& name, int in, int out, bool zero);

  ModelConfig config_;
  std::uint64_t seed_;
  Linear time_proj_;
  Linear noise_in_;
  Parameter<T> source_in_;
  Parameter<T> pos_embed_;
  std::vector<Parameter<T>> cond_tables_;
  Parameter<T> null_cond_;
  std::vector<Block> blocks_;
  Linear final_mod_;
  Linear head_;
};

/// For every noise token acting as a key, the sum of pre-softmax scores it
/// receives over all queries and heads, arranged on the token grid.
template <class T>
SpatialMap attention_key_mass(const BlockTrace<T>& trace, int layer, int grid_h, int grid_w);

/// Fills `p` from N(0, stddev^2) using a stream derived from (seed, name).
template <class T>
void init_normal(Parameter<T>& p, std::uint64_t seed, double stddev);

}  // namespace icrit
