#pragma once

#include <map>
#include <optional>
#include <vector>

#include "icrit/backbone.hpp"
#include "icrit/flow.hpp"

namespace icrit {

/// Three linear layers with GELU between them.
template <class T>
struct Mlp3 {
  Parameter<T> w1, b1, w2, b2, w3, b3;

  static Mlp3 make(const std::string& name, Group group, int in, int hidden, int out, std::uint64_t seed,
                   bool zero_last);
  Var<T> operator()(const Var<T>& x, Tape<T>& tape) const;
  void collect(std::vector<Parameter<T>*>& out);
};

/// Per-layer velocity probes g^(l) = MLP(AdaLN(sg(H^(l)), tau(t))). Group phi.
template <class T>
class ProbeHeads {
 public:
  ProbeHeads(const ModelConfig& config, std::uint64_t seed);

  /// `hidden` is H^(l) [S x d]; `time_embedding` is tau(t) [1 x d]. Both are
  /// read through a stop-gradient. Throws ConfigError if l is not probed.
  Var<T> forward(int layer, const Var<T>& hidden, const Var<T>& time_embedding, Tape<T>& tape) const;

  std::vector<Parameter<T>*> parameters();

 private:
  struct Head {
    Parameter<T> ada_w, ada_b;  // d -> 2d (shift, scale)
    Mlp3<T> mlp;
  };
  const Head& head(int layer) const;

  ModelConfig config_;
  std::vector<Head> heads_;
};

/// The critic token r plus per-layer projections psi^(l) (of r^(l)) and
/// chi^(l) (of sg(H^(l))).
template <class T>
class Critic {
 public:
  Critic(const ModelConfig& config, std::uint64_t seed);

  const Parameter<T>& token() const { return token_; }
  Parameter<T>& token() { return token_; }

  Var<T> project_r(int layer, const Var<T>& r_hidden, Tape<T>& tape) const;    // [1 x P]
  Var<T> project_h(int layer, const Var<T>& hidden, Tape<T>& tape) const;      // [S x P], reads sg(hidden)

  /// e_hat^(l)_i for every noise token: [S].
  Var<T> predict(int layer, const Var<T>& r_hidden, const Var<T>& hidden, Tape<T>& tape) const;

  std::vector<Parameter<T>*> parameters();

 private:
  std::size_t slot(int layer) const;

  ModelConfig config_;
  Parameter<T> token_;
  std::vector<Mlp3<T>> psi_;
  std::vector<Mlp3<T>> chi_;
};

/// <psi_out, chi_out_i> for each row i of chi_out [S x P] against psi_out [1 x P].
template <class T>
Var<T> critic_inner(const Var<T>& psi_out, const Var<T>& chi_out);

/// Mean over layers of gen_loss(probe output, v*). Throws ConfigError when a
/// probed layer has no output or an unprobed one is present.
template <class T>
Var<T> probe_loss(const std::map<int, Var<T>>& outputs, const Tensor<T>& v_star, const ModelConfig& config);

/// log(1 + sum_c (probe_i - v*_i)^2) per token; not differentiable by construction.
template <class T>
Tensor<T> critic_target(const Tensor<T>& probe_output, const Tensor<T>& v_star);

/// Mean over all layers and tokens of (e_hat - sg(e))^2. The maps must share
/// their layer keys and token counts, else ConfigError.
template <class T>
Var<T> critic_loss(const std::map<int, Var<T>>& predicted, const std::map<int, Tensor<T>>& targets);

/// M[i][j] = -inf iff i != critic and j == critic; otherwise 0.
template <class T>
Tensor<T> build_isolation_mask(std::size_t total_seq, std::size_t critic_index);

enum class CriticMode { kAbsent, kMasked, kUnmasked };

const char* critic_mode_name(CriticMode mode);

/// Inputs of one conditional velocity evaluation.
template <class T>
struct ModelInput {
  const Tensor<T>* xt = nullptr;
  const Tensor<T>* source = nullptr;
  Condition condition;
  T t = T(0);
};

template <class T>
struct ModelOutput {
  Var<T> velocity;                    // undefined when the backbone exits early
  std::map<int, Var<T>> probes;       // per probed layer, if requested
  std::map<int, Var<T>> predictions;  // e_hat per probed layer, if requested
  BlockTrace<T> trace;
};

struct OutputRequest {
  bool velocity = true;
  bool probes = false;
  bool predictions = false;
  std::vector<int> score_layers;
};

/// Backbone, probes and critic together with the last completed stage.
template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& config, std::uint64_t seed = 0);

  const ModelConfig& config() const { return backbone.config(); }

  /// `only_layer` > 0 restricts probe/critic readouts to that probed layer.
  ModelOutput<T> run(const ModelInput<T>& input, CriticMode mode, const OutputRequest& request, Tape<T>& tape,
                     int only_layer = 0) const;

  /// Velocity only, without graph construction.
  Tensor<T> velocity(const ModelInput<T>& input, CriticMode mode) const;

  /// Velocity read out at `layer`: the probe head for a probed layer (the
  /// backbone stops after that block), the backbone head for the last layer.
  Tensor<T> layer_velocity(const ModelInput<T>& input, int layer, CriticMode mode) const;

  /// Mode used at inference: unmasked after stage 3, masked after stage 2, absent before.
  CriticMode native_mode() const;

  std::vector<Parameter<T>*> parameters();
  std::vector<Parameter<T>*> parameters(Group group);

  Backbone<T> backbone;
  ProbeHeads<T> probes;
  Critic<T> critic;
  int stage = -1;  // last completed training stage, -1 = fresh
};

/// Max |difference| between a masked-critic run and a critic-absent run over
/// every non-critic traced state (all blocks) and the final velocity.
template <class T>
double isolation_check(const Model<T>& model, const ModelInput<T>& input);

/// Same comparison with the critic unmasked, for the negative control.
template <class T>
double unmasked_difference(const Model<T>& model, const ModelInput<T>& input);

struct LossWeights {
  double critic = 1.0;
  double probe = 1.0;
};

template <class T>
struct StageLoss {
  Var<T> total;
  double gen = 0, probe = 0, critic = 0;
  bool has_gen = false, has_probe = false, has_critic = false;
};

template <class T>
struct TrainExample {
  Tensor<T> xt;
  Tensor<T> source;
  Tensor<T> v_star;
  Condition condition;
  T t = T(0);
};

/// Parameter groups trained in `stage` (0 pretrains the backbone).
GroupSet stage_groups(int stage);
CriticMode stage_mode(int stage);

/// The objective of `stage` on one example:
///   0: gen loss (no critic), 1: probe loss, 2: critic loss under the mask,
///   3: gen + w.critic * critic + w.probe * probe with the critic unmasked.
template <class T>
StageLoss<T> stage_loss(const Model<T>& model, int stage, const TrainExample<T>& example, Tape<T>& tape,
                        const LossWeights& weights = {});

}  // namespace icrit
