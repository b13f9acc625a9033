#include "icrit/critic.hpp"

#include <algorithm>
#include <cmath>

namespace icrit {

template <class T>
Mlp3<T> Mlp3<T>::make(const std::string& name, Group group, int in, int hidden, int out, std::uint64_t seed,
                      bool zero_last) {
  auto mat = [&](const std::string& n, int r, int c) {
    return Parameter<T>{name + "." + n, group, Tensor<T>({std::size_t(r), std::size_t(c)})};
  };
  auto vec = [&](const std::string& n, int c) { return Parameter<T>{name + "." + n, group, Tensor<T>({std::size_t(c)})}; };
  Mlp3 m{mat("w1", in, hidden), vec("b1", hidden), mat("w2", hidden, hidden),
         vec("b2", hidden),     mat("w3", hidden, out), vec("b3", out)};
  init_normal(m.w1, seed, 1.0 / std::sqrt(double(in)));
  init_normal(m.w2, seed, 1.0 / std::sqrt(double(hidden)));
  if (!zero_last) init_normal(m.w3, seed, 1.0 / std::sqrt(double(hidden)));
  return m;
}

template <class T>
Var<T> Mlp3<T>::operator()(const Var<T>& x, Tape<T>& tape) const {
  Var<T> h = gelu(linear(x, tape(w1), tape(b1)));
  h = gelu(linear(h, tape(w2), tape(b2)));
  return linear(h, tape(w3), tape(b3));
}

template <class T>
void Mlp3<T>::collect(std::vector<Parameter<T>*>& out) {
  for (Parameter<T>* p : {&w1, &b1, &w2, &b2, &w3, &b3}) out.push_back(p);
}

// ---------------------------------------------------------------------------

template <class T>
ProbeHeads<T>::ProbeHeads(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  const int d = config.hidden_dim;
  for (int layer : config.probe_layers) {
    const std::string p = "probe.l" + std::to_string(layer);
    Head h;
    h.ada_w = {p + ".ada.w", Group::kPhi, Tensor<T>({std::size_t(d), std::size_t(2 * d)})};
    h.ada_b = {p + ".ada.b", Group::kPhi, Tensor<T>({std::size_t(2 * d)})};
    init_normal(h.ada_w, seed, 1.0 / std::sqrt(double(d)));
    h.mlp = Mlp3<T>::make(p + ".mlp", Group::kPhi, d, d, config.latent_dim, seed, true);
    heads_.push_back(std::move(h));
  }
}

template <class T>
const typename ProbeHeads<T>::Head& ProbeHeads<T>::head(int layer) const {
  const int slot = config_.probe_slot(layer);
  if (slot < 0) throw ConfigError("layer " + std::to_string(layer) + " has no probe head");
  return heads_[std::size_t(slot)];
}

template <class T>
Var<T> ProbeHeads<T>::forward(int layer, const Var<T>& hidden, const Var<T>& time_embedding, Tape<T>& tape) const {
  const Head& h = head(layer);
  const auto d = std::size_t(config_.hidden_dim);
  Var<T> mod = linear(silu(stop_grad(time_embedding)), tape(h.ada_w), tape(h.ada_b));
  Var<T> x = layer_norm(stop_grad(hidden));
  x = add_row(mul_row(x, add_scalar(slice_cols(mod, d, 2 * d), T(1))), slice_cols(mod, 0, d));
  return h.mlp(x, tape);
}

template <class T>
std::vector<Parameter<T>*> ProbeHeads<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& h : heads_) {
    out.push_back(&h.ada_w);
    out.push_back(&h.ada_b);
    h.mlp.collect(out);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
Critic<T>::Critic(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  const int d = config.hidden_dim;
  token_ = {"critic.token", Group::kCritic, Tensor<T>({1, std::size_t(d)})};
  init_normal(token_, seed, 1.0);
  for (int layer : config.probe_layers) {
    const std::string l = std::to_string(layer);
    psi_.push_back(Mlp3<T>::make("critic.psi.l" + l, Group::kPsi, d, d, config.projection_dim, seed, true));
    chi_.push_back(Mlp3<T>::make("critic.chi.l" + l, Group::kChi, d, d, config.projection_dim, seed, false));
  }
}

template <class T>
std::size_t Critic<T>::slot(int layer) const {
  if (!config_.critic_enabled) throw ConfigError("critic is disabled in this model config");
  const int s = config_.probe_slot(layer);
  if (s < 0) throw ConfigError("layer " + std::to_string(layer) + " has no critic projection");
  return std::size_t(s);
}

template <class T>
Var<T> Critic<T>::project_r(int layer, const Var<T>& r_hidden, Tape<T>& tape) const {
  return psi_[slot(layer)](layer_norm(r_hidden), tape);
}

template <class T>
Var<T> Critic<T>::project_h(int layer, const Var<T>& hidden, Tape<T>& tape) const {
  return chi_[slot(layer)](layer_norm(stop_grad(hidden)), tape);
}

template <class T>
Var<T> Critic<T>::predict(int layer, const Var<T>& r_hidden, const Var<T>& hidden, Tape<T>& tape) const {
  if (!r_hidden.defined()) throw ConfigError("critic prediction needs the critic token's hidden state");
  return critic_inner(project_r(layer, r_hidden, tape), project_h(layer, hidden, tape));
}

template <class T>
std::vector<Parameter<T>*> Critic<T>::parameters() {
  std::vector<Parameter<T>*> out{&token_};
  for (auto& m : psi_) m.collect(out);
  for (auto& m : chi_) m.collect(out);
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
Var<T> critic_inner(const Var<T>& psi_out, const Var<T>& chi_out) {
  if (psi_out.shape().size() != 2 || psi_out.shape()[0] != 1 || chi_out.shape().size() != 2 ||
      chi_out.shape()[1] != psi_out.shape()[1]) {
    throw DimensionError("critic_inner: " + shape_str(psi_out.shape()) + " vs " + shape_str(chi_out.shape()));
  }
  Var<T> col = matmul(chi_out, transpose(psi_out));
  return reshape(col, {chi_out.shape()[0]});
}

template <class T>
Var<T> probe_loss(const std::map<int, Var<T>>& outputs, const Tensor<T>& v_star, const ModelConfig& config) {
  if (outputs.size() != config.probe_layers.size()) {
    throw ConfigError("probe_loss: expected " + std::to_string(config.probe_layers.size()) + " probe outputs, got " +
                      std::to_string(outputs.size()));
  }
  Var<T> total;
  for (int layer : config.probe_layers) {
    auto it = outputs.find(layer);
    if (it == outputs.end() || !it->second.defined()) {
      throw ConfigError("probe_loss: missing output for layer " + std::to_string(layer));
    }
    Var<T> l = gen_loss(it->second, v_star);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, T(1) / T(config.probe_layers.size()));
}

template <class T>
Tensor<T> critic_target(const Tensor<T>& probe_output, const Tensor<T>& v_star) {
  if (probe_output.shape() != v_star.shape() || probe_output.rank() != 2) {
    throw DimensionError("critic_target: " + shape_str(probe_output.shape()) + " vs " + shape_str(v_star.shape()));
  }
  const std::size_t s = probe_output.dim(0), dz = probe_output.dim(1);
  Tensor<T> out({s});
  for (std::size_t i = 0; i < s; ++i) {
    T acc = T(0);
    for (std::size_t c = 0; c < dz; ++c) {
      const T diff = probe_output[i * dz + c] - v_star[i * dz + c];
      acc += diff * diff;
    }
    out[i] = std::log1p(acc);
  }
  return out;
}

template <class T>
Var<T> critic_loss(const std::map<int, Var<T>>& predicted, const std::map<int, Tensor<T>>& targets) {
  if (predicted.empty()) throw ConfigError("critic_loss: no layers");
  if (predicted.size() != targets.size()) throw ConfigError("critic_loss: predicted and target layer sets differ");
  Var<T> total;
  std::size_t count = 0;
  for (const auto& [layer, pred] : predicted) {
    auto it = targets.find(layer);
    if (it == targets.end()) throw ConfigError("critic_loss: no target for layer " + std::to_string(layer));
    if (pred.size() != it->second.size()) {
      throw ConfigError("critic_loss: layer " + std::to_string(layer) + " token counts differ");
    }
    Tensor<T> target = it->second.reshaped(pred.shape());
    Var<T> l = sum(square(sub(pred, constant(std::move(target)))));
    total = total.defined() ? add(total, l) : l;
    count += pred.size();
  }
  return scale(total, T(1) / T(count));
}

template <class T>
Tensor<T> build_isolation_mask(std::size_t total_seq, std::size_t critic_index) {
  if (critic_index >= total_seq) {
    throw DomainError("isolation mask: critic index " + std::to_string(critic_index) + " outside sequence of " +
                      std::to_string(total_seq));
  }
  Tensor<T> m({total_seq, total_seq});
  for (std::size_t i = 0; i < total_seq; ++i)
    if (i != critic_index) m[i * total_seq + critic_index] = mask_neg_inf<T>();
  return m;
}

const char* critic_mode_name(CriticMode mode) {
  switch (mode) {
    case CriticMode::kAbsent:
      return "absent";
    case CriticMode::kMasked:
      return "masked";
    case CriticMode::kUnmasked:
      return "unmasked";
  }
  return "?";
}

// ---------------------------------------------------------------------------

template <class T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed)
    : backbone(config, seed), probes(config, seed), critic(config, seed) {}

template <class T>
ModelOutput<T> Model<T>::run(const ModelInput<T>& input, CriticMode mode, const OutputRequest& request,
                             Tape<T>& tape, int only_layer) const {
  const ModelConfig& cfg = config();
  if (mode != CriticMode::kAbsent && !cfg.critic_enabled) throw ConfigError("critic is disabled in this model config");
  if (request.predictions && mode == CriticMode::kAbsent) {
    throw ConfigError("critic predictions requested without a critic token");
  }
  ForwardRequest<T> req;
  req.noise = input.xt;
  req.source = input.source;
  req.condition = input.condition;
  req.t = input.t;
  req.score_layers = request.score_layers;
  Tensor<T> mask;
  if (mode != CriticMode::kAbsent) req.critic_token = tape(critic.token());
  if (mode == CriticMode::kMasked) {
    mask = build_isolation_mask<T>(std::size_t(cfg.sequence_length(true)), std::size_t(cfg.critic_index()));
    req.attn_mask = &mask;
  }
  if (request.probes || request.predictions) req.trace_layers = cfg.probe_layers;
  if (only_layer > 0) req.trace_layers = {only_layer};
  if (!request.velocity) {
    int last = only_layer > 0 ? only_layer : cfg.deepest_probe();
    for (int l : request.score_layers) last = std::max(last, l);
    req.last_block = last;
  }

  ForwardResult<T> fr = backbone.forward(req, tape);
  ModelOutput<T> out;
  out.velocity = fr.velocity;
  for (int layer : req.trace_layers) {
    const LayerTrace<T>& lt = fr.trace.at(layer);
    if (request.probes) out.probes[layer] = probes.forward(layer, lt.noise, fr.time_embedding, tape);
    if (request.predictions) out.predictions[layer] = critic.predict(layer, lt.critic, lt.noise, tape);
  }
  out.trace = std::move(fr.trace);
  return out;
}

template <class T>
Tensor<T> Model<T>::velocity(const ModelInput<T>& input, CriticMode mode) const {
  NoGradGuard guard;
  Tape<T> tape;
  return run(input, mode, OutputRequest{}, tape).velocity.value();
}

template <class T>
Tensor<T> Model<T>::layer_velocity(const ModelInput<T>& input, int layer, CriticMode mode) const {
  if (layer == config().num_blocks) return velocity(input, mode);
  if (config().probe_slot(layer) < 0) throw ConfigError("layer " + std::to_string(layer) + " has no probe head");
  NoGradGuard guard;
  Tape<T> tape;
  OutputRequest req;
  req.velocity = false;
  req.probes = true;
  ModelOutput<T> out = run(input, mode, req, tape, layer);
  return out.probes.at(layer).value();
}

template <class T>
CriticMode Model<T>::native_mode() const {
  if (!config().critic_enabled || stage < 2) return CriticMode::kAbsent;
  return stage == 2 ? CriticMode::kMasked : CriticMode::kUnmasked;
}

template <class T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  auto out = backbone.parameters();
  for (auto* p : probes.parameters()) out.push_back(p);
  for (auto* p : critic.parameters()) out.push_back(p);
  return out;
}

template <class T>
std::vector<Parameter<T>*> Model<T>::parameters(Group group) {
  std::vector<Parameter<T>*> out;
  for (auto* p : parameters())
    if (p->group == group) out.push_back(p);
  return out;
}

namespace {

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff: shape mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <class T>
double compare_with_absent(const Model<T>& model, const ModelInput<T>& input, CriticMode mode) {
  NoGradGuard guard;
  const ModelConfig& cfg = model.config();
  std::vector<int> all(std::size_t(cfg.num_blocks));
  for (int l = 1; l <= cfg.num_blocks; ++l) all[std::size_t(l - 1)] = l;

  auto forward = [&](CriticMode m) {
    Tape<T> tape;
    ForwardRequest<T> req;
    req.noise = input.xt;
    req.source = input.source;
    req.condition = input.condition;
    req.t = input.t;
    req.trace_layers = all;
    Tensor<T> mask;
    if (m != CriticMode::kAbsent) req.critic_token = tape(model.critic.token());
    if (m == CriticMode::kMasked) {
      mask = build_isolation_mask<T>(std::size_t(cfg.sequence_length(true)), std::size_t(cfg.critic_index()));
      req.attn_mask = &mask;
    }
    return model.backbone.forward(req, tape);
  };
  ForwardResult<T> with = forward(mode);
  ForwardResult<T> without = forward(CriticMode::kAbsent);
  double diff = max_abs_diff(with.velocity.value(), without.velocity.value());
  for (int l : all) {
    diff = std::max(diff, max_abs_diff(with.trace.at(l).noise.value(), without.trace.at(l).noise.value()));
    diff = std::max(diff, max_abs_diff(with.trace.at(l).text.value(), without.trace.at(l).text.value()));
  }
  return diff;
}

}  // namespace

template <class T>
double isolation_check(const Model<T>& model, const ModelInput<T>& input) {
  return compare_with_absent(model, input, CriticMode::kMasked);
}

template <class T>
double unmasked_difference(const Model<T>& model, const ModelInput<T>& input) {
  return compare_with_absent(model, input, CriticMode::kUnmasked);
}

// ---------------------------------------------------------------------------

GroupSet stage_groups(int stage) {
  switch (stage) {
    case 0:
      return {Group::kTheta};
    case 1:
      return {Group::kPhi};
    case 2:
      return {Group::kCritic, Group::kPsi, Group::kChi};
    case 3:
      return {Group::kPhi, Group::kCritic, Group::kPsi, Group::kChi};
  }
  throw ConfigError("unknown stage " + std::to_string(stage));
}

CriticMode stage_mode(int stage) {
  switch (stage) {
    case 0:
    case 1:
      return CriticMode::kAbsent;
    case 2:
      return CriticMode::kMasked;
    case 3:
      return CriticMode::kUnmasked;
  }
  throw ConfigError("unknown stage " + std::to_string(stage));
}

template <class T>
StageLoss<T> stage_loss(const Model<T>& model, int stage, const TrainExample<T>& ex, Tape<T>& tape,
                        const LossWeights& weights) {
  const CriticMode mode = stage_mode(stage);
  ModelInput<T> input{&ex.xt, &ex.source, ex.condition, ex.t};
  OutputRequest request;
  request.velocity = stage == 0 || stage == 3;
  request.probes = stage >= 1;
  request.predictions = stage >= 2;
  ModelOutput<T> out = model.run(input, mode, request, tape);

  StageLoss<T> loss;
  Var<T> gen, probe, critic;
  if (request.velocity) {
    gen = gen_loss(out.velocity, ex.v_star);
    loss.gen = double(gen.item());
    loss.has_gen = true;
  }
  if (request.probes) {
    probe = probe_loss(out.probes, ex.v_star, model.config());
    loss.probe = double(probe.item());
    loss.has_probe = true;
  }
  if (request.predictions) {
    std::map<int, Tensor<T>> targets;
    // Through stop_grad so finite-difference checks see the same frozen targets.
    for (const auto& [layer, p] : out.probes) targets[layer] = critic_target(stop_grad(p).value(), ex.v_star);
    critic = critic_loss(out.predictions, targets);
    loss.critic = double(critic.item());
    loss.has_critic = true;
  }
  switch (stage) {
    case 0:
      loss.total = gen;
      break;
    case 1:
      loss.total = probe;
      break;
    case 2:
      loss.total = critic;
      break;
    default:
      loss.total = add(add(gen, scale(critic, T(weights.critic))), scale(probe, T(weights.probe)));
  }
  return loss;
}

#define ICRIT_INSTANTIATE(T)                                                                                     \
  template struct Mlp3<T>;                                                                                       \
  template class ProbeHeads<T>;                                                                                  \
  template class Critic<T>;                                                                                      \
  template class Model<T>;                                                                                       \
  template Var<T> critic_inner<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> probe_loss<T>(const std::map<int, Var<T>>&, const Tensor<T>&, const ModelConfig&);            \
  template Tensor<T> critic_target<T>(const Tensor<T>&, const Tensor<T>&);                                       \
  template Var<T> critic_loss<T>(const std::map<int, Var<T>>&, const std::map<int, Tensor<T>>&);                 \
  template Tensor<T> build_isolation_mask<T>(std::size_t, std::size_t);                                          \
  template double isolation_check<T>(const Model<T>&, const ModelInput<T>&);                                     \
  template double unmasked_difference<T>(const Model<T>&, const ModelInput<T>&);                                 \
  template StageLoss<T> stage_loss<T>(const Model<T>&, int, const TrainExample<T>&, Tape<T>&, const LossWeights&);

ICRIT_INSTANTIATE(float)
ICRIT_INSTANTIATE(double)

#undef ICRIT_INSTANTIATE

}  // namespace icrit
