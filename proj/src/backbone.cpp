#include "icrit/backbone.hpp"

#include <cmath>

namespace icrit {

const char* map_tag_name(MapTag tag) {
  switch (tag) {
    case MapTag::kProbeError:
      return "probe-error";
    case MapTag::kCriticPrediction:
      return "critic-pred";
    case MapTag::kAttentionMass:
      return "attention-mass";
    case MapTag::kDerived:
      return "derived";
  }
  return "?";
}

template <class T>
Tensor<T> time_features(T t, int freqs) {
  if (!(t >= T(0) && t <= T(1))) throw DomainError("time " + std::to_string(double(t)) + " outside [0, 1]");
  Tensor<T> out({1, static_cast<std::size_t>(2 * freqs)});
  const double scaled = 1000.0 * double(t);
  for (int k = 0; k < freqs; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / freqs);
    out[k] = T(std::cos(scaled * freq));
    out[freqs + k] = T(std::sin(scaled * freq));
  }
  return out;
}

template <class T>
const LayerTrace<T>& BlockTrace<T>::at(int layer) const {
  auto it = layers.find(layer);
  if (it == layers.end()) throw MissingTraceError("no hidden-state trace for layer " + std::to_string(layer));
  return it->second;
}

template <class T>
const Tensor<T>& BlockTrace<T>::scores_at(int layer) const {
  auto it = scores.find(layer);
  if (it == scores.end()) throw MissingTraceError("no attention-score trace for layer " + std::to_string(layer));
  return it->second;
}

template <class T>
void init_normal(Parameter<T>& p, std::uint64_t seed, double stddev) {
  Rng rng = Rng(seed).fork(hash_string(p.name));
  for (auto& v : p.value.data()) v = T(rng.normal() * stddev);
}

template <class T>
typename Backbone<T>::Linear Backbone<T>::make_linear(const std::string& name, int in, int out, bool zero) {
  Linear l;
  l.w = {name + ".w", Group::kTheta, Tensor<T>({std::size_t(in), std::size_t(out)})};
  l.b = {name + ".b", Group::kTheta, Tensor<T>({std::size_t(out)})};
  if (!zero) init_normal(l.w, seed_, 1.0 / std::sqrt(double(in)));
  return l;
}

template <class T>
Backbone<T>::Backbone(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  const int d = config_.hidden_dim;
  const int s = config_.noise_tokens();
  time_proj_ = make_linear("backbone.time", 2 * config_.time_freqs, d, false);
  noise_in_ = make_linear("backbone.noise_in", config_.latent_dim, d, false);
  source_in_ = {"backbone.source_in.w", Group::kTheta,
                Tensor<T>({std::size_t(config_.latent_dim), std::size_t(d)})};
  init_normal(source_in_, seed_, 1.0 / std::sqrt(double(config_.latent_dim)));
  pos_embed_ = {"backbone.pos_embed", Group::kTheta, Tensor<T>({std::size_t(s), std::size_t(d)})};
  init_normal(pos_embed_, seed_, 1.0);
  for (int i = 0; i < config_.cond_tokens; ++i) {
    Parameter<T> table{"backbone.cond" + std::to_string(i), Group::kTheta,
                       Tensor<T>({std::size_t(config_.cond_vocab), std::size_t(d)})};
    init_normal(table, seed_, 1.0);
    cond_tables_.push_back(std::move(table));
  }
  null_cond_ = {"backbone.null_cond", Group::kTheta,
                Tensor<T>({std::size_t(config_.cond_tokens), std::size_t(d)})};
  init_normal(null_cond_, seed_, 1.0);

  const int hidden = config_.mlp_ratio * d;
  for (int b = 1; b <= config_.num_blocks; ++b) {
    Block block;
    for (auto [stream, tag] : {std::pair{&block.text, "txt"}, std::pair{&block.image, "img"}}) {
      const std::string p = "backbone.block" + std::to_string(b) + "." + tag;
      stream->mod = make_linear(p + ".mod", d, 6 * d, true);
      stream->qkv = make_linear(p + ".qkv", d, 3 * d, false);
      stream->out = make_linear(p + ".out", d, d, false);
      stream->ff1 = make_linear(p + ".ff1", d, hidden, false);
      stream->ff2 = make_linear(p + ".ff2", hidden, d, false);
    }
    blocks_.push_back(std::move(block));
  }
  final_mod_ = make_linear("backbone.final_mod", d, 2 * d, true);
  head_ = make_linear("backbone.head", d, config_.latent_dim, true);
}

template <class T>
Var<T> Backbone<T>::time_embedding(T t, Tape<T>& tape) const {
  Var<T> features = constant(time_features(t, config_.time_freqs));
  return linear(features, tape(time_proj_.w), tape(time_proj_.b));
}

namespace {

template <class T>
Var<T> modulate(const Var<T>& x, const Var<T>& shift, const Var<T>& scale_) {
  return add_row(mul_row(layer_norm(x), add_scalar(scale_, T(1))), shift);
}

}  // namespace

template <class T>
ForwardResult<T> Backbone<T>::forward(const ForwardRequest<T>& req, Tape<T>& tape) const {
  const auto S = std::size_t(config_.noise_tokens());
  const auto dz = std::size_t(config_.latent_dim);
  const auto d = std::size_t(config_.hidden_dim);
  if (!req.noise || req.noise->shape() != Shape{S, dz}) {
    throw DimensionError("forward: noise tokens must be " + shape_str({S, dz}));
  }
  if (!req.source || req.source->shape() != Shape{S, dz}) {
    throw DimensionError("forward: source tokens must be " + shape_str({S, dz}));
  }
  if (!req.condition.null && req.condition.codes.size() != std::size_t(config_.cond_tokens)) {
    throw DimensionError("forward: expected " + std::to_string(config_.cond_tokens) + " instruction codes");
  }
  const bool with_critic = req.critic_token.defined();
  if (with_critic && req.critic_token.shape() != Shape{1, d}) {
    throw DimensionError("forward: critic token must be " + shape_str({1, d}));
  }
  const std::size_t text_n = std::size_t(config_.text_tokens(with_critic));
  const std::size_t total = text_n + S;
  if (req.attn_mask && req.attn_mask->shape() != Shape{total, total}) {
    throw DimensionError("forward: mask " + shape_str(req.attn_mask->shape()) + " for sequence of " +
                         std::to_string(total));
  }
  const int last = req.last_block > 0 ? std::min(req.last_block, config_.num_blocks) : config_.num_blocks;

  ForwardResult<T> result;
  result.trace.has_critic = with_critic;
  result.trace.text_tokens = text_n;

  Var<T> temb = time_embedding(req.t, tape);
  result.time_embedding = temb;
  Var<T> act = silu(temb);

  Var<T> text;
  if (req.condition.null) {
    text = tape(null_cond_);
  } else {
    std::vector<Var<T>> rows;
    for (int i = 0; i < config_.cond_tokens; ++i) {
      const int id = req.condition.codes[std::size_t(i)];
      rows.push_back(gather_rows(tape(cond_tables_[std::size_t(i)]), std::span<const int>(&id, 1)));
    }
    text = concat_rows(rows);
  }
  if (with_critic) text = concat_rows<T>({text, req.critic_token});

  Var<T> image = linear(constant(*req.noise), tape(noise_in_.w), tape(noise_in_.b));
  image = add(image, matmul(constant(*req.source), tape(source_in_)));
  image = add(image, tape(pos_embed_));

  auto wants = [](const std::vector<int>& v, int l) { return std::find(v.begin(), v.end(), l) != v.end(); };
  const std::size_t heads = std::size_t(config_.num_heads);

  for (int l = 1; l <= last; ++l) {
    const Block& blk = blocks_[std::size_t(l - 1)];
    auto mods = [&](const Stream& s) {
      Var<T> m = linear(act, tape(s.mod.w), tape(s.mod.b));
      std::vector<Var<T>> parts;
      for (std::size_t i = 0; i < 6; ++i) parts.push_back(slice_cols(m, i * d, (i + 1) * d));
      return parts;  // shift1, scale1, gate1, shift2, scale2, gate2
    };
    auto mt = mods(blk.text);
    auto mi = mods(blk.image);

    Var<T> qkv_t = linear(modulate(text, mt[0], mt[1]), tape(blk.text.qkv.w), tape(blk.text.qkv.b));
    Var<T> qkv_i = linear(modulate(image, mi[0], mi[1]), tape(blk.image.qkv.w), tape(blk.image.qkv.b));
    auto joint = [&](std::size_t part) {
      return concat_rows<T>({slice_cols(qkv_t, part * d, (part + 1) * d), slice_cols(qkv_i, part * d, (part + 1) * d)});
    };
    Tensor<T>* scores_out = nullptr;
    if (wants(req.score_layers, l)) scores_out = &result.trace.scores[l];
    Var<T> o = attention(joint(0), joint(1), joint(2), heads, req.attn_mask, scores_out);

    auto o_t = linear(slice_rows(o, 0, text_n), tape(blk.text.out.w), tape(blk.text.out.b));
    auto o_i = linear(slice_rows(o, text_n, total), tape(blk.image.out.w), tape(blk.image.out.b));
    text = add(text, mul_row(o_t, mt[2]));
    image = add(image, mul_row(o_i, mi[2]));

    auto ffn = [&](const Var<T>& x, const Stream& s, const std::vector<Var<T>>& m) {
      Var<T> h = modulate(x, m[3], m[4]);
      h = gelu(linear(h, tape(s.ff1.w), tape(s.ff1.b)));
      h = linear(h, tape(s.ff2.w), tape(s.ff2.b));
      return add(x, mul_row(h, m[5]));
    };
    text = ffn(text, blk.text, mt);
    image = ffn(image, blk.image, mi);

    if (wants(req.trace_layers, l)) {
      LayerTrace<T> lt;
      lt.noise = image;
      lt.text = slice_rows(text, 0, std::size_t(config_.cond_tokens));
      if (with_critic) lt.critic = slice_rows(text, std::size_t(config_.critic_index()), text_n);
      result.trace.layers[l] = std::move(lt);
    }
  }

  if (last == config_.num_blocks) {
    Var<T> fm = linear(act, tape(final_mod_.w), tape(final_mod_.b));
    Var<T> h = modulate(image, slice_cols(fm, 0, d), slice_cols(fm, d, 2 * d));
    result.velocity = linear(h, tape(head_.w), tape(head_.b));
  }
  return result;
}

template <class T>
std::vector<Parameter<T>*> Backbone<T>::parameters() {
  std::vector<Parameter<T>*> out;
  auto lin = [&](Linear& l) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  };
  lin(time_proj_);
  lin(noise_in_);
  out.push_back(&source_in_);
  out.push_back(&pos_embed_);
  for (auto& t : cond_tables_) out.push_back(&t);
  out.push_back(&null_cond_);
  for (auto& b : blocks_) {
    for (Stream* s : {&b.text, &b.image}) {
      lin(s->mod);
      lin(s->qkv);
      lin(s->out);
      lin(s->ff1);
      lin(s->ff2);
    }
  }
  lin(final_mod_);
  lin(head_);
  return out;
}

template <class T>
std::vector<const Parameter<T>*> Backbone<T>::parameters() const {
  auto mut = const_cast<Backbone*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <class T>
void Backbone<T>::zero_blocks() {
  for (auto& b : blocks_) {
    for (Stream* s : {&b.text, &b.image}) {
      for (Linear* l : {&s->mod, &s->qkv, &s->out, &s->ff1, &s->ff2}) {
        std::fill(l->w.value.data().begin(), l->w.value.data().end(), T(0));
        std::fill(l->b.value.data().begin(), l->b.value.data().end(), T(0));
      }
    }
  }
}

template <class T>
SpatialMap attention_key_mass(const BlockTrace<T>& trace, int layer, int grid_h, int grid_w) {
  const Tensor<T>& sc = trace.scores_at(layer);
  const std::size_t heads = sc.dim(0), n = sc.dim(1);
  const std::size_t offset = trace.noise_offset();
  const std::size_t s = std::size_t(grid_h * grid_w);
  if (offset + s != n) throw DimensionError("attention_key_mass: trace does not match the token grid");
  SpatialMap map(std::size_t(grid_h), std::size_t(grid_w), MapTag::kAttentionMass);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t q = 0; q < n; ++q) {
      const T* row = sc.ptr() + (h * n + q) * n;
      for (std::size_t j = 0; j < s; ++j) map.values[j] += double(row[offset + j]);
    }
  return map;
}

template Tensor<float> time_features<float>(float, int);
template Tensor<double> time_features<double>(double, int);
template struct BlockTrace<float>;
template struct BlockTrace<double>;
template class Backbone<float>;
template class Backbone<double>;
template SpatialMap attention_key_mass<float>(const BlockTrace<float>&, int, int, int);
template SpatialMap attention_key_mass<double>(const BlockTrace<double>&, int, int, int);
template void init_normal<float>(Parameter<float>&, std::uint64_t, double);
template void init_normal<double>(Parameter<double>&, std::uint64_t, double);

}  // namespace icrit
