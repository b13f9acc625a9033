#pragma once

#include <vector>

#include "icrit/autograd.hpp"
#include "icrit/critic.hpp"

namespace icrit::testing {

template <class T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = T(rng.normal() * scale);
  return t;
}

template <class T>
Parameter<T> random_param(const std::string& name, const Shape& shape, Rng& rng, Group g = Group::kTheta) {
  return {name, g, random_tensor<T>(shape, rng)};
}

/// Scalar projection <x, w> with a fixed random w, for gradient checks of non-scalar ops.
template <class T>
Var<T> weighted_sum(const Var<T>& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(x, constant(random_tensor<T>(x.shape(), rng))));
}

template <class T>
struct Inputs {
  Tensor<T> xt, source, v_star;
  Condition condition;
  T t;

  ModelInput<T> model_input() const { return {&xt, &source, condition, t}; }
  TrainExample<T> example() const { return {xt, source, v_star, condition, t}; }
};

template <class T>
Inputs<T> random_inputs(const ModelConfig& cfg, Rng& rng) {
  const Shape s{std::size_t(cfg.noise_tokens()), std::size_t(cfg.latent_dim)};
  Inputs<T> in;
  in.xt = random_tensor<T>(s, rng);
  in.source = random_tensor<T>(s, rng);
  in.v_star = random_tensor<T>(s, rng);
  for (int i = 0; i < cfg.cond_tokens; ++i) in.condition.codes.push_back(int(rng.below(std::uint64_t(cfg.cond_vocab))));
  in.t = T(rng.uniform());
  return in;
}

/// Replaces every zero-initialized weight with random values so gradients flow everywhere.
template <class T>
void randomize(Model<T>& model, std::uint64_t seed, double stddev = 0.3) {
  for (auto* p : model.parameters()) init_normal(*p, seed, stddev);
}

}  // namespace icrit::testing
