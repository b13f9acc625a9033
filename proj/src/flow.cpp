#include "icrit/flow.hpp"

#include <cmath>

namespace icrit {

double TimeSampler::sample(Rng& rng) const {
  if (policy == TimePolicy::kUniform) return rng.uniform();
  const double z = logit_mean + logit_std * rng.normal();
  return 1.0 / (1.0 + std::exp(-z));
}

template <class T>
FlowSample<T> make_flow_sample(const Tensor<T>& x0, Tensor<T> x1, T t) {
  if (x0.shape() != x1.shape()) throw DimensionError("flow sample: x0/x1 shape mismatch");
  if (!(t >= T(0) && t <= T(1))) throw DomainError("flow sample: t outside [0, 1]");
  FlowSample<T> s;
  s.t = t;
  s.xt = Tensor<T>(x0.shape());
  s.v_star = Tensor<T>(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    s.xt[i] = (T(1) - t) * x0[i] + t * x1[i];
    s.v_star[i] = x1[i] - x0[i];
  }
  s.x0 = x0;
  s.x1 = std::move(x1);
  return s;
}

template <class T>
Tensor<T> standard_normal(const Shape& shape, Rng& rng) {
  Tensor<T> out(shape);
  for (auto& v : out.data()) v = T(rng.normal());
  return out;
}

template <class T>
FlowSample<T> make_flow_sample(const Tensor<T>& x0, Rng& rng, const TimeSampler& sampler) {
  for (auto v : x0.data())
    if (!std::isfinite(double(v))) throw NumericError("flow sample: non-finite x0");
  Tensor<T> x1 = standard_normal<T>(x0.shape(), rng);
  const T t = T(sampler.sample(rng));
  return make_flow_sample(x0, std::move(x1), t);
}

template <class T>
Var<T> gen_loss(const Var<T>& pred, const Tensor<T>& v_star) {
  if (pred.shape() != v_star.shape()) {
    throw DimensionError("gen_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(v_star.shape()));
  }
  return mean(square(sub(pred, constant(v_star))));
}

template <class T>
Var<T> per_position_sq_error(const Var<T>& pred, const Tensor<T>& v_star) {
  if (pred.shape() != v_star.shape() || pred.shape().size() != 2) {
    throw DimensionError("per_position_sq_error: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(v_star.shape()));
  }
  return sum_last(square(sub(pred, constant(v_star))));
}

template <class T>
SpatialMap per_position_sq_error_map(const Tensor<T>& pred, const Tensor<T>& v_star, std::size_t grid_h,
                                     std::size_t grid_w) {
  if (pred.shape() != v_star.shape() || pred.rank() != 2 || pred.dim(0) != grid_h * grid_w) {
    throw DimensionError("per_position_sq_error_map: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(v_star.shape()));
  }
  const std::size_t dz = pred.dim(1);
  SpatialMap map(grid_h, grid_w, MapTag::kProbeError);
  for (std::size_t i = 0; i < grid_h * grid_w; ++i) {
    T acc = T(0);
    for (std::size_t c = 0; c < dz; ++c) {
      const T diff = pred[i * dz + c] - v_star[i * dz + c];
      acc += diff * diff;
    }
    map.values[i] = double(acc);
  }
  return map;
}

template <class T>
Tensor<T> cfg_combine(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, T scale) {
  if (v_cond.shape() != v_uncond.shape()) throw DimensionError("cfg_combine: shape mismatch");
  if (scale == T(1)) return v_cond;
  if (scale == T(0)) return v_uncond;
  Tensor<T> out(v_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_uncond[i] + scale * (v_cond[i] - v_uncond[i]);
  return out;
}

double step_time(int step, int steps) { return 1.0 - double(step - 1) / double(steps); }

template <class T>
Tensor<T> euler_sample(const VelocityFn<T>& velocity, Tensor<T> x, int steps, T guidance,
                       const StepObserver<T>& observer) {
  if (steps < 1) throw DomainError("euler_sample: steps must be >= 1");
  const T dt = T(1) / T(steps);
  for (int k = 1; k <= steps; ++k) {
    const T t = T(step_time(k, steps));
    Tensor<T> v = velocity(x, t, true);
    if (guidance != T(1)) v = cfg_combine(v, velocity(x, t, false), guidance);
    if (observer) observer(k, t, x, v);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] -= dt * v[i];
      if (!std::isfinite(double(x[i]))) {
        throw NumericError("euler_sample: state diverged at step " + std::to_string(k));
      }
    }
  }
  return x;
}

template <class T>
Tensor<T> euler_sample(const VelocityFn<T>& velocity, const Shape& shape, int steps, T guidance, Rng& rng,
                       const StepObserver<T>& observer) {
  return euler_sample(velocity, standard_normal<T>(shape, rng), steps, guidance, observer);
}

#define ICRIT_INSTANTIATE(T)                                                                                    \
  template FlowSample<T> make_flow_sample<T>(const Tensor<T>&, Tensor<T>, T);                                   \
  template FlowSample<T> make_flow_sample<T>(const Tensor<T>&, Rng&, const TimeSampler&);                       \
  template Tensor<T> standard_normal<T>(const Shape&, Rng&);                                                    \
  template Var<T> gen_loss<T>(const Var<T>&, const Tensor<T>&);                                                 \
  template Var<T> per_position_sq_error<T>(const Var<T>&, const Tensor<T>&);                                    \
  template SpatialMap per_position_sq_error_map<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> cfg_combine<T>(const Tensor<T>&, const Tensor<T>&, T);                                     \
  template Tensor<T> euler_sample<T>(const VelocityFn<T>&, Tensor<T>, int, T, const StepObserver<T>&);          \
  template Tensor<T> euler_sample<T>(const VelocityFn<T>&, const Shape&, int, T, Rng&, const StepObserver<T>&);

ICRIT_INSTANTIATE(float)
ICRIT_INSTANTIATE(double)

#undef ICRIT_INSTANTIATE

}  // namespace icrit
