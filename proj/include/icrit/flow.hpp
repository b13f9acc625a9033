#pragma once

#include <functional>

#include "icrit/autograd.hpp"
#include "icrit/spatial_map.hpp"

namespace icrit {

enum class TimePolicy { kUniform, kLogitNormal };

struct TimeSampler {
  TimePolicy policy = TimePolicy::kUniform;
  double logit_mean = 0.0;
  double logit_std = 1.0;

  double sample(Rng& rng) const;
};

/// One rectified-flow training tuple: x_t = (1 - t) x0 + t x1, v* = x1 - x0.
template <class T>
struct FlowSample {
  Tensor<T> x0;
  Tensor<T> x1;
  T t = T(0);
  Tensor<T> xt;
  Tensor<T> v_star;
};

template <class T>
FlowSample<T> make_flow_sample(const Tensor<T>& x0, Tensor<T> x1, T t);

/// Draws x1 ~ N(0, I) and t from `sampler`.
template <class T>
FlowSample<T> make_flow_sample(const Tensor<T>& x0, Rng& rng, const TimeSampler& sampler);

template <class T>
Tensor<T> standard_normal(const Shape& shape, Rng& rng);

/// Mean over positions and channels of the squared error.
template <class T>
Var<T> gen_loss(const Var<T>& pred, const Tensor<T>& v_star);

/// ||pred_i - v*_i||^2 summed over channels, one entry per token: [S].
template <class T>
Var<T> per_position_sq_error(const Var<T>& pred, const Tensor<T>& v_star);

/// Same as per_position_sq_error, laid out on the token grid.
template <class T>
SpatialMap per_position_sq_error_map(const Tensor<T>& pred, const Tensor<T>& v_star, std::size_t grid_h,
                                     std::size_t grid_w);

/// v_uncond + scale * (v_cond - v_uncond). Scale 1 returns v_cond and scale 0
/// returns v_uncond verbatim.
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, T scale);

/// Velocity at state x and time t; `conditional` = false asks for the null-condition branch.
template <class T>
using VelocityFn = std::function<Tensor<T>(const Tensor<T>& x, T t, bool conditional)>;

/// Called before each update with the 1-based step index, its time, the state
/// and the guided velocity.
template <class T>
using StepObserver = std::function<void(int step, T t, const Tensor<T>& x, const Tensor<T>& v)>;

/// Uniform-step Euler integration from t = 1 to t = 0 with classifier-free
/// guidance. With guidance == 1 the unconditional branch is never evaluated.
/// Throws NumericError naming the step if the state becomes non-finite.
template <class T>
Tensor<T> euler_sample(const VelocityFn<T>& velocity, Tensor<T> x1, int steps, T guidance,
                       const StepObserver<T>& observer = {});

template <class T>
Tensor<T> euler_sample(const VelocityFn<T>& velocity, const Shape& shape, int steps, T guidance, Rng& rng,
                       const StepObserver<T>& observer = {});

/// Time at which step k (1-based) of an n-step sampler evaluates the velocity.
double step_time(int step, int steps);

}  // namespace icrit
