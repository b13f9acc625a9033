#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "icrit/autograd.hpp"

namespace icrit {

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

struct FdOptions {
  double epsilon = 1e-6;
  /// Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// If non-empty, only these flat coordinates are checked, per parameter.
  std::vector<std::vector<std::size_t>> subset;
};

/// Compares backprop gradients of `loss_fn` against central differences for
/// every coordinate of `params`. Stop-gradient values are pinned to the base
/// evaluation so both sides differentiate the same semi-gradient function.
/// Parameters are restored afterwards. Throws NumericError on a non-finite loss.
template <class T>
FdReport finite_diff_check(const std::function<Var<T>(Tape<T>&)>& loss_fn, const std::vector<Parameter<T>*>& params,
                           const FdOptions& options = {}) {
  StopGradPin<T> pin;
  pin.record();
  Tape<T> tape;
  for (auto* p : params) tape.track(*p);
  Var<T> base = loss_fn(tape);
  if (!std::isfinite(double(base.item()))) throw NumericError("finite_diff_check: non-finite base loss");
  backward(base);

  auto eval = [&]() {
    NoGradGuard guard;
    pin.replay();
    Tape<T> quiet;
    const double v = double(loss_fn(quiet).item());
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite perturbed loss");
    return v;
  };

  FdReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto* p = params[pi];
    const auto analytic = tape.grad(*p);
    std::vector<std::size_t> coords;
    if (pi < options.subset.size() && !options.subset[pi].empty()) {
      coords = options.subset[pi];
    } else {
      coords.resize(p->value.size());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    }
    for (auto i : coords) {
      const T saved = p->value[i];
      p->value[i] = saved + T(options.epsilon);
      const double up = eval();
      p->value[i] = saved - T(options.epsilon);
      const double down = eval();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double a = analytic.empty() ? 0.0 : double(analytic[i]);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      ++report.coordinates;
      if (report.worst_parameter.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_parameter = p->name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace icrit
