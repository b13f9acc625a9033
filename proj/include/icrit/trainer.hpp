#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "icrit/critic.hpp"
#include "icrit/taskgen.hpp"

namespace icrit {

struct StageConfig {
  int stage = 1;  // 0 pretrains the backbone; 1..3 are the critic curriculum
  int epochs = 4;
  int batch_size = 16;
  /// Stop after this many optimizer steps (0 = run all epochs).
  int max_steps = 0;
  double peak_lr = 1e-3;
  int warmup_steps = 50;
  double min_lr_ratio = 0.1;
  /// Cosine restart period in steps after warmup; 0 = one cycle over the stage.
  int restart_period = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  double cfg_dropout = 0.05;
  LossWeights weights;
  TimeSampler time;
  /// Steps between isolation spot checks in stage 2 (0 disables them).
  int isolation_every = 25;
  double isolation_tolerance = 1e-6;
  std::uint64_t seed = 0;

  GroupSet groups() const { return stage_groups(stage); }
  CriticMode mode() const { return stage_mode(stage); }
  /// Throws ConfigError on an invalid field.
  void validate() const;
  /// Stage defaults tuned for the toy model.
  static StageConfig toy(int stage);
};

/// Linear warmup to peak, then cosine from peak to min_lr_ratio * peak within
/// each restart cycle. `period` must be positive.
double lr_schedule(long step, const StageConfig& config, long period);

/// Resolved restart period for a stage of `total_steps` steps.
long restart_period(const StageConfig& config, long total_steps);

/// Returns the null condition with probability p, else `condition` unchanged.
Condition cfg_dropout(const Condition& condition, double p, Rng& rng);

/// Decoupled-weight-decay Adam with bias correction.
template <class T>
class AdamW {
 public:
  struct Hyper {
    double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8, weight_decay = 0.01;
  };

  explicit AdamW(Hyper hyper) : hyper_(hyper) {}

  /// grads[i] belongs to params[i]. Throws NumericError naming the parameter
  /// group if any gradient is non-finite; nothing is updated in that case.
  void step(const std::vector<Parameter<T>*>& params, const std::vector<std::vector<T>>& grads, double lr);

  long steps() const { return step_; }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  Hyper hyper_;
  long step_ = 0;
  std::map<const Parameter<T>*, Moments> moments_;
};

/// One optimizer step of the metrics log. NaN marks an unmeasured value.
struct MetricsRecord {
  long step = 0;
  int stage = 0;
  double lr = 0;
  double gen_loss = 0;
  double probe_loss = 0;
  double critic_loss = 0;
  double isolation_diff = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& record);

/// Held-out evaluation of every objective that applies to the model's critic mode.
struct EvalResult {
  double gen = 0;
  double probe = 0;
  std::map<int, double> probe_by_layer;
  double critic = 0;
  bool has_gen = false, has_probe = false, has_critic = false;
  std::size_t samples = 0;
};

template <class T>
struct StageResult {
  std::vector<MetricsRecord> log;
  EvalResult initial;
  EvalResult final;
  std::vector<EvalResult> epochs;
  std::uint64_t frozen_checksum_before = 0;
  std::uint64_t frozen_checksum_after = 0;
  double max_isolation_diff = 0;
};

/// Training examples in token space: x0 = target tokens, source = source tokens.
template <class T>
struct TokenTask {
  Tensor<T> source;
  Tensor<T> target;
  Condition condition;
  std::vector<std::uint8_t> mask;
};

template <class T>
std::vector<TokenTask<T>> to_token_tasks(const std::vector<EditTask>& tasks, const ImageSpec& spec);

/// Draws (x1, t) for `task` deterministically from `rng`.
template <class T>
TrainExample<T> make_example(const TokenTask<T>& task, Rng& rng, const TimeSampler& time);

/// Evaluates the stage objective terms on `tasks` with fixed noise from `seed`.
template <class T>
EvalResult evaluate(const Model<T>& model, int stage, const std::vector<TokenTask<T>>& tasks, std::uint64_t seed,
                    const TimeSampler& time = {});

/// Checksum over every parameter in groups outside `trainable`.
template <class T>
std::uint64_t frozen_checksum(Model<T>& model, GroupSet trainable);

struct StageHooks {
  std::function<void(const MetricsRecord&)> on_step;
  std::function<void(int epoch, const EvalResult&)> on_epoch;
};

/// Runs one stage. Stage N >= 2 needs a model whose last completed stage is
/// N - 1; stage 1 accepts a fresh or pretrained backbone; stage 0 a fresh one.
/// Throws StagingError on an ordering violation, a frozen-checksum change or
/// an isolation breach.
template <class T>
StageResult<T> run_stage(Model<T>& model, const std::vector<TokenTask<T>>& train,
                         const std::vector<TokenTask<T>>& heldout, const StageConfig& config,
                         const StageHooks& hooks = {});

}  // namespace icrit
