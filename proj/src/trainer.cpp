#include "icrit/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>

namespace icrit {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

void StageConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("stage config: " + what); };
  if (stage < 0 || stage > 3) fail("stage must be 0, 1, 2 or 3");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (!(peak_lr > 0)) fail("peak_lr must be positive");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1)) fail("min_lr_ratio must be in [0, 1]");
  if (restart_period < 0) fail("restart_period must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must be in [0, 1)");
  if (!(epsilon > 0)) fail("epsilon must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
  if (!(cfg_dropout >= 0 && cfg_dropout <= 1)) fail("cfg_dropout must be in [0, 1]");
  if (!(weights.critic >= 0 && weights.probe >= 0)) fail("loss weights must be >= 0");
  if (isolation_every < 0) fail("isolation_every must be >= 0");
}

StageConfig StageConfig::toy(int stage) {
  StageConfig c;
  c.stage = stage;
  c.epochs = 4;
  c.batch_size = 16;
  c.peak_lr = stage == 0 ? 1e-3 : 2e-3;
  c.warmup_steps = 50;
  c.seed = 1000 + std::uint64_t(stage);
  return c;
}

long restart_period(const StageConfig& config, long total_steps) {
  if (config.restart_period > 0) return config.restart_period;
  return std::max<long>(1, total_steps - config.warmup_steps);
}

double lr_schedule(long step, const StageConfig& c, long period) {
  if (step < 0) throw DomainError("lr_schedule: negative step");
  if (period < 1) throw DomainError("lr_schedule: period must be positive");
  if (step <= c.warmup_steps) {
    return c.warmup_steps == 0 ? c.peak_lr : c.peak_lr * double(step) / double(c.warmup_steps);
  }
  const long since = step - c.warmup_steps;
  const long pos = since - period * ((since - 1) / period);  // in (0, period]
  const double min_lr = c.min_lr_ratio * c.peak_lr;
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * double(pos) / double(period)));
  return min_lr + (c.peak_lr - min_lr) * cosine;
}

Condition cfg_dropout(const Condition& condition, double p, Rng& rng) {
  if (!(p >= 0 && p <= 1)) throw DomainError("cfg_dropout: probability outside [0, 1]");
  const double u = rng.uniform();
  if (u < p) return Condition{condition.codes, true};
  return condition;
}

template <class T>
void AdamW<T>::step(const std::vector<Parameter<T>*>& params, const std::vector<std::vector<T>>& grads, double lr) {
  if (params.size() != grads.size()) throw DimensionError("AdamW: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i]->value.size()) {
      throw DimensionError("AdamW: gradient size mismatch for " + params[i]->name);
    }
    for (T g : grads[i])
      if (!std::isfinite(double(g))) {
        throw NumericError(std::string("non-finite gradient in parameter group ") + group_name(params[i]->group) +
                           " (" + params[i]->name + ")");
      }
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(hyper_.beta1, double(step_));
  const double bc2 = 1.0 - std::pow(hyper_.beta2, double(step_));
  const T b1 = T(hyper_.beta1), b2 = T(hyper_.beta2);
  const T decay = T(1.0 - lr * hyper_.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& mom = moments_[params[i]];
    auto& p = params[i]->value;
    if (mom.m.empty()) {
      mom.m.assign(p.size(), T(0));
      mom.v.assign(p.size(), T(0));
    }
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      mom.m[k] = b1 * mom.m[k] + (T(1) - b1) * g[k];
      mom.v[k] = b2 * mom.v[k] + (T(1) - b2) * g[k] * g[k];
      const double mhat = double(mom.m[k]) / bc1;
      const double vhat = double(mom.v[k]) / bc2;
      p[k] = T(double(p[k] * decay) - lr * mhat / (std::sqrt(vhat) + hyper_.epsilon));
    }
  }
}

std::string metrics_csv_header() { return "step,stage,lr,gen_loss,probe_loss,critic_loss,isolation_diff"; }

std::string metrics_csv_row(const MetricsRecord& r) {
  auto num = [](double v) -> std::string {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  };
  return std::to_string(r.step) + "," + std::to_string(r.stage) + "," + num(r.lr) + "," + num(r.gen_loss) + "," +
         num(r.probe_loss) + "," + num(r.critic_loss) + "," + num(r.isolation_diff);
}

template <class T>
std::vector<TokenTask<T>> to_token_tasks(const std::vector<EditTask>& tasks, const ImageSpec& spec) {
  std::vector<TokenTask<T>> out;
  out.reserve(tasks.size());
  for (const auto& t : tasks) {
    TokenTask<T> tt;
    tt.source = tokenize(t.source, spec.patch).template cast<T>();
    tt.target = tokenize(t.target, spec.patch).template cast<T>();
    tt.condition.codes = t.instruction.codes();
    tt.mask = t.mask;
    out.push_back(std::move(tt));
  }
  return out;
}

template <class T>
TrainExample<T> make_example(const TokenTask<T>& task, Rng& rng, const TimeSampler& time) {
  FlowSample<T> fs = make_flow_sample(task.target, rng, time);
  return TrainExample<T>{std::move(fs.xt), task.source, std::move(fs.v_star), task.condition, fs.t};
}

template <class T>
EvalResult evaluate(const Model<T>& model, int stage, const std::vector<TokenTask<T>>& tasks, std::uint64_t seed,
                    const TimeSampler& time) {
  const ModelConfig& cfg = model.config();
  const CriticMode mode = stage_mode(stage);
  std::vector<double> gen(tasks.size()), probe(tasks.size()), critic(tasks.size());
  std::vector<std::vector<double>> by_layer(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t i) {
    NoGradGuard guard;
    Rng rng = Rng(seed).fork(i);
    TrainExample<T> ex = make_example(tasks[i], rng, time);
    OutputRequest req;
    req.probes = stage >= 1;
    req.predictions = stage >= 2;
    Tape<T> tape;
    ModelOutput<T> out = model.run({&ex.xt, &ex.source, ex.condition, ex.t}, mode, req, tape);
    gen[i] = double(gen_loss(out.velocity, ex.v_star).item());
    if (req.probes) {
      for (int l : cfg.probe_layers) by_layer[i].push_back(double(gen_loss(out.probes.at(l), ex.v_star).item()));
      probe[i] = double(probe_loss(out.probes, ex.v_star, cfg).item());
    }
    if (req.predictions) {
      std::map<int, Tensor<T>> targets;
      for (const auto& [l, p] : out.probes) targets[l] = critic_target(p.value(), ex.v_star);
      critic[i] = double(critic_loss(out.predictions, targets).item());
    }
  });
  EvalResult r;
  r.samples = tasks.size();
  const double n = std::max<double>(1.0, double(tasks.size()));
  auto mean = [&](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / n; };
  r.gen = mean(gen);
  r.has_gen = true;
  if (stage >= 1) {
    r.probe = mean(probe);
    r.has_probe = true;
    for (std::size_t k = 0; k < cfg.probe_layers.size(); ++k) {
      double acc = 0;
      for (const auto& row : by_layer) acc += row[k];
      r.probe_by_layer[cfg.probe_layers[k]] = acc / n;
    }
  }
  if (stage >= 2) {
    r.critic = mean(critic);
    r.has_critic = true;
  }
  return r;
}

template <class T>
std::uint64_t frozen_checksum(Model<T>& model, GroupSet trainable) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (const auto* p : model.parameters()) {
    if (trainable.contains(p->group)) continue;
    h = mix64(h ^ checksum<T>(p->value.data()));
  }
  return h;
}

template <class T>
StageResult<T> run_stage(Model<T>& model, const std::vector<TokenTask<T>>& train,
                         const std::vector<TokenTask<T>>& heldout, const StageConfig& config,
                         const StageHooks& hooks) {
  config.validate();
  const int stage = config.stage;
  const bool order_ok = stage == 0 ? model.stage == -1 : stage == 1 ? model.stage <= 0 : model.stage == stage - 1;
  if (!order_ok) {
    throw StagingError("stage " + std::to_string(stage) + " cannot start from a model whose last completed stage is " +
                       std::to_string(model.stage) +
                       (stage >= 2 ? " (needs a stage-" + std::to_string(stage - 1) + " checkpoint)" : ""));
  }
  if (stage >= 2 && !model.config().critic_enabled) throw ConfigError("stage " + std::to_string(stage) + " needs the critic");
  if (train.empty() && config.epochs > 0) throw ConfigError("empty training set");

  const GroupSet groups = config.groups();
  std::vector<Parameter<T>*> params;
  for (auto* p : model.parameters())
    if (groups.contains(p->group)) params.push_back(p);

  StageResult<T> result;
  result.frozen_checksum_before = frozen_checksum(model, groups);
  const std::uint64_t eval_seed = config.seed ^ 0xe7a1ULL;
  result.initial = evaluate(model, stage, heldout, eval_seed, config.time);

  const std::size_t n = train.size();
  const std::size_t batch = std::size_t(config.batch_size);
  const long per_epoch = long((n + batch - 1) / batch);
  long total = long(config.epochs) * per_epoch;
  if (config.max_steps > 0) total = std::min<long>(total, config.max_steps);
  const long period = restart_period(config, total);

  AdamW<T> opt({config.beta1, config.beta2, config.epsilon, config.weight_decay});
  const Rng root(config.seed);
  long step = 0;
  for (int epoch = 0; epoch < config.epochs && step < total; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng shuffle = root.fork(0x5eed0000ULL + std::uint64_t(epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    for (std::size_t begin = 0; begin < n && step < total; begin += batch) {
      ++step;
      const std::size_t count = std::min(batch, n - begin);
      const Rng step_rng = root.fork(std::uint64_t(step));
      std::vector<std::vector<std::vector<T>>> grads(count);
      std::vector<StageLoss<T>> losses(count);
      std::vector<TrainExample<T>> examples(count);
      parallel_for(count, [&](std::size_t b) {
        Rng rng = step_rng.fork(b);
        TrainExample<T> ex = make_example(train[order[begin + b]], rng, config.time);
        if (stage == 0 || stage == 3) ex.condition = cfg_dropout(ex.condition, config.cfg_dropout, rng);
        Tape<T> tape(groups);
        StageLoss<T> loss = stage_loss(model, stage, ex, tape, config.weights);
        backward(loss.total);
        grads[b].resize(params.size());
        for (std::size_t k = 0; k < params.size(); ++k) {
          auto g = tape.grad(*params[k]);
          if (g.empty()) {
            grads[b][k].assign(params[k]->value.size(), T(0));
          } else {
            grads[b][k].assign(g.begin(), g.end());
          }
        }
        loss.total = Var<T>();
        losses[b] = std::move(loss);
        examples[b] = std::move(ex);
      });

      // Fixed index-order reduction.
      std::vector<std::vector<T>> total_grad(params.size());
      const T inv = T(1) / T(count);
      for (std::size_t k = 0; k < params.size(); ++k) {
        total_grad[k].assign(params[k]->value.size(), T(0));
        for (std::size_t b = 0; b < count; ++b)
          for (std::size_t j = 0; j < total_grad[k].size(); ++j) total_grad[k][j] += grads[b][k][j];
        for (auto& g : total_grad[k]) g *= inv;
      }
      grads.clear();

      MetricsRecord rec;
      rec.step = step;
      rec.stage = stage;
      rec.lr = lr_schedule(step, config, period);
      opt.step(params, total_grad, rec.lr);

      auto batch_mean = [&](double StageLoss<T>::*field, bool StageLoss<T>::*has) {
        if (!(losses[0].*has)) return kNaN;
        double acc = 0;
        for (const auto& l : losses) acc += l.*field;
        return acc / double(count);
      };
      rec.gen_loss = batch_mean(&StageLoss<T>::gen, &StageLoss<T>::has_gen);
      rec.probe_loss = batch_mean(&StageLoss<T>::probe, &StageLoss<T>::has_probe);
      rec.critic_loss = batch_mean(&StageLoss<T>::critic, &StageLoss<T>::has_critic);
      rec.isolation_diff = kNaN;
      if (stage == 2 && config.isolation_every > 0 && (step == 1 || step % config.isolation_every == 0 || step == total)) {
        const auto& ex = examples[0];
        rec.isolation_diff = isolation_check(model, ModelInput<T>{&ex.xt, &ex.source, ex.condition, ex.t});
        result.max_isolation_diff = std::max(result.max_isolation_diff, rec.isolation_diff);
        if (!(rec.isolation_diff <= config.isolation_tolerance)) {
          throw StagingError("isolation breach at step " + std::to_string(step) + ": max diff " +
                             std::to_string(rec.isolation_diff));
        }
      }
      result.log.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
    }
    EvalResult ev = evaluate(model, stage, heldout, eval_seed, config.time);
    result.epochs.push_back(ev);
    if (hooks.on_epoch) hooks.on_epoch(epoch, ev);
  }

  result.final = result.epochs.empty() ? result.initial : result.epochs.back();
  result.frozen_checksum_after = frozen_checksum(model, groups);
  if (result.frozen_checksum_after != result.frozen_checksum_before) {
    throw StagingError("frozen parameters changed during stage " + std::to_string(stage));
  }
  model.stage = stage;
  return result;
}

#define ICRIT_INSTANTIATE(T)                                                                                       \
  template class AdamW<T>;                                                                                         \
  template std::vector<TokenTask<T>> to_token_tasks<T>(const std::vector<EditTask>&, const ImageSpec&);            \
  template TrainExample<T> make_example<T>(const TokenTask<T>&, Rng&, const TimeSampler&);                         \
  template EvalResult evaluate<T>(const Model<T>&, int, const std::vector<TokenTask<T>>&, std::uint64_t,           \
                                  const TimeSampler&);                                                             \
  template std::uint64_t frozen_checksum<T>(Model<T>&, GroupSet);                                                  \
  template StageResult<T> run_stage<T>(Model<T>&, const std::vector<TokenTask<T>>&,                                \
                                       const std::vector<TokenTask<T>>&, const StageConfig&, const StageHooks&);

ICRIT_INSTANTIATE(float)
ICRIT_INSTANTIATE(double)

#undef ICRIT_INSTANTIATE

}  // namespace icrit
