#include "icrit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace icrit {

SpatialMap pool(const SpatialMap& map, std::size_t factor) {
  if (factor == 0 || map.height % factor != 0 || map.width % factor != 0) {
    throw DimensionError("pool: " + std::to_string(map.height) + "x" + std::to_string(map.width) +
                         " map not divisible by factor " + std::to_string(factor));
  }
  SpatialMap out(map.height / factor, map.width / factor, map.tag);
  const double inv = 1.0 / double(factor * factor);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c) {
      double acc = 0;
      for (std::size_t dr = 0; dr < factor; ++dr)
        for (std::size_t dc = 0; dc < factor; ++dc) acc += map.at(r * factor + dr, c * factor + dc);
      out.at(r, c) = acc * inv;
    }
  return out;
}

std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * double(i + j);
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

SpatialMap rank_normalize(const SpatialMap& map) {
  SpatialMap out(map.height, map.width, map.tag);
  const std::size_t n = map.values.size();
  if (n == 0) return out;
  if (n == 1) {
    out.values[0] = 0.5;
    return out;
  }
  const auto ranks = average_ranks(map.values);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = ranks[i] / double(n - 1);
  return out;
}

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("spearman: inputs differ in length");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = 0.5 * double(n - 1);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = ra[i] - mean, db = rb[i] - mean;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0 || sbb == 0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> spearman(const SpatialMap& a, const SpatialMap& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("spearman: map dimensions differ");
  return spearman(a.values, b.values);
}

template <class T>
SpatialMap probe_error_map(const Tensor<T>& probe_output, const Tensor<T>& v_star, const ModelConfig& config) {
  return per_position_sq_error_map(probe_output, v_star, std::size_t(config.grid_h), std::size_t(config.grid_w));
}

SpatialMap abs_diff(const SpatialMap& a, const SpatialMap& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("abs_diff: map dimensions differ");
  SpatialMap out(a.height, a.width, MapTag::kDerived);
  for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = std::abs(a.values[i] - b.values[i]);
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw DomainError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

void CorrelationReport::add(int sample_id, std::optional<double> value) {
  sample_ids.push_back(sample_id);
  rho.push_back(value);
}

void CorrelationReport::summarize() {
  std::vector<double> values;
  for (const auto& r : rho)
    if (r) values.push_back(*r);
  defined = values.size();
  excluded = rho.size() - values.size();
  if (values.empty()) {
    median = std::numeric_limits<double>::quiet_NaN();
    p_positive = p_above_02 = 0;
    return;
  }
  median = icrit::median(values);
  std::size_t pos = 0, above = 0;
  for (double v : values) {
    pos += v > 0;
    above += v > 0.2;
  }
  p_positive = double(pos) / double(values.size());
  p_above_02 = double(above) / double(values.size());
}

int AnalysisOptions::resolved_step() const {
  if (analysis_step > 0) return analysis_step;
  return int(std::ceil(0.95 * double(steps)));
}

void AnalysisOptions::validate(const ModelConfig& config) const {
  auto fail = [](const std::string& what) { throw ConfigError("analysis: " + what); };
  if (steps < 1) fail("steps must be >= 1");
  if (analysis_step < 0 || analysis_step > steps) fail("analysis step outside 1..steps");
  if (config.probe_slot(layer_a) < 0 || config.probe_slot(layer_b) < 0 || config.probe_slot(e_layer) < 0) {
    fail("layer pair and E layer must be probed layers");
  }
  if (layer_a >= layer_b) fail("layer_a must be shallower than layer_b");
  if (layer_a + 1 > config.num_blocks) fail("experiment A needs block layer_a + 1");
  if (pool_factor < 1 || config.grid_h % int(pool_factor) != 0 || config.grid_w % int(pool_factor) != 0) {
    fail("pool factor must divide the token grid");
  }
}

const CorrelationReport& MotivationResult::layer(int l) const {
  for (const auto& r : averaged)
    if (r.layer_a == l) return r;
  throw ConfigError("motivation study has no layer " + std::to_string(l));
}

std::optional<double> correlate(const SpatialMap& y, const SpatialMap& e, const AnalysisOptions& options) {
  if (!options.pool_and_rank) return spearman(y, e);
  return spearman(rank_normalize(pool(y, options.pool_factor)), rank_normalize(pool(e, options.pool_factor)));
}

namespace {

template <class T>
SpatialMap x0_error_map(const Tensor<T>& x, const Tensor<T>& v, T t, const Tensor<T>& x0, const ModelConfig& cfg) {
  SpatialMap map(std::size_t(cfg.grid_h), std::size_t(cfg.grid_w), MapTag::kProbeError);
  const std::size_t dz = x.dim(1);
  for (std::size_t i = 0; i < map.size(); ++i) {
    double acc = 0;
    for (std::size_t c = 0; c < dz; ++c) {
      const double d = double(x[i * dz + c]) - double(t) * double(v[i * dz + c]) - double(x0[i * dz + c]);
      acc += d * d;
    }
    map.values[i] = acc;
  }
  return map;
}

}  // namespace

template <class T>
MotivationResult motivation_study(const Model<T>& model, const std::vector<TokenTask<T>>& tasks,
                                  const AnalysisOptions& options) {
  const ModelConfig& cfg = model.config();
  if (options.steps < 1) throw ConfigError("analysis: steps must be >= 1");
  std::vector<int> layers = cfg.probe_layers;
  if (layers.back() != cfg.num_blocks) layers.push_back(cfg.num_blocks);
  const std::size_t nl = layers.size(), ns = std::size_t(options.steps);
  const CriticMode mode = model.native_mode();

  // rho[sample][layer][step]
  std::vector<std::vector<std::vector<std::optional<double>>>> rho(tasks.size());
  std::vector<std::vector<NamedMap>> kept(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t i) {
    const TokenTask<T>& task = tasks[i];
    Rng rng = Rng(options.seed).fork(i);
    const Tensor<T> x1 = standard_normal<T>(task.target.shape(), rng);
    std::vector<std::vector<SpatialMap>> maps(nl);
    for (std::size_t li = 0; li < nl; ++li) {
      const int layer = layers[li];
      VelocityFn<T> fn = [&](const Tensor<T>& x, T t, bool conditional) {
        Condition c = task.condition;
        c.null = !conditional;
        return model.layer_velocity({&x, &task.source, c, t}, layer, mode);
      };
      StepObserver<T> obs = [&](int, T t, const Tensor<T>& x, const Tensor<T>& v) {
        maps[li].push_back(x0_error_map(x, v, t, task.target, cfg));
      };
      euler_sample(fn, x1, options.steps, T(options.guidance), obs);
    }
    rho[i].assign(nl, std::vector<std::optional<double>>(ns));
    for (std::size_t li = 0; li < nl; ++li)
      for (std::size_t k = 0; k < ns; ++k) rho[i][li][k] = correlate(maps[li][k], maps[nl - 1][k], options);
    if (i < options.keep_maps) {
      const std::size_t k = std::size_t(options.resolved_step() - 1);
      for (std::size_t li = 0; li < nl; ++li)
        kept[i].push_back({int(i), "motivation_l" + std::to_string(layers[li]) + "_step" + std::to_string(k + 1),
                           maps[li][k]});
    }
  });

  MotivationResult result;
  for (std::size_t li = 0; li < nl; ++li) {
    CorrelationReport avg;
    avg.experiment = "motivation";
    avg.layer_a = layers[li];
    avg.layer_b = cfg.num_blocks;
    avg.step = 0;
    for (std::size_t k = 0; k < ns; ++k) {
      CorrelationReport r;
      r.experiment = "motivation";
      r.layer_a = layers[li];
      r.layer_b = cfg.num_blocks;
      r.step = int(k + 1);
      for (std::size_t i = 0; i < tasks.size(); ++i) r.add(int(i), rho[i][li][k]);
      r.summarize();
      result.per_step.push_back(std::move(r));
    }
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      double acc = 0;
      std::size_t n = 0;
      for (const auto& v : rho[i][li])
        if (v) {
          acc += *v;
          ++n;
        }
      avg.add(int(i), n ? std::optional<double>(acc / double(n)) : std::nullopt);
    }
    avg.summarize();
    result.averaged.push_back(std::move(avg));
  }
  for (auto& k : kept)
    for (auto& m : k) result.maps.push_back(std::move(m));
  return result;
}

template <class T>
ExperimentMaps experiment_maps(const Model<T>& model, const TokenTask<T>& task, int sample_id,
                               const AnalysisOptions& options) {
  const ModelConfig& cfg = model.config();
  if (!cfg.critic_enabled) throw ConfigError("experiments need a critic-enabled model");
  NoGradGuard guard;
  Rng rng = Rng(options.seed).fork(std::uint64_t(sample_id));
  const T t = T(step_time(options.resolved_step(), options.steps));
  FlowSample<T> fs = make_flow_sample(task.target, standard_normal<T>(task.target.shape(), rng), t);
  const ModelInput<T> input{&fs.xt, &task.source, task.condition, t};

  const CriticMode un_mode = model.native_mode();
  OutputRequest un_req;
  un_req.velocity = false;
  un_req.probes = true;
  un_req.predictions = un_mode != CriticMode::kAbsent;
  un_req.score_layers = {options.layer_a, options.layer_a + 1};
  Tape<T> t1;
  ModelOutput<T> un = model.run(input, un_mode, un_req, t1);

  OutputRequest ma_req;
  ma_req.velocity = false;
  ma_req.probes = true;
  ma_req.predictions = true;
  Tape<T> t2;
  ModelOutput<T> ma = model.run(input, CriticMode::kMasked, ma_req, t2);

  const auto gh = std::size_t(cfg.grid_h), gw = std::size_t(cfg.grid_w);
  ExperimentMaps maps;
  const auto& pred = un_req.predictions ? un.predictions : ma.predictions;
  const Tensor<T>& e = pred.at(options.e_layer).value();
  maps.e = SpatialMap(gh, gw, MapTag::kCriticPrediction);
  for (std::size_t i = 0; i < maps.e.size(); ++i) maps.e.values[i] = double(e[i]);

  maps.y_a = abs_diff(attention_key_mass(un.trace, options.layer_a + 1, cfg.grid_h, cfg.grid_w),
                      attention_key_mass(un.trace, options.layer_a, cfg.grid_h, cfg.grid_w));

  auto m = [&](const ModelOutput<T>& o, int l) { return probe_error_map(o.probes.at(l).value(), fs.v_star, cfg); };
  const SpatialMap un_a = m(un, options.layer_a), un_b = m(un, options.layer_b);
  const SpatialMap ma_a = m(ma, options.layer_a), ma_b = m(ma, options.layer_b);
  maps.y_b = abs_diff(un_b, un_a);
  maps.y_c = SpatialMap(gh, gw, MapTag::kDerived);
  for (std::size_t i = 0; i < maps.y_c.size(); ++i) {
    maps.y_c.values[i] =
        std::abs((un_b.values[i] - un_a.values[i]) - (ma_b.values[i] - ma_a.values[i]));
  }
  return maps;
}

template <class T>
ExperimentResult run_experiments(const Model<T>& model, const std::vector<TokenTask<T>>& tasks,
                                 const AnalysisOptions& options) {
  options.validate(model.config());
  std::vector<ExperimentMaps> all(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t i) { all[i] = experiment_maps(model, tasks[i], int(i), options); });

  ExperimentResult result;
  const int step = options.resolved_step();
  auto init = [&](CorrelationReport& r, const char* name, int la, int lb) {
    r.experiment = name;
    r.layer_a = la;
    r.layer_b = lb;
    r.step = step;
  };
  init(result.a, "A", options.layer_a, options.layer_a + 1);
  init(result.b, "B", options.layer_a, options.layer_b);
  init(result.c, "C", options.layer_a, options.layer_b);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& m = all[i];
    result.a.add(int(i), correlate(m.y_a, m.e, options));
    result.b.add(int(i), correlate(m.y_b, m.e, options));
    result.c.add(int(i), correlate(m.y_c, m.e, options));
    if (i < options.keep_maps) {
      for (auto [name, map] : {std::pair{"E", &m.e}, std::pair{"Y_A", &m.y_a}, std::pair{"Y_B", &m.y_b},
                               std::pair{"Y_C", &m.y_c}})
        result.maps.push_back({int(i), name, *map});
    }
  }
  result.a.summarize();
  result.b.summarize();
  result.c.summarize();
  return result;
}

template <class T>
CorrelationReport critic_calibration(const Model<T>& model, const std::vector<TokenTask<T>>& tasks, int layer,
                                     std::uint64_t seed, const TimeSampler& time) {
  const ModelConfig& cfg = model.config();
  if (!cfg.critic_enabled) throw ConfigError("critic calibration needs a critic-enabled model");
  if (cfg.probe_slot(layer) < 0) throw ConfigError("layer " + std::to_string(layer) + " is not probed");
  const CriticMode mode = model.native_mode() == CriticMode::kAbsent ? CriticMode::kMasked : model.native_mode();
  std::vector<std::optional<double>> rho(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t i) {
    NoGradGuard guard;
    Rng rng = Rng(seed).fork(i);
    const TrainExample<T> ex = make_example(tasks[i], rng, time);
    OutputRequest req;
    req.velocity = false;
    req.probes = true;
    req.predictions = true;
    Tape<T> tape;
    auto out = model.run({&ex.xt, &ex.source, ex.condition, ex.t}, mode, req, tape, layer);
    const Tensor<T> e = critic_target(out.probes.at(layer).value(), ex.v_star);
    const Tensor<T>& p = out.predictions.at(layer).value();
    std::vector<double> a(e.size()), b(e.size());
    for (std::size_t k = 0; k < e.size(); ++k) {
      a[k] = double(p[k]);
      b[k] = double(e[k]);
    }
    rho[i] = spearman(a, b);
  });
  CorrelationReport r;
  r.experiment = "calibration";
  r.layer_a = r.layer_b = layer;
  for (std::size_t i = 0; i < rho.size(); ++i) r.add(int(i), rho[i]);
  r.summarize();
  return r;
}

std::string report_csv_header() { return "sample_id,experiment,layer_a,layer_b,step,rho"; }

std::string report_csv(const std::vector<CorrelationReport>& reports) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string out = report_csv_header() + "\n";
  for (const auto& r : reports) {
    const std::string tail = "," + r.experiment + "," + std::to_string(r.layer_a) + "," + std::to_string(r.layer_b) +
                             "," + std::to_string(r.step) + ",";
    for (std::size_t i = 0; i < r.rho.size(); ++i) {
      out += std::to_string(r.sample_ids[i]) + tail + (r.rho[i] ? num(*r.rho[i]) : std::string("undefined")) + "\n";
    }
    out += "median" + tail + (r.defined ? num(r.median) : std::string("undefined")) + "\n";
    out += "p_gt_0" + tail + num(r.p_positive) + "\n";
    out += "p_gt_0.2" + tail + num(r.p_above_02) + "\n";
    out += "n" + tail + std::to_string(r.defined) + "\n";
    out += "excluded" + tail + std::to_string(r.excluded) + "\n";
  }
  return out;
}

#define ICRIT_INSTANTIATE(T)                                                                                  \
  template SpatialMap probe_error_map<T>(const Tensor<T>&, const Tensor<T>&, const ModelConfig&);            \
  template MotivationResult motivation_study<T>(const Model<T>&, const std::vector<TokenTask<T>>&,           \
                                                const AnalysisOptions&);                                     \
  template ExperimentMaps experiment_maps<T>(const Model<T>&, const TokenTask<T>&, int, const AnalysisOptions&); \
  template ExperimentResult run_experiments<T>(const Model<T>&, const std::vector<TokenTask<T>>&,            \
                                               const AnalysisOptions&);                                      \
  template CorrelationReport critic_calibration<T>(const Model<T>&, const std::vector<TokenTask<T>>&, int,   \
                                                   std::uint64_t, const TimeSampler&);

ICRIT_INSTANTIATE(float)
ICRIT_INSTANTIATE(double)

#undef ICRIT_INSTANTIATE

}  // namespace icrit
