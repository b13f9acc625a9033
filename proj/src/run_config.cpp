#include "icrit/run_config.hpp"

#include <set>

#include "icrit/io.hpp"
#include "json.hpp"

namespace icrit {

using json = nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class F>
void take(const json& j, const char* key, F& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

const char* policy_name(TimePolicy p) { return p == TimePolicy::kUniform ? "uniform" : "logit-normal"; }

TimePolicy parse_policy(const std::string& s) {
  if (s == "uniform") return TimePolicy::kUniform;
  if (s == "logit-normal") return TimePolicy::kLogitNormal;
  throw ConfigError("unknown time policy '" + s + "'");
}

void stage_from_json(const json& j, StageConfig& c, bool& seed_set, const std::string& where) {
  check_keys(j, where,
             {"epochs", "batch_size", "max_steps", "peak_lr", "warmup_steps", "min_lr_ratio", "restart_period", "beta1",
              "beta2", "epsilon", "weight_decay", "cfg_dropout", "critic_weight", "probe_weight", "time_policy",
              "logit_mean", "logit_std", "isolation_every", "isolation_tolerance", "seed"});
  take(j, "epochs", c.epochs);
  take(j, "batch_size", c.batch_size);
  take(j, "max_steps", c.max_steps);
  take(j, "peak_lr", c.peak_lr);
  take(j, "warmup_steps", c.warmup_steps);
  take(j, "min_lr_ratio", c.min_lr_ratio);
  take(j, "restart_period", c.restart_period);
  take(j, "beta1", c.beta1);
  take(j, "beta2", c.beta2);
  take(j, "epsilon", c.epsilon);
  take(j, "weight_decay", c.weight_decay);
  take(j, "cfg_dropout", c.cfg_dropout);
  take(j, "critic_weight", c.weights.critic);
  take(j, "probe_weight", c.weights.probe);
  if (j.contains("time_policy")) c.time.policy = parse_policy(j.at("time_policy").get<std::string>());
  take(j, "logit_mean", c.time.logit_mean);
  take(j, "logit_std", c.time.logit_std);
  take(j, "isolation_every", c.isolation_every);
  take(j, "isolation_tolerance", c.isolation_tolerance);
  if (j.contains("seed")) {
    j.at("seed").get_to(c.seed);
    seed_set = true;
  }
}

json stage_to_json(const StageConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"max_steps", c.max_steps},
              {"peak_lr", c.peak_lr},
              {"warmup_steps", c.warmup_steps},
              {"min_lr_ratio", c.min_lr_ratio},
              {"restart_period", c.restart_period},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"weight_decay", c.weight_decay},
              {"cfg_dropout", c.cfg_dropout},
              {"critic_weight", c.weights.critic},
              {"probe_weight", c.weights.probe},
              {"time_policy", policy_name(c.time.policy)},
              {"logit_mean", c.time.logit_mean},
              {"logit_std", c.time.logit_std},
              {"isolation_every", c.isolation_every},
              {"isolation_tolerance", c.isolation_tolerance},
              {"seed", c.seed}};
}

}  // namespace

StageConfig RunConfig::stage(int n) const {
  if (n < 0 || n > 3) throw ConfigError("stage must be 0, 1, 2 or 3");
  StageConfig c = stages[std::size_t(n)];
  c.stage = n;
  if (!stage_seed_set[std::size_t(n)]) c.seed = seed * 7919 + 1000 + std::uint64_t(n);
  return c;
}

void RunConfig::validate() const {
  if (precision != "float32" && precision != "float64") {
    throw ConfigError("precision must be float32 or float64, got '" + precision + "'");
  }
  if (!(heldout_fraction >= 0 && heldout_fraction < 1)) throw ConfigError("heldout_fraction must be in [0, 1)");
  validate_mix(mix);
  model.validate();
  for (int s = 0; s < 4; ++s) stage(s).validate();
  if (sample_steps < 1) throw ConfigError("sample steps must be >= 1");
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  RunConfig c;
  try {
    check_keys(j, "run config",
               {"seed", "deterministic", "precision", "threads", "output_dir", "data", "heldout_fraction", "model",
                "make_data", "stages", "analysis", "sample"});
    take(j, "seed", c.seed);
    take(j, "deterministic", c.deterministic);
    take(j, "precision", c.precision);
    take(j, "threads", c.threads);
    take(j, "output_dir", c.output_dir);
    take(j, "data", c.data);
    take(j, "heldout_fraction", c.heldout_fraction);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model").dump());
    if (j.contains("make_data")) {
      const json& m = j.at("make_data");
      check_keys(m, "make_data", {"size", "mix"});
      take(m, "size", c.data_size);
      if (m.contains("mix")) {
        const json& mix = m.at("mix");
        if (mix.is_string()) {
          c.mix = parse_mix(mix.get<std::string>());
        } else if (mix.is_object()) {
          c.mix = KindMix{};
          for (auto it = mix.begin(); it != mix.end(); ++it)
            c.mix[std::size_t(parse_task_kind(it.key()))] = it.value().get<double>();
        } else {
          c.mix = mix.get<KindMix>();
        }
      }
    }
    if (j.contains("stages")) {
      const json& s = j.at("stages");
      check_keys(s, "stages", {"0", "1", "2", "3"});
      for (auto it = s.begin(); it != s.end(); ++it) {
        const std::size_t n = std::size_t(std::stoi(it.key()));
        bool seed_set = false;
        stage_from_json(it.value(), c.stages[n], seed_set, "stages." + it.key());
        c.stage_seed_set[n] = seed_set;
      }
    }
    if (j.contains("analysis")) {
      const json& a = j.at("analysis");
      check_keys(a, "analysis",
                 {"steps", "guidance", "analysis_step", "layer_a", "layer_b", "e_layer", "pool_factor", "pool_and_rank",
                  "seed", "keep_maps", "samples"});
      take(a, "steps", c.analysis.steps);
      take(a, "guidance", c.analysis.guidance);
      take(a, "analysis_step", c.analysis.analysis_step);
      take(a, "layer_a", c.analysis.layer_a);
      take(a, "layer_b", c.analysis.layer_b);
      take(a, "e_layer", c.analysis.e_layer);
      take(a, "pool_factor", c.analysis.pool_factor);
      take(a, "pool_and_rank", c.analysis.pool_and_rank);
      take(a, "seed", c.analysis.seed);
      take(a, "keep_maps", c.analysis.keep_maps);
      take(a, "samples", c.analysis_samples);
    }
    if (j.contains("sample")) {
      const json& s = j.at("sample");
      check_keys(s, "sample", {"steps", "guidance"});
      take(s, "steps", c.sample_steps);
      take(s, "guidance", c.sample_guidance);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  const auto bytes = read_file(path);
  return run_config_from_json(std::string(bytes.begin(), bytes.end()));
}

std::string run_config_json(const RunConfig& c) {
  json mix = json::object();
  for (int k = 0; k < kTaskKinds; ++k) mix[task_kind_name(TaskKind(k))] = c.mix[std::size_t(k)];
  json stages = json::object();
  for (int s = 0; s < 4; ++s) stages[std::to_string(s)] = stage_to_json(c.stage(s));
  const AnalysisOptions& a = c.analysis;
  json j{{"seed", c.seed},
         {"deterministic", c.deterministic},
         {"precision", c.precision},
         {"threads", c.threads},
         {"output_dir", c.output_dir},
         {"data", c.data},
         {"heldout_fraction", c.heldout_fraction},
         {"model", json::parse(model_config_json(c.model))},
         {"make_data", {{"size", c.data_size}, {"mix", mix}}},
         {"stages", stages},
         {"analysis",
          {{"steps", a.steps},
           {"guidance", a.guidance},
           {"analysis_step", a.analysis_step},
           {"layer_a", a.layer_a},
           {"layer_b", a.layer_b},
           {"e_layer", a.e_layer},
           {"pool_factor", a.pool_factor},
           {"pool_and_rank", a.pool_and_rank},
           {"seed", a.seed},
           {"keep_maps", a.keep_maps},
           {"samples", c.analysis_samples}}},
         {"sample", {{"steps", c.sample_steps}, {"guidance", c.sample_guidance}}}};
  return j.dump(2) + "\n";
}

}  // namespace icrit
