// icrit command-line tool: make-data, train, sample, analyze, inspect.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "icrit/analysis.hpp"
#include "icrit/io.hpp"
#include "icrit/run_config.hpp"

using namespace icrit;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  std::optional<unsigned> threads;
  bool deterministic = false;
  std::optional<std::string> out;
  std::optional<std::string> data;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config");
  cmd->add_option("--seed", c.seed, "Run seed");
  cmd->add_option("--precision", c.precision, "float32 or float64")->check(CLI::IsMember({"float32", "float64"}));
  cmd->add_option("--threads", c.threads, "Worker threads (0 = all)");
  cmd->add_flag("--deterministic", c.deterministic, "Force the determinism flag");
}

RunConfig resolve(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) rc.seed = *c.seed;
  if (c.precision) rc.precision = *c.precision;
  if (c.threads) rc.threads = *c.threads;
  if (c.deterministic) rc.deterministic = true;
  if (c.out) rc.output_dir = *c.out;
  if (c.data) rc.data = *c.data;
  rc.validate();
  set_deterministic(rc.deterministic);
  rc.deterministic = deterministic();  // IC_DETERMINISTIC=1 wins
  if (rc.threads > 0) set_worker_threads(rc.threads);
  return rc;
}

Dataset load_data(const RunConfig& rc) {
  if (rc.data.empty()) throw UsageError("no dataset: pass --data or set \"data\" in the config");
  return load_dataset(rc.data);
}

void check_compatible(const ImageSpec& spec, const ModelConfig& m) {
  if (spec.grid_h() != m.grid_h || spec.grid_w() != m.grid_w || spec.token_dim() != m.latent_dim) {
    throw ConfigError("dataset tokens (" + std::to_string(spec.grid_h()) + "x" + std::to_string(spec.grid_w()) + "x" +
                      std::to_string(spec.token_dim()) + ") do not match the model grid (" +
                      std::to_string(m.grid_h) + "x" + std::to_string(m.grid_w) + "x" + std::to_string(m.latent_dim) +
                      ")");
  }
}

std::size_t heldout_count(const RunConfig& rc, std::size_t n) {
  return std::size_t(std::floor(double(n) * rc.heldout_fraction));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string eval_line(const EvalResult& e) {
  std::string s;
  if (e.has_gen) s += " gen=" + fmt(e.gen);
  if (e.has_probe) s += " probe=" + fmt(e.probe);
  if (e.has_critic) s += " critic=" + fmt(e.critic);
  return s;
}

// ---------------------------------------------------------------------------

int cmd_make_data(const RunConfig& rc, std::optional<std::size_t> size, const std::string& mix_text,
                  const fs::path& out) {
  const KindMix mix = mix_text.empty() ? rc.mix : parse_mix(mix_text);
  const std::size_t n = size ? *size : rc.data_size;
  Dataset d{ImageSpec{}, make_dataset(rc.seed, n, mix)};
  save_dataset(d, out);
  std::cout << "wrote " << n << " tasks to " << out.string() << "\n";
  return 0;
}

template <class T>
int cmd_train(const RunConfig& rc, int stage, const std::string& init_from) {
  if (stage >= 2 && init_from.empty()) {
    throw StagingError("stage " + std::to_string(stage) + " needs --init-from a stage-" + std::to_string(stage - 1) +
                       " checkpoint");
  }
  Model<T> model = init_from.empty() ? Model<T>(rc.model, rc.seed) : load_checkpoint<T>(init_from);
  const Dataset data = load_data(rc);
  check_compatible(data.spec, model.config());
  auto tasks = to_token_tasks<T>(data.tasks, data.spec);
  const std::size_t held = heldout_count(rc, tasks.size());
  std::vector<TokenTask<T>> heldout(tasks.end() - long(held), tasks.end());
  tasks.resize(tasks.size() - held);

  const StageConfig sc = rc.stage(stage);
  StageHooks hooks;
  hooks.on_step = [](const MetricsRecord& r) {
    if (r.step % 50 == 0) std::cerr << "step " << r.step << " lr=" << fmt(r.lr) << "\n";
  };
  hooks.on_epoch = [](int epoch, const EvalResult& e) { std::cerr << "epoch " << epoch + 1 << eval_line(e) << "\n"; };
  StageResult<T> result = run_stage(model, tasks, heldout, sc, hooks);

  const fs::path dir = rc.output_dir;
  const std::string stem = "stage" + std::to_string(stage);
  save_checkpoint(model, dir / (stem + ".ickp"));
  std::string csv = metrics_csv_header() + "\n";
  for (const auto& r : result.log) csv += metrics_csv_row(r) + "\n";
  write_text(dir / (stem + "_metrics.csv"), csv);
  RunConfig resolved = rc;
  resolved.model = model.config();
  write_text(dir / (stem + "_config.json"), run_config_json(resolved));
  std::cout << "stage " << stage << " steps=" << result.log.size() << " initial:" << eval_line(result.initial)
            << " final:" << eval_line(result.final) << "\n";
  if (stage == 2) std::cout << "max isolation diff " << result.max_isolation_diff << "\n";
  std::cout << "wrote " << (dir / (stem + ".ickp")).string() << "\n";
  return 0;
}

template <class T>
int cmd_sample(const RunConfig& rc, const std::string& ckpt, std::size_t index) {
  Model<T> model = load_checkpoint<T>(ckpt);
  const Dataset data = load_data(rc);
  check_compatible(data.spec, model.config());
  if (index >= data.tasks.size()) throw UsageError("task index " + std::to_string(index) + " out of range");
  const EditTask& task = data.tasks[index];
  const auto tt = to_token_tasks<T>({task}, data.spec)[0];

  Rng rng(rc.seed);
  const Tensor<T> x1 = standard_normal<T>(tt.target.shape(), rng);
  const CriticMode mode = model.native_mode();
  VelocityFn<T> fn = [&](const Tensor<T>& x, T t, bool conditional) {
    Condition c = tt.condition;
    c.null = !conditional;
    return model.velocity({&x, &tt.source, c, t}, mode);
  };
  const Tensor<T> x0 = euler_sample(fn, x1, rc.sample_steps, T(rc.sample_guidance));
  const auto& s = data.spec;
  const Tensor<float> image = detokenize(x0.template cast<float>(), s.height, s.width, s.channels, s.patch);
  double mse = 0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double d = double(image[i]) - double(task.target[i]);
    mse += d * d;
  }
  mse /= double(image.size());

  const fs::path dir = rc.output_dir;
  const std::string stem = "task" + std::to_string(index);
  write_file(dir / (stem + "_output.ppm"), image_ppm(image));
  write_file(dir / (stem + "_source.ppm"), image_ppm(task.source));
  write_file(dir / (stem + "_target.ppm"), image_ppm(task.target));
  save_map(per_position_sq_error_map(x0, tt.target, std::size_t(s.grid_h()), std::size_t(s.grid_w())),
           dir / (stem + "_error.icmp"));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", mse);
  std::cout << "task " << index << " kind=" << task_kind_name(task.instruction.kind) << " mse=" << buf << "\n";
  return 0;
}

void dump_maps(const std::vector<NamedMap>& maps, const fs::path& dir, const std::string& prefix) {
  for (const auto& m : maps) {
    const std::string stem = prefix + "_s" + std::to_string(m.sample_id) + "_" + m.name;
    save_map(m.map, dir / (stem + ".icmp"));
    write_file(dir / (stem + ".ppm"), map_ppm(m.map));
  }
}

void print_report(const CorrelationReport& r) {
  std::cout << r.experiment << " layers " << r.layer_a << "->" << r.layer_b << " step " << r.step
            << ": median=" << fmt(r.median) << " P(>0)=" << fmt(r.p_positive) << " P(>0.2)=" << fmt(r.p_above_02)
            << " n=" << r.defined << " excluded=" << r.excluded << "\n";
}

template <class T>
int cmd_analyze(const RunConfig& rc, const std::string& ckpt, const std::string& experiment) {
  Model<T> model = load_checkpoint<T>(ckpt);
  const int need = experiment == "motivation" ? 1 : experiment == "c" || experiment == "all" ? 3 : 2;
  if (model.stage < need) {
    throw StagingError("experiment '" + experiment + "' needs a stage-" + std::to_string(need) +
                       " checkpoint; this one completed stage " + std::to_string(model.stage));
  }
  const Dataset data = load_data(rc);
  check_compatible(data.spec, model.config());
  auto tasks = to_token_tasks<T>(data.tasks, data.spec);
  const std::size_t held = heldout_count(rc, tasks.size());
  std::vector<TokenTask<T>> eval(tasks.end() - long(held), tasks.end());
  if (eval.empty()) eval = tasks;
  if (eval.size() > rc.analysis_samples) eval.resize(rc.analysis_samples);
  std::cerr << "analyzing " << eval.size() << " samples\n";

  const fs::path dir = rc.output_dir;
  std::vector<CorrelationReport> reports;
  if (experiment == "motivation") {
    MotivationResult r = motivation_study(model, eval, rc.analysis);
    reports = r.per_step;
    reports.insert(reports.end(), r.averaged.begin(), r.averaged.end());
    for (const auto& a : r.averaged) print_report(a);
    dump_maps(r.maps, dir / "maps", "motivation");
  } else {
    ExperimentResult r = run_experiments(model, eval, rc.analysis);
    if (experiment == "a" || experiment == "all") reports.push_back(r.a);
    if (experiment == "b" || experiment == "all") reports.push_back(r.b);
    if (experiment == "c" || experiment == "all") reports.push_back(r.c);
    for (const auto& x : reports) print_report(x);
    dump_maps(r.maps, dir / "maps", "experiment");
  }
  write_text(dir / ("report_" + experiment + ".csv"), report_csv(reports));
  std::cout << "wrote " << (dir / ("report_" + experiment + ".csv")).string() << "\n";
  return 0;
}

int cmd_inspect(const std::string& ckpt) {
  Model<float> model = load_checkpoint<float>(ckpt);
  std::size_t count = 0;
  for (auto* p : model.parameters()) count += p->value.size();
  std::cout << "stage " << model.stage << "\nparameters " << count << "\ncritic index "
            << model.config().critic_index() << "\nmodel " << model_config_json(model.config()) << "\n";
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"icrit: staged critic training and analysis on toy editing tasks"};
  app.require_subcommand(1);

  Common common;
  auto* make = app.add_subcommand("make-data", "Generate a task dataset");
  add_common(make, common);
  std::optional<std::size_t> size;
  std::string mix, data_out;
  make->add_option("--size", size, "Number of tasks");
  make->add_option("--mix", mix, "Kind mix, e.g. copy=0.2,recolor=0.2,... or 5 numbers");
  make->add_option("--out", data_out, "Output dataset file")->required();

  auto* train = app.add_subcommand("train", "Run one training stage");
  add_common(train, common);
  int stage = 1;
  std::string init_from;
  train->add_option("--stage", stage, "Stage 0 (pretrain), 1, 2 or 3")->required()->check(CLI::Range(0, 3));
  train->add_option("--data", common.data, "Dataset file");
  train->add_option("--init-from", init_from, "Checkpoint of the previous stage");
  train->add_option("--out", common.out, "Output directory");
  std::optional<int> epochs, max_steps;
  train->add_option("--epochs", epochs, "Override epochs");
  train->add_option("--max-steps", max_steps, "Override max optimizer steps");

  auto* sample = app.add_subcommand("sample", "Edit one task's source image");
  add_common(sample, common);
  std::string ckpt;
  std::size_t task = 0;
  std::optional<int> steps;
  std::optional<double> guidance;
  sample->add_option("--ckpt", ckpt, "Checkpoint")->required();
  sample->add_option("--data", common.data, "Dataset file");
  sample->add_option("--task", task, "Task index in the dataset");
  sample->add_option("--steps", steps, "Denoising steps");
  sample->add_option("--guidance", guidance, "Guidance scale");
  sample->add_option("--out", common.out, "Output directory");

  auto* analyze = app.add_subcommand("analyze", "Motivation study and experiments A-C");
  add_common(analyze, common);
  std::string experiment = "all";
  std::optional<std::size_t> samples;
  std::optional<int> analysis_steps;
  bool no_pool = false;
  std::optional<std::size_t> keep_maps;
  analyze->add_option("--ckpt", ckpt, "Checkpoint")->required();
  analyze->add_option("--data", common.data, "Dataset file");
  analyze->add_option("--experiment", experiment, "motivation, a, b, c or all")
      ->check(CLI::IsMember({"motivation", "a", "b", "c", "all"}));
  analyze->add_option("--samples", samples, "Held-out samples to analyze");
  analyze->add_option("--steps", analysis_steps, "Denoising steps");
  analyze->add_flag("--no-pool-rank", no_pool, "Correlate raw maps");
  analyze->add_option("--keep-maps", keep_maps, "Dump maps for this many samples");
  analyze->add_option("--out", common.out, "Output directory");

  auto* inspect = app.add_subcommand("inspect", "Print checkpoint metadata");
  inspect->add_option("--ckpt", ckpt, "Checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorKind::kUsage);
  }

  if (inspect->parsed()) return cmd_inspect(ckpt);
  RunConfig rc = resolve(common);
  auto dispatch = [&](auto fn32, auto fn64) { return rc.precision == "float64" ? fn64() : fn32(); };

  if (make->parsed()) return cmd_make_data(rc, size, mix, data_out);
  if (train->parsed()) {
    if (epochs) rc.stages[std::size_t(stage)].epochs = *epochs;
    if (max_steps) rc.stages[std::size_t(stage)].max_steps = *max_steps;
    rc.validate();
    return dispatch([&] { return cmd_train<float>(rc, stage, init_from); },
                    [&] { return cmd_train<double>(rc, stage, init_from); });
  }
  if (sample->parsed()) {
    if (steps) rc.sample_steps = *steps;
    if (guidance) rc.sample_guidance = *guidance;
    rc.validate();
    return dispatch([&] { return cmd_sample<float>(rc, ckpt, task); },
                    [&] { return cmd_sample<double>(rc, ckpt, task); });
  }
  if (samples) rc.analysis_samples = *samples;
  if (analysis_steps) rc.analysis.steps = *analysis_steps;
  if (no_pool) rc.analysis.pool_and_rank = false;
  if (keep_maps) rc.analysis.keep_maps = *keep_maps;
  return dispatch([&] { return cmd_analyze<float>(rc, ckpt, experiment); },
                  [&] { return cmd_analyze<double>(rc, ckpt, experiment); });
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
