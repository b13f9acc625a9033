#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "icrit/analysis.hpp"
#include "icrit/model_config.hpp"
#include "icrit/taskgen.hpp"
#include "icrit/trainer.hpp"

namespace icrit {

/// Everything a CLI run needs. Serialized as JSON; see docs/config.md.
struct RunConfig {
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string precision = "float32";  // or "float64"
  unsigned threads = 0;                // 0 = all hardware threads
  std::string output_dir = "out";
  std::string data;
  /// Trailing fraction of the dataset held out for evaluation and analysis.
  double heldout_fraction = 0.1;
  ModelConfig model;

  // make-data
  std::size_t data_size = 5000;
  KindMix mix = default_mix();

  std::array<StageConfig, 4> stages{StageConfig::toy(0), StageConfig::toy(1), StageConfig::toy(2),
                                    StageConfig::toy(3)};
  /// Stages whose seed was given explicitly; others derive theirs from `seed`.
  std::array<bool, 4> stage_seed_set{};

  AnalysisOptions analysis;
  std::size_t analysis_samples = 100;

  int sample_steps = 40;
  double sample_guidance = 1.0;

  /// Resolved stage config (seed folded in).
  StageConfig stage(int n) const;
  void validate() const;
};

/// Parses a JSON document over the defaults. Unknown keys are ConfigErrors.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_json(const RunConfig& config);

}  // namespace icrit
