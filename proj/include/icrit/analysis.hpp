#pragma once

#include <optional>
#include <string>
#include <vector>

#include "icrit/critic.hpp"
#include "icrit/spatial_map.hpp"
#include "icrit/trainer.hpp"

namespace icrit {

/// Mean over non-overlapping factor x factor cells.
SpatialMap pool(const SpatialMap& map, std::size_t factor);

/// Fractional ranks in [0, 1]; ties share their average rank; a constant map is all 0.5.
SpatialMap rank_normalize(const SpatialMap& map);

/// Tie-averaged ranks (0-based) of `values`.
std::vector<double> average_ranks(const std::vector<double>& values);

/// Pearson correlation of tie-averaged ranks. std::nullopt when either input is constant.
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);
std::optional<double> spearman(const SpatialMap& a, const SpatialMap& b);

/// m^(l): per-token squared error of a probe's velocity against v*, on the token grid.
template <class T>
SpatialMap probe_error_map(const Tensor<T>& probe_output, const Tensor<T>& v_star, const ModelConfig& config);

/// |a - b| elementwise.
SpatialMap abs_diff(const SpatialMap& a, const SpatialMap& b);

struct CorrelationReport {
  std::string experiment;
  int layer_a = 0;
  int layer_b = 0;
  int step = 0;  // 0 = averaged over steps
  std::vector<int> sample_ids;
  std::vector<std::optional<double>> rho;

  double median = 0;  // NaN when no sample is defined
  double p_positive = 0;
  double p_above_02 = 0;
  std::size_t defined = 0;
  std::size_t excluded = 0;

  void add(int sample_id, std::optional<double> value);
  /// Recomputes the summary statistics from `rho`.
  void summarize();
};

/// Median of a non-empty list (mean of the middle pair for even sizes).
double median(std::vector<double> values);

struct AnalysisOptions {
  int steps = 16;
  double guidance = 1.0;
  /// Denoising step whose state feeds experiments A-C (0 = ceil(0.95 * steps)).
  int analysis_step = 0;
  int layer_a = 4;
  int layer_b = 6;
  /// Layer whose critic prediction is E.
  int e_layer = 4;
  std::size_t pool_factor = 2;
  /// Pool and rank-normalize maps before correlating.
  bool pool_and_rank = true;
  std::uint64_t seed = 7;
  /// Keep this many per-sample map sets for dumping.
  std::size_t keep_maps = 0;

  int resolved_step() const;
  void validate(const ModelConfig& config) const;
};

struct NamedMap {
  int sample_id;
  std::string name;
  SpatialMap map;
};

struct MotivationResult {
  /// One report per (layer, step) and one per layer averaged over steps.
  std::vector<CorrelationReport> per_step;
  std::vector<CorrelationReport> averaged;
  std::vector<NamedMap> maps;

  const CorrelationReport& layer(int layer) const;
};

/// For each sample, every probed layer and the last layer drive their own Euler
/// sampler; at each step the error map of x0_hat = x_t - t v against the ground
/// truth is compared with the last layer's map at the same step.
template <class T>
MotivationResult motivation_study(const Model<T>& model, const std::vector<TokenTask<T>>& tasks,
                                  const AnalysisOptions& options);

struct ExperimentResult {
  CorrelationReport a, b, c;
  std::vector<NamedMap> maps;
};

/// Per-sample maps of one analysis state.
struct ExperimentMaps {
  SpatialMap e;      // critic prediction at e_layer
  SpatialMap y_a;    // |alpha^(a+1) - alpha^(a)|
  SpatialMap y_b;    // |m^(b) - m^(a)|
  SpatialMap y_c;    // |(m_un^(b) - m_un^(a)) - (m_ma^(b) - m_ma^(a))|
};

/// Maps for one task at the analysis state. The "un" run uses the model's native
/// critic mode; the "ma" run applies the isolation mask.
template <class T>
ExperimentMaps experiment_maps(const Model<T>& model, const TokenTask<T>& task, int sample_id,
                               const AnalysisOptions& options);

/// Spearman of (Y, E) after the optional pool + rank pipeline.
std::optional<double> correlate(const SpatialMap& y, const SpatialMap& e, const AnalysisOptions& options);

/// Experiments A, B and C over `tasks`.
template <class T>
ExperimentResult run_experiments(const Model<T>& model, const std::vector<TokenTask<T>>& tasks,
                                 const AnalysisOptions& options);

/// Per-sample Spearman between the critic prediction and its target e at
/// `layer`, on flow samples drawn as in training (Rng(seed).fork(i)).
template <class T>
CorrelationReport critic_calibration(const Model<T>& model, const std::vector<TokenTask<T>>& tasks, int layer,
                                     std::uint64_t seed, const TimeSampler& time = {});

/// Report CSV: header, per-sample rows, then summary rows (median, p_gt_0, p_gt_0.2, n, excluded).
std::string report_csv(const std::vector<CorrelationReport>& reports);
std::string report_csv_header();

}  // namespace icrit
