#pragma once

#include "geolevels/scaling.hpp"
#include "geolevels/synthworld.hpp"

#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace geolevels {

// ---------------------------------------------------------------------------------------
// Metrics

/// 1 - SS_res / SS_tot. Throws DataError when the truth has zero variance.
double r_squared(std::span<const double> truth, std::span<const double> pred);

enum class CorrelationKind { pearson, spearman };

const char* to_string(CorrelationKind kind);

/// Fractional ranks starting at 1; ties share the average of their positions.
std::vector<double> average_ranks(std::span<const double> values);

/// Sample Pearson correlation, or Pearson of average ranks for spearman.
double correlation(std::span<const double> a, std::span<const double> b, CorrelationKind kind);

/// Mean absolute pairwise difference over twice the mean, via the sorted O(n log n) form.
/// Values must be non-negative with a positive sum.
double gini(std::span<const double> values);

struct ZipfFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;  // of the log-log least-squares line
  std::vector<double> log_rank;
  std::vector<double> log_value;
};

/// Keeps the largest ceil(top_quantile * n) values, ranks them 1..k in descending order
/// and regresses ln(value) on ln(rank).
ZipfFit zipf_fit(std::span<const double> values, double top_quantile);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
};

Summary summarize_values(std::span<const double> values);

// ---------------------------------------------------------------------------------------
// Split-repetition evaluation

struct DistrictSplit {
  std::vector<DistrictId> train;
  std::vector<DistrictId> test;
};

/// Seeded shuffle of `ids`; the first round(train_fraction * n) go to training.
DistrictSplit split_districts(std::span<const DistrictId> ids, double train_fraction, std::uint64_t seed);

struct EvalOptions {
  int repetitions = 100;
  double train_fraction = 0.8;
  /// Train Step 1 and Step 2 once and reuse them for every repetition. The forest and the
  /// augmentation are refit per split either way.
  bool share_stages = true;
};

struct RepetitionResult {
  int repetition = 0;
  double r2 = 0.0;
  std::size_t train_districts = 0;
  std::size_t test_districts = 0;
  std::size_t guarded_targets = 0;
};

struct EvalReport {
  std::vector<RepetitionResult> repetitions;
  Summary r2;
  std::string fingerprint;
  std::size_t guarded_targets = 0;  // summed over repetitions

  std::vector<double> r2_values() const;
};

/// Predictions for the test districts of one repetition.
using SplitPredictor = std::function<std::vector<double>(const DistrictSplit& split, int repetition)>;

/// Runs the split protocol around an arbitrary predictor. Splits use derive_seed(seed, 41, rep).
EvalReport evaluate_predictor(const World& world, const std::string& indicator, const SplitPredictor& predictor,
                              const EvalOptions& options, std::uint64_t seed);

/// Repeated-split evaluation of the multi-level pipeline. `stages`, when given, replaces the
/// shared Step 1/Step 2 models (it must come from the same world).
EvalReport evaluate(const World& world, const std::string& indicator, const PipelineConfig& config,
                    const EvalOptions& options, std::uint64_t seed, const StageModels* stages = nullptr);

/// Stage models `evaluate` trains when sharing is on.
StageModels shared_stages(const World& world, const PipelineConfig& config, std::uint64_t seed);

struct CurvePoint {
  double train_fraction = 0.0;
  EvalReport report;
};

/// evaluate() at each training fraction with augmentation switched on or off. Each fraction
/// must leave at least 5 training districts and 2 test districts.
std::vector<CurvePoint> robustness_curve(const World& world, const std::string& indicator,
                                         const PipelineConfig& config, std::span<const double> train_fractions,
                                         bool with_augmentation, int repetitions, std::uint64_t seed,
                                         const StageModels* stages = nullptr);

// ---------------------------------------------------------------------------------------
// Transfer

/// Spearman between a trained model's predictions on every target district and the truth.
double transfer_spearman(const MultiLevelModel& model, const World& target, const std::string& indicator);

/// Trains on all source districts and scores every target district.
double transfer_eval(const World& source, const World& target, const std::string& indicator,
                     const PipelineConfig& config, std::uint64_t seed);

/// Row s, column t: model trained on worlds[s], evaluated on worlds[t]. One model per row.
MatrixXd transfer_grid(std::span<const World> worlds, const std::string& indicator, const PipelineConfig& config,
                       std::uint64_t seed);

// ---------------------------------------------------------------------------------------
// Hyperlocal level and inequality

struct TileLevelValues {
  std::vector<TileId> tiles;
  std::vector<double> truth;     // max(0, s*) m*
  std::vector<double> original;  // f(d)
  std::vector<double> adjusted;  // f(d) exp(h(r_i))
  std::map<DistrictId, double> log_factor;
};

/// Original and adjusted tile scores for the tiles of `districts` (all districts if empty).
TileLevelValues tile_level_values(const World& world, const MultiLevelModel& model,
                                  std::span<const DistrictId> districts = {});

struct HyperlocalReport {
  double pearson_original = 0.0;
  double pearson_adjusted = 0.0;
  double spearman_original = 0.0;
  double spearman_adjusted = 0.0;
};

HyperlocalReport hyperlocal_eval(const World& world, const MultiLevelModel& model,
                                 std::span<const DistrictId> districts = {});

struct InequalityOptions {
  /// Replicate each district's factor once per tile for the factor-only national Gini,
  /// instead of one observation per district.
  bool tile_replicated_factors = false;
};

struct InequalityReport {
  std::map<DistrictId, double> district_gini;  // over max(0, f(d)) within each district
  double national_original = 0.0;              // over max(0, f(d)) for all tiles
  double national_factor = 0.0;                // over exp(h(r_i))
  double national_adjusted = 0.0;              // over max(0, f(d)) exp(h(r_i))
};

InequalityReport inequality_eval(const World& world, const MultiLevelModel& model,
                                 const InequalityOptions& options = {});

struct OracleInequality {
  std::map<DistrictId, double> district_gini;  // over max(0, s*) within each district
  double national = 0.0;                       // over max(0, s*) m* for all tiles
};

OracleInequality oracle_inequality(const World& world);

}  // namespace geolevels
