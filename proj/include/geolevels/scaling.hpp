#pragma once

#include "geolevels/districtrep.hpp"
#include "geolevels/encfeat.hpp"
#include "geolevels/hyperlocal.hpp"
#include "geolevels/synthworld.hpp"

#include <span>
#include <string>
#include <vector>

namespace geolevels {

// ---------------------------------------------------------------------------------------
// District augmentation

enum class AugmentMode { sum, tile_weighted_mean };

struct LabeledDistrict {
  District district;
  double label = 0.0;
};

struct AugmentedEntry {
  District district;
  double label = 0.0;
  bool original = true;
  DistrictId left = -1;  // source districts of a union
  DistrictId right = -1;
};

struct AugmentedSet {
  std::vector<AugmentedEntry> entries;
  std::size_t original_count = 0;
};

/// All originals followed by one union per unordered pair (i < j), in lexicographic pair
/// order. `max_pairs` > 0 keeps a seeded uniform subset of the pairs instead.
/// Union districts get ids after the largest original id.
AugmentedSet augment_districts(std::span<const LabeledDistrict> districts, AugmentMode mode,
                               std::size_t max_pairs = 0, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------------------
// Log-ratio targets

struct ScalingTarget {
  double value = 0.0;
  bool guarded = false;  // the multiplier was <= eps and was replaced by eps
};

/// ln(label / max(multiplier, eps)).
ScalingTarget scaling_target(double label, double multiplier, double eps);
ScalingTarget scaling_target(const District& district, double label, const ScoreModel& score_model,
                             const World& world, double eps);

// ---------------------------------------------------------------------------------------
// Random forest

struct ForestConfig {
  int n_trees = 200;
  int max_depth = 0;  // 0: unbounded
  int min_leaf = 2;
  double feature_fraction = 1.0 / 3.0;
  bool bootstrap = true;

  void validate() const;
  friend bool operator==(const ForestConfig&, const ForestConfig&) = default;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
};

/// CART regression tree; samples with x[feature] <= threshold go left.
struct RegressionTree {
  std::vector<TreeNode> nodes;

  double predict(const Eigen::Ref<const VectorXd>& x) const;
};

struct RegressionForest {
  std::vector<RegressionTree> trees;
  std::vector<std::uint64_t> tree_seeds;
  ForestConfig config;
  int input_dim = 0;
};

/// Inputs are columns. Each tree fits a bootstrap resample with per-split feature
/// subsampling and sum-of-squares splits. Trees are fit on GEOLEVELS_THREADS threads.
RegressionForest fit_forest(const Eigen::Ref<const MatrixXd>& inputs, std::span<const double> targets,
                            const ForestConfig& cfg, std::uint64_t seed);
RegressionForest fit_forest(std::span<const DistrictRepresentation> inputs, std::span<const double> targets,
                            const ForestConfig& cfg, std::uint64_t seed);

double forest_predict(const RegressionForest& forest, const Eigen::Ref<const VectorXd>& input);
double forest_predict(const RegressionForest& forest, const DistrictRepresentation& input);

// ---------------------------------------------------------------------------------------
// Multi-level model and pipeline

struct MemberSpec {
  EncoderSource source = EncoderSource::surrogate;
  int n_clusters = 0;
  friend bool operator==(const MemberSpec&, const MemberSpec&) = default;
};

struct Ablations {
  bool no_ensemble = false;    // single surrogate n_c = 30 member
  bool no_finetune = false;    // encoders are the untouched score-model body
  bool no_hyperlocal = false;  // tile count replaces the score sum
  friend bool operator==(const Ablations&, const Ablations&) = default;
};

struct PipelineConfig {
  int n_labels = 1000;
  OrdinalConfig ordinal;
  NetworkShape shape;
  EncoderConfig encoder;
  std::vector<MemberSpec> members{{EncoderSource::surrogate, 0}, {EncoderSource::surrogate, 30},
                                  {EncoderSource::surrogate, 90}, {EncoderSource::proxy, 0},
                                  {EncoderSource::proxy, 30},     {EncoderSource::proxy, 90}};
  int pca_components = 3;
  ForestConfig forest;
  bool augment = true;
  std::size_t max_pairs = 0;
  double eps = 1e-6;
  Ablations ablations;

  /// Ensemble after applying the no_ensemble switch.
  std::vector<MemberSpec> effective_members() const;
  void validate() const;
  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

/// y_i = multiplier(D_i) * exp(h(r_i)); the multiplier is the hyperlocal score sum, or the
/// tile count when `hyperlocal` is false.
struct MultiLevelModel {
  ScoreModel score_model;
  std::vector<EnsembleMember> members;
  RegressionForest forest;
  double eps = 1e-6;
  bool hyperlocal = true;

  int representation_length() const { return forest.input_dim; }
};

/// Step 1 and Step 2 encoders; independent of district labels.
struct StageModels {
  ScoreModel score_model;
  std::vector<Encoder> encoders;
};

struct ScalingReport {
  std::size_t training_entries = 0;
  std::size_t guarded_targets = 0;
  std::vector<double> explained_variance;  // per member, cumulative ratio of the kept components
};

StageModels train_stages(const World& world, const PipelineConfig& config, std::uint64_t seed);

/// Per-tile values summed into the last representation coordinate.
VectorXd tile_multipliers(const MultiLevelModel& model, std::span<const Tile> tiles);

/// PCA per member on inhabited training tiles, augmentation, targets, forest.
MultiLevelModel fit_scaling(const World& world, const StageModels& stages, std::span<const DistrictId> train_ids,
                            const std::string& indicator, const PipelineConfig& config, std::uint64_t seed,
                            ScalingReport* report = nullptr);

MultiLevelModel train_pipeline(const World& world, const std::string& indicator, const PipelineConfig& config,
                               std::uint64_t seed, std::span<const DistrictId> train_ids,
                               ScalingReport* report = nullptr);

DistrictRepresentation district_representation(const MultiLevelModel& model, const District& district,
                                               const World& world);

/// h(r_i): the log district scaling factor.
double district_log_factor(const MultiLevelModel& model, const District& district, const World& world);

double predict_district(const MultiLevelModel& model, const District& district, const World& world);

/// Predictions for many districts at once (embeddings computed once per tile).
std::vector<double> predict_districts(const MultiLevelModel& model, std::span<const DistrictId> ids,
                                      const World& world, std::vector<double>* log_factors = nullptr);

}  // namespace geolevels
