#pragma once

#include "geolevels/neural.hpp"
#include "geolevels/synthworld.hpp"

#include <map>
#include <span>
#include <vector>

namespace geolevels {

struct OrdinalConfig {
  double t1 = 0.0;
  double t2 = 10.0;
  double t_min = -10.0;
  double t_max = 20.0;
  int epochs = 100;
  int batch_size = 50;
  double learning_rate = 1e-4;

  void validate() const;
  friend bool operator==(const OrdinalConfig&, const OrdinalConfig&) = default;
};

/// Backbone shape shared by the score model and encoders.
struct NetworkShape {
  std::vector<int> hidden{32, 32};
  Activation activation = Activation::tanh;
  friend bool operator==(const NetworkShape&, const NetworkShape&) = default;
};

/// f_theta: MLP with a scalar head whose output is clamped to [t_min, t_max].
struct ScoreModel {
  MlpParams net;
  OrdinalConfig config;

  double score(const Eigen::Ref<const VectorXd>& features) const;
  /// Clamped scores of a column-wise feature batch.
  VectorXd score_batch(const Eigen::Ref<const MatrixXd>& features) const;
};

double clamp_score(double raw, const OrdinalConfig& cfg);

/// [t1 - s, min(s - t1, t2 - s), s - t2]
Eigen::Vector3d ordinal_logits(double score, const OrdinalConfig& cfg);

/// Half-open thresholds: uninhabited below t1, rural in [t1, t2), urban from t2.
LandClass classify_score(double score, const OrdinalConfig& cfg);

/// Mean soft-label cross entropy against LogSoftmax of the ordinal logits.
/// `labels` is 3 x n, one simplex column per score.
double class_loss(std::span<const double> scores, const Eigen::Ref<const MatrixXd>& labels, const OrdinalConfig& cfg);

/// Same loss; also writes dLoss/dscore into `d_scores` (length n).
double class_loss(std::span<const double> scores, const Eigen::Ref<const MatrixXd>& labels, const OrdinalConfig& cfg,
                  std::span<double> d_scores);

/// Column-wise features and 3 x n soft labels of a labeled tile set.
MatrixXd feature_matrix(std::span<const Tile> tiles);
MatrixXd soft_label_matrix(std::span<const Tile> tiles);

/// Loss of the clamped network on a batch, with gradient w.r.t. the flat network parameters.
/// Outside [t_min, t_max] the clamp passes zero gradient.
double score_model_loss(const MlpParams& net, const Eigen::Ref<const MatrixXd>& features,
                        const Eigen::Ref<const MatrixXd>& labels, const OrdinalConfig& cfg, VectorXd* grad);

struct ScoreTrainingTrace {
  std::vector<double> epoch_loss;  // full-set class loss after each epoch
};

ScoreModel train_score_model(std::span<const Tile> labeled, const OrdinalConfig& cfg, std::uint64_t seed,
                             const NetworkShape& shape = {}, ScoreTrainingTrace* trace = nullptr);

std::map<TileId, double> score_tiles(const ScoreModel& model, std::span<const Tile> tiles);

}  // namespace geolevels
