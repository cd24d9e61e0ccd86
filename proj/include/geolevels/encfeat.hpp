#pragma once

#include "geolevels/hyperlocal.hpp"
#include "geolevels/neural.hpp"
#include "geolevels/synthworld.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace geolevels {

enum class EncoderSource { surrogate, proxy };

const char* to_string(EncoderSource source);
EncoderSource encoder_source_from_string(const std::string& name);

/// Tile feature extractor e_psi. The body is a score network without its head, so the
/// embedding is the last hidden activation. The cluster head maps embeddings to 2 n_c
/// pseudo-class logits (logits = cluster_head^T e).
struct Encoder {
  MlpParams body;
  MatrixXd cluster_head;  // embedding_dim x 2 n_c; empty when n_c == 0
  int n_clusters = 0;
  EncoderSource source = EncoderSource::surrogate;

  int embedding_dim() const { return body.output_size(); }
  VectorXd embed(const Eigen::Ref<const VectorXd>& features) const { return body.forward(features); }
  MatrixXd embed_batch(const Eigen::Ref<const MatrixXd>& features) const { return body.forward_batch(features); }
};

struct KmeansResult {
  MatrixXd centroids;            // dim x k
  std::vector<int> assignments;  // per point
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // after each assignment step
  int iterations = 0;
  bool converged = false;
};

/// Lloyd's algorithm with k-means++ seeding. Points are columns. Stops at an assignment
/// fixpoint or after `max_iterations`. A cluster left empty is reseeded at the point
/// farthest from its current centroid.
KmeansResult kmeans(const Eigen::Ref<const MatrixXd>& points, int k, std::uint64_t seed, int max_iterations = 300);

/// Tiles whose score is at least t1.
std::vector<Tile> filter_inhabited(const ScoreModel& model, std::span<const Tile> tiles);

/// Stratified pseudo-labels: rural tiles (score < t2) cluster into 0..n_c-1 and urban tiles
/// (score >= t2) into n_c..2n_c-1, each by k-means over encoder embeddings.
std::map<TileId, int> pseudo_labels(const Encoder& encoder, const ScoreModel& score_model, std::span<const Tile> tiles,
                                    int n_clusters, std::uint64_t seed);

/// Mean cross entropy of cluster_head^T e(d) against one-hot pseudo-labels.
double cluster_loss(const Encoder& encoder, std::span<const Tile> batch, const std::map<TileId, int>& pseudo);

/// Matrix form used in training. Gradients (if requested) are accumulated.
double cluster_loss(const MlpParams& body, const Eigen::Ref<const MatrixXd>& head,
                    const Eigen::Ref<const MatrixXd>& features, std::span<const int> labels, VectorXd* grad_body,
                    MatrixXd* grad_head);

/// -rho(scores, proxy). Throws DataError when either side has zero variance.
double pearson_loss(std::span<const double> scores, std::span<const double> proxy);
double pearson_loss(std::span<const double> scores, std::span<const double> proxy, std::span<double> d_scores);

struct EncoderConfig {
  int epochs = 5;
  int labeled_batch = 40;
  int unlabeled_batch = 256;
  int proxy_batch = 256;
  double lambda = 1.0;
  double learning_rate = 1e-3;
  /// Whether proxy-source members with n_c > 0 also carry the clustering loss.
  bool proxy_cluster_loss = true;

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct EncoderTrainingTrace {
  std::vector<double> supervised_loss;  // per-epoch mean of L_class or the Pearson loss
  std::vector<double> cluster_loss;     // per-epoch mean of L_cluster (empty when inactive)
};

/// Multi-task encoder training: L_class on labeled batches plus lambda * L_cluster on
/// unlabeled batches, pseudo-labels refreshed (and the cluster head reinitialized) each epoch.
/// The body starts from the score model without its head. An epoch is one pass over the
/// unlabeled set (or over the labeled set when the unlabeled set is empty).
Encoder train_encoder(std::span<const Tile> labeled, std::span<const Tile> unlabeled, const ScoreModel& score_model,
                      int n_clusters, double lambda, std::uint64_t seed, const EncoderConfig& cfg = {},
                      EncoderTrainingTrace* trace = nullptr);

/// Encoder plus scalar head trained to maximize per-batch Pearson correlation between head
/// output and proxy intensity. Starts from `init`'s body and head when given, otherwise from
/// a fresh network of `shape`. With n_clusters > 0 (requires `init`) the clustering loss over
/// inhabited tiles is added as in train_encoder.
Encoder train_proxy_encoder(std::span<const Tile> tiles, std::uint64_t seed, const EncoderConfig& cfg = {},
                            const ScoreModel* init = nullptr, int n_clusters = 0, const NetworkShape& shape = {},
                            EncoderTrainingTrace* trace = nullptr, MlpParams* head_out = nullptr);

}  // namespace geolevels
