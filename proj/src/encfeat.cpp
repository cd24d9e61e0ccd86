#include "geolevels/encfeat.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>

namespace geolevels {

const char* to_string(EncoderSource source) { return source == EncoderSource::surrogate ? "surrogate" : "proxy"; }

EncoderSource encoder_source_from_string(const std::string& name) {
  if (name == "surrogate") return EncoderSource::surrogate;
  if (name == "proxy") return EncoderSource::proxy;
  throw ConfigError("unknown encoder source '" + name + "'");
}

void EncoderConfig::validate() const {
  if (epochs <= 0 || labeled_batch <= 0 || unlabeled_batch <= 0 || proxy_batch < 2)
    throw ConfigError("encoder epochs and batch sizes must be positive (proxy batch >= 2)");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(learning_rate > 0.0)) throw ConfigError("encoder learning rate must be positive");
}

// ---------------------------------------------------------------------------------------
// k-means

namespace {

/// Squared distances between every centroid (rows) and point (columns).
MatrixXd squared_distances(const MatrixXd& centroids, const Eigen::Ref<const MatrixXd>& points) {
  MatrixXd d = -2.0 * centroids.transpose() * points;
  d.colwise() += centroids.colwise().squaredNorm().transpose();
  d.rowwise() += points.colwise().squaredNorm();
  return d.cwiseMax(0.0);
}

/// Returns true if any assignment changed.
bool assign_points(const MatrixXd& centroids, const Eigen::Ref<const MatrixXd>& points, std::vector<int>& assignments) {
  const MatrixXd d = squared_distances(centroids, points);
  bool changed = false;
  for (Index i = 0; i < points.cols(); ++i) {
    Index best = 0;
    d.col(i).minCoeff(&best);
    if (assignments[std::size_t(i)] != int(best)) {
      assignments[std::size_t(i)] = int(best);
      changed = true;
    }
  }
  return changed;
}

double inertia_of(const MatrixXd& centroids, const Eigen::Ref<const MatrixXd>& points, const std::vector<int>& assignments) {
  double total = 0.0;
  for (Index i = 0; i < points.cols(); ++i)
    total += (points.col(i) - centroids.col(assignments[std::size_t(i)])).squaredNorm();
  return total;
}

/// Recomputes centroids as cluster means; returns the indices of empty clusters.
std::vector<int> update_centroids(MatrixXd& centroids, const Eigen::Ref<const MatrixXd>& points,
                                  const std::vector<int>& assignments) {
  const Index k = centroids.cols();
  MatrixXd sums = MatrixXd::Zero(points.rows(), k);
  std::vector<Index> counts(std::size_t(k), 0);
  for (Index i = 0; i < points.cols(); ++i) {
    sums.col(assignments[std::size_t(i)]) += points.col(i);
    ++counts[std::size_t(assignments[std::size_t(i)])];
  }
  std::vector<int> empty;
  for (Index j = 0; j < k; ++j) {
    if (counts[std::size_t(j)] == 0)
      empty.push_back(int(j));
    else
      centroids.col(j) = sums.col(j) / double(counts[std::size_t(j)]);
  }
  return empty;
}

void repair_empty(MatrixXd& centroids, const Eigen::Ref<const MatrixXd>& points, std::vector<int>& assignments,
                  const std::vector<int>& empty) {
  std::vector<bool> taken(std::size_t(points.cols()), false);
  for (int j : empty) {
    Index far = -1;
    double far_d = -1.0;
    for (Index i = 0; i < points.cols(); ++i) {
      if (taken[std::size_t(i)]) continue;
      const double d = (points.col(i) - centroids.col(assignments[std::size_t(i)])).squaredNorm();
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    taken[std::size_t(far)] = true;
    centroids.col(j) = points.col(far);
    assignments[std::size_t(far)] = j;
  }
}

MatrixXd kmeans_plus_plus(const Eigen::Ref<const MatrixXd>& points, int k, std::mt19937_64& rng) {
  const Index n = points.cols();
  MatrixXd centroids(points.rows(), k);
  std::uniform_int_distribution<Index> first(0, n - 1);
  centroids.col(0) = points.col(first(rng));
  VectorXd nearest = (points.colwise() - centroids.col(0)).colwise().squaredNorm().transpose();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int j = 1; j < k; ++j) {
    const double total = nearest.sum();
    Index pick = 0;
    if (total > 0.0) {
      double r = unit(rng) * total;
      for (pick = 0; pick < n - 1; ++pick) {
        r -= nearest[pick];
        if (r <= 0.0) break;
      }
    } else {
      pick = first(rng);
    }
    centroids.col(j) = points.col(pick);
    nearest = nearest.cwiseMin((points.colwise() - centroids.col(j)).colwise().squaredNorm().transpose());
  }
  return centroids;
}

}  // namespace

KmeansResult kmeans(const Eigen::Ref<const MatrixXd>& points, int k, std::uint64_t seed, int max_iterations) {
  if (k <= 0) throw ConfigError("kmeans: k must be positive");
  if (points.cols() < k)
    throw DataError("kmeans: " + std::to_string(points.cols()) + " points for k = " + std::to_string(k));
  std::mt19937_64 rng(seed);

  KmeansResult result;
  result.centroids = kmeans_plus_plus(points, k, rng);
  result.assignments.assign(std::size_t(points.cols()), -1);

  for (int it = 0; it < max_iterations; ++it) {
    const bool changed = assign_points(result.centroids, points, result.assignments);
    result.inertia_trace.push_back(inertia_of(result.centroids, points, result.assignments));
    result.iterations = it + 1;
    if (!changed && it > 0) {
      result.converged = true;
      break;
    }
    const auto empty = update_centroids(result.centroids, points, result.assignments);
    if (!empty.empty()) repair_empty(result.centroids, points, result.assignments, empty);
  }
  if (!result.converged) {
    assign_points(result.centroids, points, result.assignments);
    const auto empty = update_centroids(result.centroids, points, result.assignments);
    if (!empty.empty()) repair_empty(result.centroids, points, result.assignments, empty);
  }
  result.inertia = inertia_of(result.centroids, points, result.assignments);
  return result;
}

// ---------------------------------------------------------------------------------------
// Filtering and pseudo-labels

std::vector<Tile> filter_inhabited(const ScoreModel& model, std::span<const Tile> tiles) {
  std::vector<Tile> out;
  if (tiles.empty()) return out;
  const VectorXd scores = model.score_batch(feature_matrix(tiles));
  for (std::size_t i = 0; i < tiles.size(); ++i)
    if (scores[Index(i)] >= model.config.t1) out.push_back(tiles[i]);
  return out;
}

std::map<TileId, int> pseudo_labels(const Encoder& encoder, const ScoreModel& score_model, std::span<const Tile> tiles,
                                    int n_clusters, std::uint64_t seed) {
  if (n_clusters <= 0) throw ConfigError("pseudo_labels: n_c must be positive");
  std::map<TileId, int> out;
  if (tiles.empty()) throw DataError("pseudo_labels: no tiles");
  const MatrixXd x = feature_matrix(tiles);
  const VectorXd scores = score_model.score_batch(x);
  const MatrixXd embedded = encoder.embed_batch(x);

  for (int stratum = 0; stratum < 2; ++stratum) {
    std::vector<Index> members;
    for (Index i = 0; i < x.cols(); ++i) {
      const bool urban = scores[i] >= score_model.config.t2;
      if (urban == (stratum == 1)) members.push_back(i);
    }
    const char* name = stratum == 1 ? "urban" : "rural";
    if (Index(members.size()) < n_clusters)
      throw DataError(std::string("stratum-size error: ") + name + " stratum has " + std::to_string(members.size()) +
                      " tiles for n_c = " + std::to_string(n_clusters));
    const MatrixXd points = embedded(Eigen::all, members);
    const KmeansResult km = kmeans(points, n_clusters, derive_seed(seed, 11, std::uint64_t(stratum)));
    for (std::size_t m = 0; m < members.size(); ++m)
      out[tiles[std::size_t(members[m])].id] = km.assignments[m] + stratum * n_clusters;
  }
  return out;
}

// ---------------------------------------------------------------------------------------
// Losses

double cluster_loss(const MlpParams& body, const Eigen::Ref<const MatrixXd>& head,
                    const Eigen::Ref<const MatrixXd>& features, std::span<const int> labels, VectorXd* grad_body,
                    MatrixXd* grad_head) {
  const Index n = features.cols();
  if (n == 0) throw DataError("cluster_loss: empty batch");
  if (std::size_t(n) != labels.size()) throw ShapeError("cluster_loss: one pseudo-label per tile required");
  if (head.rows() != body.output_size()) throw ShapeError("cluster_loss: head does not match embedding size");

  MlpParams::Tape tape;
  const MatrixXd embedded = body.forward_batch(features, tape);
  const MatrixXd logits = head.transpose() * embedded;  // 2n_c x n
  MatrixXd d_logits(logits.rows(), n);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int label = labels[std::size_t(i)];
    if (label < 0 || label >= logits.rows()) throw DataError("cluster_loss: pseudo-label out of range");
    const double m = logits.col(i).maxCoeff();
    const VectorXd e = (logits.col(i).array() - m).exp();
    const double z = e.sum();
    total += -(logits(label, i) - m - std::log(z));
    d_logits.col(i) = e / z;
    d_logits(label, i) -= 1.0;
  }
  d_logits /= double(n);
  if (grad_head) *grad_head += embedded * d_logits.transpose();
  if (grad_body) {
    const MatrixXd d_embedded = head * d_logits;
    body.backward(tape, d_embedded, *grad_body);
  }
  return total / double(n);
}

double cluster_loss(const Encoder& encoder, std::span<const Tile> batch, const std::map<TileId, int>& pseudo) {
  if (encoder.n_clusters <= 0) throw ConfigError("cluster_loss: encoder has no cluster head");
  std::vector<int> labels;
  labels.reserve(batch.size());
  for (const Tile& t : batch) {
    const auto it = pseudo.find(t.id);
    if (it == pseudo.end()) throw DataError("cluster_loss: missing pseudo-label for tile " + std::to_string(t.id));
    labels.push_back(it->second);
  }
  return cluster_loss(encoder.body, encoder.cluster_head, feature_matrix(batch), labels, nullptr, nullptr);
}

double pearson_loss(std::span<const double> scores, std::span<const double> proxy, std::span<double> d_scores) {
  const std::size_t n = scores.size();
  if (n < 2 || proxy.size() != n) throw DataError("pearson_loss: need two equal-length batches of at least 2");
  if (!d_scores.empty() && d_scores.size() != n) throw ShapeError("pearson_loss: gradient buffer length");
  const Eigen::Map<const VectorXd> a(scores.data(), Index(n));
  const Eigen::Map<const VectorXd> b(proxy.data(), Index(n));
  const VectorXd ac = a.array() - a.mean();
  const VectorXd bc = b.array() - b.mean();
  const double saa = ac.squaredNorm();
  const double sbb = bc.squaredNorm();
  const auto degenerate = [](double ss, const VectorXd& v) {
    return !(ss > 1e-24 * std::max(1.0, v.squaredNorm()));
  };
  if (degenerate(saa, a) || degenerate(sbb, b)) throw DataError("pearson_loss: degenerate batch (zero variance)");
  const double sa = std::sqrt(saa);
  const double sb = std::sqrt(sbb);
  const double rho = ac.dot(bc) / (sa * sb);
  if (!d_scores.empty()) {
    const VectorXd grad = -(bc / (sa * sb) - rho * ac / saa);
    for (std::size_t i = 0; i < n; ++i) d_scores[i] = grad[Index(i)];
  }
  return -rho;
}

double pearson_loss(std::span<const double> scores, std::span<const double> proxy) {
  return pearson_loss(scores, proxy, std::span<double>{});
}

// ---------------------------------------------------------------------------------------
// Training

namespace {

enum class Supervision { ordinal, pearson };

/// Flat layout: [body | head | cluster head (column-major)].
struct MemberNetwork {
  MlpParams body;
  MlpParams head;
  MatrixXd cluster;

  Index size() const { return body.parameter_count() + head.parameter_count() + cluster.size(); }

  VectorXd flatten() const {
    VectorXd flat(size());
    flat << body.flatten(), head.flatten(), Eigen::Map<const VectorXd>(cluster.data(), cluster.size());
    return flat;
  }

  void assign(const VectorXd& flat) {
    const Index nb = body.parameter_count();
    const Index nh = head.parameter_count();
    body.assign(flat.segment(0, nb));
    head.assign(flat.segment(nb, nh));
    cluster = Eigen::Map<const MatrixXd>(flat.data() + nb + nh, cluster.rows(), cluster.cols());
  }
};

MlpParams head_of(const MlpParams& net) {
  const auto& sizes = net.layer_sizes();
  MlpParams head({sizes[sizes.size() - 2], sizes.back()}, net.activation(), false);
  head.layer(0) = net.layer(net.layer_count() - 1);
  return head;
}

MatrixXd glorot_matrix(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double limit = std::sqrt(6.0 / double(rows + cols));
  std::uniform_real_distribution<double> uni(-limit, limit);
  MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = uni(rng);
  return m;
}

/// Cycles through a shuffled index order, reshuffling whenever it is exhausted.
class BatchCycler {
 public:
  BatchCycler(Index n, std::uint64_t seed) : order_(std::size_t(n)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), Index(0));
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<Index> next(Index batch) {
    std::vector<Index> out;
    batch = std::min<Index>(batch, Index(order_.size()));
    while (Index(out.size()) < batch) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<Index> order_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

struct MemberJob {
  Supervision supervision = Supervision::ordinal;
  EncoderSource source = EncoderSource::surrogate;
  std::span<const Tile> supervised;
  std::span<const Tile> unlabeled;
  const ScoreModel* strata_model = nullptr;
  int n_clusters = 0;
  double lambda = 0.0;
};

Encoder train_member(const MemberJob& job, MemberNetwork net, std::uint64_t seed, const EncoderConfig& cfg,
                     EncoderTrainingTrace* trace, MlpParams* head_out) {
  cfg.validate();
  if (job.supervised.empty()) throw DataError("encoder training: empty supervised set");
  const bool clustering = job.n_clusters > 0 && job.lambda > 0.0;
  if (clustering && (job.unlabeled.empty() || !job.strata_model))
    throw DataError("encoder training: clustering needs unlabeled tiles and a score model");

  const MatrixXd xs = feature_matrix(job.supervised);
  MatrixXd ys;
  std::vector<double> proxy;
  OrdinalConfig ordinal;
  if (job.supervision == Supervision::ordinal) {
    ys = soft_label_matrix(job.supervised);
    ordinal = job.strata_model ? job.strata_model->config : OrdinalConfig{};
  } else {
    for (const Tile& t : job.supervised) proxy.push_back(t.proxy);
  }
  const MatrixXd xu = job.unlabeled.empty() ? MatrixXd() : feature_matrix(job.unlabeled);

  Index steps_per_epoch = 0;
  Index supervised_batch = 0;
  if (job.supervision == Supervision::ordinal) {
    supervised_batch = cfg.labeled_batch;
    steps_per_epoch = job.unlabeled.empty() ? (xs.cols() + cfg.labeled_batch - 1) / cfg.labeled_batch
                                            : (xu.cols() + cfg.unlabeled_batch - 1) / cfg.unlabeled_batch;
  } else {
    supervised_batch = cfg.proxy_batch;
    steps_per_epoch = (xs.cols() + cfg.proxy_batch - 1) / cfg.proxy_batch;
  }

  if (clustering) net.cluster = MatrixXd::Zero(net.body.output_size(), 2 * job.n_clusters);
  VectorXd params = net.flatten();
  OptimizerState state(params.size(), AdamOptions{.learning_rate = cfg.learning_rate});
  const Index nb = net.body.parameter_count();
  const Index nh = net.head.parameter_count();

  BatchCycler supervised_cycle(xs.cols(), derive_seed(seed, 21));
  std::unique_ptr<BatchCycler> unlabeled_cycle;
  if (clustering) unlabeled_cycle = std::make_unique<BatchCycler>(xu.cols(), derive_seed(seed, 22));

  VectorXd grad(params.size());
  VectorXd grad_body(nb), grad_head(nh);
  MatrixXd grad_cluster;
  std::vector<int> pseudo;
  long useful_steps = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (clustering) {
      Encoder current{net.body, MatrixXd(), 0, job.source};
      const auto labels = pseudo_labels(current, *job.strata_model, job.unlabeled, job.n_clusters,
                                        derive_seed(seed, 23, std::uint64_t(epoch)));
      pseudo.clear();
      for (const Tile& t : job.unlabeled) pseudo.push_back(labels.at(t.id));
      net.cluster = glorot_matrix(net.body.output_size(), 2 * job.n_clusters, derive_seed(seed, 24, std::uint64_t(epoch)));
      params = net.flatten();
      state.first_moment.tail(net.cluster.size()).setZero();
      state.second_moment.tail(net.cluster.size()).setZero();
    }

    double sup_sum = 0.0, clu_sum = 0.0;
    long sup_count = 0, clu_count = 0;
    for (Index step = 0; step < steps_per_epoch; ++step) {
      grad_body.setZero();
      grad_head.setZero();
      double loss = 0.0;
      bool contributed = false;

      const std::vector<Index> idx = supervised_cycle.next(supervised_batch);
      const MatrixXd xb = xs(Eigen::all, idx);
      MlpParams::Tape body_tape, head_tape;
      const MatrixXd embedded = net.body.forward_batch(xb, body_tape);
      const MatrixXd raw = net.head.forward_batch(embedded, head_tape);
      MatrixXd d_raw = MatrixXd::Zero(1, raw.cols());
      if (job.supervision == Supervision::ordinal) {
        std::vector<double> scores(idx.size()), d_scores(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) scores[i] = clamp_score(raw(0, Index(i)), ordinal);
        const double l = class_loss(scores, ys(Eigen::all, idx), ordinal, d_scores);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const double r = raw(0, Index(i));
          d_raw(0, Index(i)) = (r > ordinal.t_min && r < ordinal.t_max) ? d_scores[i] : 0.0;
        }
        loss += l;
        sup_sum += l;
        ++sup_count;
        contributed = true;
      } else {
        std::vector<double> scores(idx.size()), target(idx.size()), d_scores(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          scores[i] = raw(0, Index(i));
          target[i] = proxy[std::size_t(idx[i])];
        }
        try {
          const double l = pearson_loss(scores, target, d_scores);
          for (std::size_t i = 0; i < idx.size(); ++i) d_raw(0, Index(i)) = d_scores[i];
          loss += l;
          sup_sum += l;
          ++sup_count;
          contributed = true;
        } catch (const DataError&) {
          // degenerate batch: no supervised signal this step
        }
      }
      const MatrixXd d_embedded = net.head.backward(head_tape, d_raw, grad_head);
      net.body.backward(body_tape, d_embedded, grad_body);

      grad_cluster = MatrixXd::Zero(net.cluster.rows(), net.cluster.cols());
      if (clustering) {
        const std::vector<Index> uidx = unlabeled_cycle->next(cfg.unlabeled_batch);
        std::vector<int> labels;
        for (Index u : uidx) labels.push_back(pseudo[std::size_t(u)]);
        VectorXd gb = VectorXd::Zero(nb);
        MatrixXd gc = MatrixXd::Zero(net.cluster.rows(), net.cluster.cols());
        const double l = cluster_loss(net.body, net.cluster, xu(Eigen::all, uidx), labels, &gb, &gc);
        grad_body += job.lambda * gb;
        grad_cluster = job.lambda * gc;
        loss += job.lambda * l;
        clu_sum += l;
        ++clu_count;
        contributed = true;
      }
      if (!contributed) continue;

      grad << grad_body, grad_head, Eigen::Map<const VectorXd>(grad_cluster.data(), grad_cluster.size());
      adam_step(params, grad, loss, state);
      net.assign(params);
      ++useful_steps;
    }
    if (trace) {
      trace->supervised_loss.push_back(sup_count ? sup_sum / double(sup_count) : std::nan(""));
      if (clustering) trace->cluster_loss.push_back(clu_sum / double(clu_count));
    }
  }
  if (useful_steps == 0) throw DataError("encoder training: every batch was degenerate");

  Encoder out;
  out.body = net.body;
  out.n_clusters = job.n_clusters;
  out.source = job.source;
  if (job.n_clusters > 0)
    out.cluster_head = clustering ? net.cluster : MatrixXd::Zero(net.body.output_size(), 2 * job.n_clusters);
  if (head_out) *head_out = net.head;
  return out;
}

}  // namespace

Encoder train_encoder(std::span<const Tile> labeled, std::span<const Tile> unlabeled, const ScoreModel& score_model,
                      int n_clusters, double lambda, std::uint64_t seed, const EncoderConfig& cfg,
                      EncoderTrainingTrace* trace) {
  if (n_clusters < 0) throw ConfigError("n_c must be non-negative");
  MemberJob job;
  job.supervision = Supervision::ordinal;
  job.source = EncoderSource::surrogate;
  job.supervised = labeled;
  job.unlabeled = unlabeled;
  job.strata_model = &score_model;
  job.n_clusters = n_clusters;
  job.lambda = lambda;
  MemberNetwork net{score_model.net.body(), head_of(score_model.net), MatrixXd()};
  return train_member(job, std::move(net), seed, cfg, trace, nullptr);
}

Encoder train_proxy_encoder(std::span<const Tile> tiles, std::uint64_t seed, const EncoderConfig& cfg,
                            const ScoreModel* init, int n_clusters, const NetworkShape& shape,
                            EncoderTrainingTrace* trace, MlpParams* head_out) {
  if (n_clusters < 0) throw ConfigError("n_c must be non-negative");
  if (tiles.empty()) throw DataError("train_proxy_encoder: no tiles");
  const bool clustering = n_clusters > 0 && cfg.proxy_cluster_loss && cfg.lambda > 0.0;
  if (n_clusters > 0 && !init) throw ConfigError("train_proxy_encoder: clustering needs a score model");

  MemberNetwork net;
  if (init) {
    net.body = init->net.body();
    net.head = head_of(init->net);
  } else {
    std::vector<int> sizes{int(tiles.front().features.size())};
    sizes.insert(sizes.end(), shape.hidden.begin(), shape.hidden.end());
    sizes.push_back(1);
    const MlpParams full = MlpParams::glorot(sizes, shape.activation, derive_seed(seed, 25));
    net.body = full.body();
    net.head = head_of(full);
  }

  std::vector<Tile> inhabited;
  if (clustering) inhabited = filter_inhabited(*init, tiles);

  MemberJob job;
  job.supervision = Supervision::pearson;
  job.source = EncoderSource::proxy;
  job.supervised = tiles;
  job.unlabeled = inhabited;
  job.strata_model = init;
  job.n_clusters = n_clusters;
  job.lambda = clustering ? cfg.lambda : 0.0;
  Encoder enc = train_member(job, std::move(net), seed, cfg, trace, head_out);
  enc.n_clusters = n_clusters;
  if (n_clusters > 0 && enc.cluster_head.size() == 0)
    enc.cluster_head = MatrixXd::Zero(enc.body.output_size(), 2 * n_clusters);
  return enc;
}

}  // namespace geolevels
