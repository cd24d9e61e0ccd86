#include "geolevels/hyperlocal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace geolevels {

void OrdinalConfig::validate() const {
  if (!(t_min < t1 && t1 < t2 && t2 < t_max)) throw ConfigError("ordinal thresholds must satisfy t_min < t1 < t2 < t_max");
  if (epochs <= 0 || batch_size <= 0) throw ConfigError("epochs and batch size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
}

double clamp_score(double raw, const OrdinalConfig& cfg) { return std::min(std::max(raw, cfg.t_min), cfg.t_max); }

Eigen::Vector3d ordinal_logits(double s, const OrdinalConfig& cfg) {
  return {cfg.t1 - s, std::min(s - cfg.t1, cfg.t2 - s), s - cfg.t2};
}

LandClass classify_score(double s, const OrdinalConfig& cfg) {
  if (s < cfg.t1) return LandClass::uninhabited;
  if (s < cfg.t2) return LandClass::rural;
  return LandClass::urban;
}

double ScoreModel::score(const Eigen::Ref<const VectorXd>& features) const {
  return clamp_score(net.forward(features)[0], config);
}

VectorXd ScoreModel::score_batch(const Eigen::Ref<const MatrixXd>& features) const {
  VectorXd raw = net.forward_batch(features).row(0).transpose();
  return raw.unaryExpr([this](double r) { return clamp_score(r, config); });
}

namespace {

double logsumexp(const Eigen::Vector3d& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

double class_loss(std::span<const double> scores, const Eigen::Ref<const MatrixXd>& labels, const OrdinalConfig& cfg,
                  std::span<double> d_scores) {
  const std::size_t n = scores.size();
  if (n == 0) throw DataError("class_loss: empty batch");
  if (labels.rows() != 3 || std::size_t(labels.cols()) != n) throw ShapeError("class_loss: labels must be 3 x n");
  if (!d_scores.empty() && d_scores.size() != n) throw ShapeError("class_loss: gradient buffer length");

  const double mid = 0.5 * (cfg.t1 + cfg.t2);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d logits = ordinal_logits(scores[i], cfg);
    const double lse = logsumexp(logits);
    const Eigen::Vector3d y = labels.col(Index(i));
    total -= y.dot(logits.array().matrix() - Eigen::Vector3d::Constant(lse));
    if (!d_scores.empty()) {
      const Eigen::Vector3d softmax = (logits.array() - lse).exp();
      const Eigen::Vector3d d_logits = softmax * y.sum() - y;
      const Eigen::Vector3d slope(-1.0, scores[i] < mid ? 1.0 : -1.0, 1.0);
      d_scores[i] = d_logits.dot(slope) / double(n);
    }
  }
  return total / double(n);
}

double class_loss(std::span<const double> scores, const Eigen::Ref<const MatrixXd>& labels, const OrdinalConfig& cfg) {
  return class_loss(scores, labels, cfg, std::span<double>{});
}

MatrixXd feature_matrix(std::span<const Tile> tiles) {
  if (tiles.empty()) return MatrixXd();
  MatrixXd x(tiles.front().features.size(), Index(tiles.size()));
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (tiles[i].features.size() != x.rows()) throw ShapeError("tiles do not share one feature dimension");
    x.col(Index(i)) = tiles[i].features;
  }
  return x;
}

MatrixXd soft_label_matrix(std::span<const Tile> tiles) {
  MatrixXd y(3, Index(tiles.size()));
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (!tiles[i].soft_label) throw DataError("tile " + std::to_string(tiles[i].id) + " has no soft label");
    y.col(Index(i)) = *tiles[i].soft_label;
  }
  return y;
}

double score_model_loss(const MlpParams& net, const Eigen::Ref<const MatrixXd>& features,
                        const Eigen::Ref<const MatrixXd>& labels, const OrdinalConfig& cfg, VectorXd* grad) {
  MlpParams::Tape tape;
  const MatrixXd raw = net.forward_batch(features, tape);
  const Index n = raw.cols();
  std::vector<double> scores(static_cast<std::size_t>(n)), d_scores(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) scores[std::size_t(i)] = clamp_score(raw(0, i), cfg);
  if (!grad) return class_loss(scores, labels, cfg);

  const double loss = class_loss(scores, labels, cfg, d_scores);
  MatrixXd d_raw(1, n);
  for (Index i = 0; i < n; ++i) {
    const bool inside = raw(0, i) > cfg.t_min && raw(0, i) < cfg.t_max;
    d_raw(0, i) = inside ? d_scores[std::size_t(i)] : 0.0;
  }
  net.backward(tape, d_raw, *grad);
  return loss;
}

ScoreModel train_score_model(std::span<const Tile> labeled, const OrdinalConfig& cfg, std::uint64_t seed,
                             const NetworkShape& shape, ScoreTrainingTrace* trace) {
  cfg.validate();
  if (labeled.empty()) throw DataError("train_score_model: empty labeled set");
  const MatrixXd x = feature_matrix(labeled);
  const MatrixXd y = soft_label_matrix(labeled);

  std::vector<int> sizes{int(x.rows())};
  sizes.insert(sizes.end(), shape.hidden.begin(), shape.hidden.end());
  sizes.push_back(1);
  ScoreModel model{MlpParams::glorot(sizes, shape.activation, derive_seed(seed, 1)), cfg};
  // Start every score at the rural midpoint. Below it, urban-labelled tiles sit on a flat
  // stretch of the ordinal loss (l1 - l2 is constant for t1 < s < mid) and do not move.
  model.net.layer(model.net.layer_count() - 1).bias.setConstant(0.5 * (cfg.t1 + cfg.t2));

  VectorXd params = model.net.flatten();
  OptimizerState state(params.size(), AdamOptions{.learning_rate = cfg.learning_rate});
  std::mt19937_64 rng(derive_seed(seed, 2));
  std::vector<Index> order(std::size_t(x.cols()));
  std::iota(order.begin(), order.end(), Index(0));
  VectorXd grad(params.size());
  const Index batch = std::min<Index>(cfg.batch_size, x.cols());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Index start = 0; start < x.cols(); start += batch) {
      const Index len = std::min(batch, x.cols() - start);
      std::vector<Index> idx(order.begin() + start, order.begin() + start + len);
      const MatrixXd xb = x(Eigen::all, idx);
      const MatrixXd yb = y(Eigen::all, idx);
      grad.setZero();
      const double loss = score_model_loss(model.net, xb, yb, cfg, &grad);
      adam_step(params, grad, loss, state);
      model.net.assign(params);
    }
    if (trace) trace->epoch_loss.push_back(score_model_loss(model.net, x, y, cfg, nullptr));
  }
  return model;
}

std::map<TileId, double> score_tiles(const ScoreModel& model, std::span<const Tile> tiles) {
  std::map<TileId, double> out;
  if (tiles.empty()) return out;
  const VectorXd s = model.score_batch(feature_matrix(tiles));
  for (std::size_t i = 0; i < tiles.size(); ++i) out[tiles[i].id] = s[Index(i)];
  return out;
}

}  // namespace geolevels
