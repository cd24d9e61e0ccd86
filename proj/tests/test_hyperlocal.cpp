#include "geolevels/analysis.hpp"
#include "geolevels/hyperlocal.hpp"

#include "testing.hpp"

#include <doctest.h>

using namespace geolevels;

namespace {

WorldSpec zero_noise_spec() {
  WorldSpec spec;
  spec.feature_noise = 0.0;
  spec.proxy_noise = 0.0;
  spec.label_flip = 0.0;
  spec.annotator_noise = 0.0;
  return spec;
}

// Independent evaluation of one sample's loss: -sum_k y_k log softmax(l)_k.
double reference_loss(double s, const Eigen::Vector3d& y, double t1, double t2) {
  const double l[3] = {t1 - s, std::min(s - t1, t2 - s), s - t2};
  const double m = std::max({l[0], l[1], l[2]});
  const double lse = m + std::log(std::exp(l[0] - m) + std::exp(l[1] - m) + std::exp(l[2] - m));
  return -(y[0] * (l[0] - lse) + y[1] * (l[1] - lse) + y[2] * (l[2] - lse));
}

}  // namespace

TEST_CASE("clamp_score") {
  const OrdinalConfig cfg;
  CHECK(clamp_score(25.0, cfg) == 20.0);
  CHECK(clamp_score(-30.0, cfg) == -10.0);
  CHECK(clamp_score(5.0, cfg) == 5.0);
  std::mt19937_64 rng(1);
  for (double x : testing::random_values(rng, 200, -50.0, 50.0))
    CHECK(clamp_score(clamp_score(x, cfg), cfg) == clamp_score(x, cfg));
}

TEST_CASE("ordinal logits at hand points") {
  const OrdinalConfig cfg;
  CHECK(ordinal_logits(5.0, cfg) == Eigen::Vector3d(-5.0, 5.0, -5.0));
  CHECK(ordinal_logits(-3.0, cfg) == Eigen::Vector3d(3.0, -3.0, -13.0));
  CHECK(ordinal_logits(15.0, cfg) == Eigen::Vector3d(-15.0, -5.0, 5.0));
}

TEST_CASE("classify_score follows the half-open thresholds") {
  const OrdinalConfig cfg;
  CHECK(classify_score(-3.0, cfg) == LandClass::uninhabited);
  CHECK(classify_score(5.0, cfg) == LandClass::rural);
  CHECK(classify_score(15.0, cfg) == LandClass::urban);
  CHECK(classify_score(0.0, cfg) == LandClass::rural);
  CHECK(classify_score(10.0, cfg) == LandClass::urban);
}

TEST_CASE("property: logit structure over a sweep of scores") {
  const OrdinalConfig cfg;
  int previous = 0;
  for (int i = 0; i <= 4000; ++i) {
    const double s = -20.0 + 40.0 * (double(i) + 0.37) / 4001.0;  // never exactly on a threshold
    const Eigen::Vector3d l = ordinal_logits(s, cfg);
    CHECK(l[0] + l[2] == doctest::Approx(cfg.t1 - cfg.t2).epsilon(1e-12));
    Index arg = 0;
    l.maxCoeff(&arg);
    CHECK(int(arg) == int(classify_score(s, cfg)));
    CHECK(int(arg) - previous >= 0);
    CHECK(int(arg) - previous <= 1);
    previous = int(arg);
    // unit slopes
    const Eigen::Vector3d step = ordinal_logits(s + 1e-3, cfg) - l;
    if (std::abs(s - 5.0) > 1e-3) CHECK((step.cwiseAbs().array() - 1e-3).abs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("class loss hand value and uniform label") {
  const OrdinalConfig cfg;
  const std::vector<double> s{5.0};
  MatrixXd y(3, 1);
  y << 0.0, 1.0, 0.0;
  CHECK(class_loss(s, y, cfg) == doctest::Approx(std::log1p(2.0 * std::exp(-10.0))).epsilon(1e-12));

  y << 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0;
  for (double score : {-4.0, 2.5, 7.0, 13.0}) {
    const std::vector<double> one{score};
    const Eigen::Vector3d l = ordinal_logits(score, cfg);
    const double lse = std::log(l.array().exp().sum());
    CHECK(class_loss(one, y, cfg) == doctest::Approx(-(l.array() - lse).sum() / 3.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(class_loss(std::vector<double>{}, MatrixXd(3, 0), cfg), DataError);
}

TEST_CASE("rural one-hot loss is minimized inside the rural interval") {
  const OrdinalConfig cfg;
  MatrixXd y(3, 1);
  y << 0.0, 1.0, 0.0;
  double best = 1e300, best_s = 0.0;
  for (int i = 0; i <= 3000; ++i) {
    const double s = -10.0 + 30.0 * i / 3000.0;
    const double loss = class_loss(std::vector<double>{s}, y, cfg);
    if (loss < best) best = loss, best_s = s;
  }
  CHECK(best_s > cfg.t1);
  CHECK(best_s < cfg.t2);
}

TEST_CASE("property: class loss and gradient match an independent implementation") {
  const OrdinalConfig cfg;
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<double> s = testing::random_values(rng, 12, -12.0, 22.0);
    MatrixXd y(3, 12);
    for (Index j = 0; j < 12; ++j) y.col(j) = testing::random_simplex(rng);
    double ref = 0.0;
    for (Index j = 0; j < 12; ++j) ref += reference_loss(s[std::size_t(j)], y.col(j), cfg.t1, cfg.t2);
    std::vector<double> d(12);
    CHECK(class_loss(s, y, cfg, d) == doctest::Approx(ref / 12.0).epsilon(1e-12));
    auto fn = [&](const VectorXd& p, VectorXd& g) {
      std::vector<double> sp(p.data(), p.data() + p.size()), dg(12);
      const double loss = class_loss(sp, y, cfg, dg);
      for (Index j = 0; j < 12; ++j) g[j] += dg[std::size_t(j)];
      return loss;
    };
    CHECK(grad_check(fn, Eigen::Map<const VectorXd>(s.data(), 12)) < 1e-4);
  }
}

TEST_CASE("score model loss gradient matches finite differences") {
  const OrdinalConfig cfg;
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    const MlpParams net = MlpParams::glorot({6, 8, 1}, Activation::tanh, 100 + trial);
    const MatrixXd x = testing::random_matrix(rng, 6, 10, 2.0);
    MatrixXd y(3, 10);
    for (Index j = 0; j < 10; ++j) y.col(j) = testing::random_simplex(rng);
    auto fn = [&](const VectorXd& p, VectorXd& g) {
      MlpParams m = net;
      m.assign(p);
      return score_model_loss(m, x, y, cfg, &g);
    };
    VectorXd p = net.flatten();
    p[p.size() - 1] = 4.0;  // head bias inside the clamp range
    CHECK(grad_check(fn, p) < 1e-4);
  }
}

TEST_CASE("training on a zero-noise world") {
  const World w = generate_world(zero_noise_spec(), 1);
  const auto labeled = sample_surrogate_labels(w, 1000, 2);
  const OrdinalConfig cfg;
  ScoreTrainingTrace trace;
  const ScoreModel model = train_score_model(labeled, cfg, 3, NetworkShape{}, &trace);

  {  // "accuracy on the labeled set"
    int correct = 0;
    for (const Tile& t : labeled) {
      Index arg = 0;
      t.soft_label->maxCoeff(&arg);
      correct += int(classify_score(model.score(t.features), cfg)) == int(arg);
    }
    CHECK(double(correct) / double(labeled.size()) >= 0.95);
  }
  {  // "loss decreases at every epoch"
    REQUIRE(trace.epoch_loss.size() == std::size_t(cfg.epochs));
    for (std::size_t e = 1; e < trace.epoch_loss.size(); ++e) CHECK(trace.epoch_loss[e] <= trace.epoch_loss[e - 1]);
  }
  {  // "class means are ordered and scores track the latent score"
    const auto scores = score_tiles(model, w.tiles);
    double sum[3] = {0, 0, 0};
    int count[3] = {0, 0, 0};
    std::vector<double> truth, pred;
    for (const Tile& t : w.tiles) {
      const double s = scores.at(t.id);
      CHECK(s >= cfg.t_min);
      CHECK(s <= cfg.t_max);
      sum[int(t.true_class)] += s;
      ++count[int(t.true_class)];
      truth.push_back(t.true_score);
      pred.push_back(s);
    }
    CHECK(sum[2] / count[2] > sum[1] / count[1]);
    CHECK(sum[1] / count[1] > sum[0] / count[0]);
    CHECK(correlation(truth, pred, CorrelationKind::spearman) >= 0.9);
  }
  {  // "training is deterministic"
    const ScoreModel again = train_score_model(labeled, cfg, 3);
    CHECK(again.net.flatten() == model.net.flatten());
  }
}

TEST_CASE("score_tiles is pure and order-independent") {
  const World w = generate_world(testing::small_spec(), 4);
  const ScoreModel model{MlpParams::glorot({16, 32, 32, 1}, Activation::tanh, 2), OrdinalConfig{}};
  std::vector<Tile> tiles(w.tiles.begin(), w.tiles.begin() + 50);
  const auto a = score_tiles(model, tiles);
  std::reverse(tiles.begin(), tiles.end());
  const auto b = score_tiles(model, tiles);
  CHECK(a == b);
  // single-sample and batched products may round differently in the last bit
  for (const Tile& t : tiles) CHECK(model.score(t.features) == doctest::Approx(a.at(t.id)).epsilon(1e-12));

  Tile wrong = tiles.front();
  wrong.features = VectorXd::Zero(5);
  CHECK_THROWS_AS(score_tiles(model, std::vector<Tile>{wrong}), ShapeError);
}

TEST_CASE("invalid ordinal configs are rejected") {
  OrdinalConfig cfg;
  cfg.t1 = 10.0;
  cfg.t2 = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = OrdinalConfig{};
  cfg.t_max = 5.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
