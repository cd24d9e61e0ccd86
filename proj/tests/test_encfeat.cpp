#include "geolevels/analysis.hpp"
#include "geolevels/encfeat.hpp"

#include "testing.hpp"

#include <doctest.h>

#include <set>

using namespace geolevels;

namespace {

// A network whose output is the constant `bias` regardless of input.
ScoreModel constant_model(int dim, double bias) {
  ScoreModel m{MlpParams({dim, 4, 1}, Activation::tanh), OrdinalConfig{}};
  m.net.layer(1).bias[0] = bias;
  return m;
}

struct Fixture {
  World world;
  std::vector<Tile> labeled;
  ScoreModel score_model;

  Fixture() : world(generate_world(testing::small_spec(), 31)) {
    labeled = sample_surrogate_labels(world, 300, 1);
    OrdinalConfig cfg;
    cfg.epochs = 40;
    cfg.learning_rate = 3e-3;
    score_model = train_score_model(labeled, cfg, 2);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

double squared_distance(const VectorXd& a, const VectorXd& b) { return (a - b).squaredNorm(); }

}  // namespace

TEST_CASE("kmeans with k = 1 returns the mean") {
  std::mt19937_64 rng(1);
  const MatrixXd x = testing::random_matrix(rng, 4, 37);
  const KmeansResult r = kmeans(x, 1, 5);
  CHECK((r.centroids.col(0) - x.rowwise().mean()).norm() < 1e-12);
  for (int a : r.assignments) CHECK(a == 0);
}

TEST_CASE("kmeans separates two distant blobs exactly") {
  std::mt19937_64 rng(2);
  MatrixXd x(3, 80);
  std::vector<int> blob(80);
  for (Index j = 0; j < 80; ++j) {
    blob[std::size_t(j)] = j % 2;
    x.col(j) = testing::random_vector(rng, 3, 0.5) + VectorXd::Constant(3, j % 2 ? 20.0 : -20.0);
  }
  const KmeansResult r = kmeans(x, 2, 3);
  CHECK(r.converged);
  // same partition up to relabeling
  for (Index j = 0; j < 80; ++j) CHECK((r.assignments[std::size_t(j)] == r.assignments[0]) == (blob[std::size_t(j)] == blob[0]));
}

TEST_CASE("property: kmeans inertia never increases and converged assignments are a fixpoint") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 15; ++trial) {
    const Index n = 20 + Index(rng() % 60);
    const int k = 1 + int(rng() % 7);
    const MatrixXd x = testing::random_matrix(rng, 3, n);
    const KmeansResult r = kmeans(x, k, rng());
    for (std::size_t i = 1; i < r.inertia_trace.size(); ++i) CHECK(r.inertia_trace[i] <= r.inertia_trace[i - 1] + 1e-9);
    std::vector<int> sizes(std::size_t(k), 0);
    double inertia = 0.0;
    for (Index j = 0; j < n; ++j) {
      const int a = r.assignments[std::size_t(j)];
      REQUIRE(a >= 0);
      REQUIRE(a < k);
      ++sizes[std::size_t(a)];
      const double own = squared_distance(x.col(j), r.centroids.col(a));
      inertia += own;
      if (r.converged)
        for (int c = 0; c < k; ++c) CHECK(own <= squared_distance(x.col(j), r.centroids.col(c)) + 1e-12);
    }
    for (int s : sizes) CHECK(s > 0);
    CHECK(r.inertia == doctest::Approx(inertia).epsilon(1e-9));
  }
}

TEST_CASE("kmeans keeps every cluster inhabited on duplicated points") {
  MatrixXd x(2, 12);
  for (Index j = 0; j < 12; ++j) x.col(j) = Eigen::Vector2d(j < 10 ? 0.0 : 5.0, j == 11 ? 1.0 : 0.0);
  const KmeansResult r = kmeans(x, 3, 4);
  std::set<int> used(r.assignments.begin(), r.assignments.end());
  CHECK(used.size() == 3);
}

TEST_CASE("kmeans is seeded and validates its inputs") {
  std::mt19937_64 rng(4);
  const MatrixXd x = testing::random_matrix(rng, 2, 50);
  CHECK(kmeans(x, 4, 9).assignments == kmeans(x, 4, 9).assignments);
  CHECK_THROWS_AS(kmeans(x.leftCols(3), 4, 1), DataError);
  CHECK_THROWS_AS(kmeans(x, 0, 1), ConfigError);
}

TEST_CASE("filter_inhabited boundaries and recount") {
  const World& w = fixture().world;
  CHECK(filter_inhabited(constant_model(16, -5.0), w.tiles).empty());
  CHECK(filter_inhabited(constant_model(16, 5.0), w.tiles).size() == w.tiles.size());

  const ScoreModel& model = fixture().score_model;
  const auto kept = filter_inhabited(model, w.tiles);
  std::size_t count = 0;
  for (const Tile& t : w.tiles) count += model.score(t.features) >= model.config.t1;
  CHECK(kept.size() == count);
  CHECK(count > 0);
  CHECK(count < w.tiles.size());
  for (const Tile& t : kept) CHECK(model.score(t.features) >= model.config.t1);
}

TEST_CASE("stratified pseudo-labels") {
  const Fixture& f = fixture();
  const auto inhabited = filter_inhabited(f.score_model, f.world.tiles);
  const Encoder enc{f.score_model.net.body(), MatrixXd(), 0, EncoderSource::surrogate};

  const auto one = pseudo_labels(enc, f.score_model, inhabited, 1, 3);
  REQUIRE(one.size() == inhabited.size());
  for (const Tile& t : inhabited) CHECK(one.at(t.id) == (f.score_model.score(t.features) >= f.score_model.config.t2 ? 1 : 0));

  const int nc = 4;
  const auto many = pseudo_labels(enc, f.score_model, inhabited, nc, 3);
  REQUIRE(many.size() == inhabited.size());
  std::set<int> used;
  for (const Tile& t : inhabited) {
    const int p = many.at(t.id);
    CHECK(p >= 0);
    CHECK(p < 2 * nc);
    CHECK((p >= nc) == (f.score_model.score(t.features) >= f.score_model.config.t2));
    used.insert(p);
  }
  CHECK(used.size() == std::size_t(2 * nc));

  CHECK_THROWS_AS(pseudo_labels(enc, f.score_model, std::span(inhabited).first(5), 30, 3), DataError);
}

TEST_CASE("cluster loss analytic values") {
  const Fixture& f = fixture();
  const std::vector<Tile> batch(f.world.tiles.begin(), f.world.tiles.begin() + 20);
  Encoder enc{f.score_model.net.body(), MatrixXd::Zero(32, 6), 3, EncoderSource::surrogate};
  std::map<TileId, int> pseudo;
  for (const Tile& t : batch) pseudo[t.id] = int(t.id % 6);
  CHECK(cluster_loss(enc, batch, pseudo) == doctest::Approx(std::log(6.0)).epsilon(1e-12));

  // one-dimensional embedding so a scaled head saturates the right logit
  MlpParams body({16, 1}, Activation::tanh, true);
  body.layer(0).bias[0] = 1.0;
  Encoder sat{body, MatrixXd(1, 2), 1, EncoderSource::surrogate};
  sat.cluster_head << 0.0, 200.0;
  for (const Tile& t : batch) pseudo[t.id] = 1;
  CHECK(cluster_loss(sat, batch, pseudo) < 1e-12);

  pseudo.erase(batch.front().id);
  CHECK_THROWS_AS(cluster_loss(sat, batch, pseudo), DataError);
}

TEST_CASE("cluster loss gradients match finite differences") {
  std::mt19937_64 rng(5);
  const MlpParams body = MlpParams::glorot({5, 6, 4}, Activation::tanh, 3, true);
  const MatrixXd head = testing::random_matrix(rng, 4, 6);
  const MatrixXd x = testing::random_matrix(rng, 5, 9);
  std::vector<int> labels;
  for (int i = 0; i < 9; ++i) labels.push_back(i % 6);
  const Index nb = body.parameter_count();
  auto fn = [&](const VectorXd& p, VectorXd& g) {
    MlpParams b = body;
    b.assign(p.head(nb));
    const MatrixXd h = Eigen::Map<const MatrixXd>(p.data() + nb, 4, 6);
    VectorXd gb = VectorXd::Zero(nb);
    MatrixXd gh = MatrixXd::Zero(4, 6);
    const double l = cluster_loss(b, h, x, labels, &gb, &gh);
    g.head(nb) += gb;
    g.tail(24) += Eigen::Map<const VectorXd>(gh.data(), 24);
    return l;
  };
  VectorXd p(nb + 24);
  p << body.flatten(), Eigen::Map<const VectorXd>(head.data(), 24);
  CHECK(grad_check(fn, p) < 1e-4);
}

TEST_CASE("pearson loss identities") {
  const std::vector<double> x{1.0, 4.0, 2.0, 8.0, 5.0};
  std::vector<double> neg, aff;
  for (double v : x) neg.push_back(-v), aff.push_back(3.0 * v + 7.0);
  CHECK(pearson_loss(x, x) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(pearson_loss(neg, x) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson_loss(aff, x) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_THROWS_AS(pearson_loss(std::vector<double>(5, 2.0), x), DataError);
  CHECK_THROWS_AS(pearson_loss(x, std::vector<double>(5, 2.0)), DataError);
  CHECK_THROWS_AS(pearson_loss(std::vector<double>{1.0}, std::vector<double>{2.0}), DataError);
}

TEST_CASE("property: pearson loss affine invariance, sign flip and gradient") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 3 + rng() % 30;
    const auto a = testing::random_values(rng, n, -3.0, 3.0);
    const auto b = testing::random_values(rng, n, 0.0, 10.0);
    const double scale = u(rng), shift = u(rng) - 2.5;
    std::vector<double> a2, neg;
    for (double v : a) a2.push_back(scale * v + shift), neg.push_back(-v);
    const double base = pearson_loss(a, b);
    CHECK(pearson_loss(a2, b) == doctest::Approx(base).epsilon(1e-9));
    CHECK(pearson_loss(neg, b) == doctest::Approx(-base).epsilon(1e-9));
    CHECK(pearson_loss(b, a) == doctest::Approx(base).epsilon(1e-9));
    CHECK(base == doctest::Approx(-correlation(a, b, CorrelationKind::pearson)).epsilon(1e-9));
    auto fn = [&](const VectorXd& p, VectorXd& g) {
      std::vector<double> s(p.data(), p.data() + p.size()), d(n);
      const double l = pearson_loss(s, b, d);
      for (std::size_t i = 0; i < n; ++i) g[Index(i)] += d[i];
      return l;
    };
    CHECK(grad_check(fn, Eigen::Map<const VectorXd>(a.data(), Index(n))) < 1e-4);
  }
}

TEST_CASE("encoder starts from the score model body") {
  const Fixture& f = fixture();
  const auto unlabeled = filter_inhabited(f.score_model, f.world.tiles);
  EncoderConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 1e-14;  // leaves the initialization in place up to rounding
  const Encoder enc = train_encoder(f.labeled, unlabeled, f.score_model, 3, 1.0, 4, cfg);
  CHECK(enc.n_clusters == 3);
  CHECK(enc.cluster_head.rows() == enc.embedding_dim());
  CHECK(enc.cluster_head.cols() == 6);
  const MlpParams& net = f.score_model.net;
  for (const Tile& t : f.world.tiles) {
    // penultimate activation computed layer by layer
    VectorXd h = t.features;
    for (std::size_t l = 0; l + 1 < net.layer_count(); ++l) h = (net.layer(l).weight * h + net.layer(l).bias).array().tanh();
    CHECK((enc.embed(t.features) - h).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("encoder training: degenerate objectives coincide and training is deterministic") {
  const Fixture& f = fixture();
  const auto unlabeled = filter_inhabited(f.score_model, f.world.tiles);
  EncoderConfig cfg;
  cfg.epochs = 2;
  const Encoder plain = train_encoder(f.labeled, unlabeled, f.score_model, 0, 1.0, 7, cfg);
  const Encoder zero_lambda = train_encoder(f.labeled, unlabeled, f.score_model, 3, 0.0, 7, cfg);
  CHECK(plain.cluster_head.size() == 0);
  CHECK(plain.body.flatten() == zero_lambda.body.flatten());

  const Encoder a = train_encoder(f.labeled, unlabeled, f.score_model, 3, 1.0, 7, cfg);
  const Encoder b = train_encoder(f.labeled, unlabeled, f.score_model, 3, 1.0, 7, cfg);
  CHECK(a.body.flatten() == b.body.flatten());
  CHECK(a.cluster_head == b.cluster_head);
  CHECK(a.body.flatten() != plain.body.flatten());
}

TEST_CASE("multi-task losses stay finite over five epochs") {
  const Fixture& f = fixture();
  const auto unlabeled = filter_inhabited(f.score_model, f.world.tiles);
  EncoderTrainingTrace trace;
  train_encoder(f.labeled, unlabeled, f.score_model, 3, 1.0, 8, EncoderConfig{}, &trace);
  REQUIRE(trace.supervised_loss.size() == 5);
  REQUIRE(trace.cluster_loss.size() == 5);
  for (double l : trace.supervised_loss) CHECK(std::isfinite(l));
  for (double l : trace.cluster_loss) CHECK(std::isfinite(l));
  CHECK(trace.cluster_loss.back() < trace.cluster_loss.front());
  // the body starts at the class-loss optimum, so the clustering term may cost a little of it
  CHECK(trace.supervised_loss.back() < trace.supervised_loss.front() + 0.15);
}

TEST_CASE("proxy encoder learns a noise-free proxy") {
  WorldSpec spec = testing::small_spec();
  spec.proxy_noise = 0.0;
  const World w = generate_world(spec, 21);
  std::vector<Tile> train, held_out;
  for (const Tile& t : w.tiles) (t.id % 4 == 0 ? held_out : train).push_back(t);

  EncoderConfig cfg;
  cfg.epochs = 60;
  cfg.learning_rate = 3e-3;
  EncoderTrainingTrace trace;
  MlpParams head;
  const Encoder enc = train_proxy_encoder(train, 3, cfg, nullptr, 0, NetworkShape{}, &trace, &head);
  CHECK(enc.source == EncoderSource::proxy);
  CHECK(trace.supervised_loss.back() < trace.supervised_loss.front());

  std::vector<double> pred, proxy;
  for (const Tile& t : held_out) {
    pred.push_back(head.forward(enc.embed(t.features))[0]);
    proxy.push_back(t.proxy);
  }
  CHECK(correlation(pred, proxy, CorrelationKind::pearson) >= 0.9);

  const Encoder again = train_proxy_encoder(train, 3, cfg);
  CHECK(again.body.flatten() == enc.body.flatten());
}

TEST_CASE("proxy encoder rejects degenerate inputs") {
  const World& w = fixture().world;
  std::vector<Tile> flat(w.tiles.begin(), w.tiles.begin() + 40);
  for (Tile& t : flat) t.proxy = 1.0;
  CHECK_THROWS_AS(train_proxy_encoder(flat, 1), DataError);
  CHECK_THROWS_AS(train_proxy_encoder(std::vector<Tile>{}, 1), DataError);
  CHECK_THROWS_AS(train_proxy_encoder(w.tiles, 1, EncoderConfig{}, nullptr, 3), ConfigError);
}
