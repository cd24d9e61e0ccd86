#include "geolevels/districtrep.hpp"

#include "testing.hpp"

#include <doctest.h>

#include <algorithm>

using namespace geolevels;

namespace {

struct Fixture {
  World world;
  ScoreModel score_model;
  std::vector<EnsembleMember> members;

  Fixture() : world(generate_world(testing::small_spec(), 41)) {
    score_model = ScoreModel{MlpParams::glorot({16, 32, 32, 1}, Activation::tanh, 3), OrdinalConfig{}};
    score_model.net.layer(2).bias[0] = 5.0;
    for (int m = 0; m < 6; ++m) {
      Encoder enc{MlpParams::glorot({16, 32, 32, 1}, Activation::tanh, 10 + std::uint64_t(m)).body(), MatrixXd(), 0,
                  m < 3 ? EncoderSource::surrogate : EncoderSource::proxy};
      MatrixXd x(16, Index(world.tiles.size()));
      for (Index j = 0; j < x.cols(); ++j) x.col(j) = world.tiles[std::size_t(j)].features;
      PcaProjector pca = fit_pca(enc.embed_batch(x), 3);
      members.push_back({std::move(enc), std::move(pca)});
    }
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

District make_district(std::vector<TileId> tiles) {
  District d;
  d.id = 0;
  d.tiles = std::move(tiles);
  return d;
}

}  // namespace

TEST_CASE("PCA of points on a line has one component explaining everything") {
  std::mt19937_64 rng(1);
  const Eigen::Vector3d dir = Eigen::Vector3d(1.0, -2.0, 0.5).normalized();
  MatrixXd x(3, 40);
  for (Index j = 0; j < 40; ++j) x.col(j) = Eigen::Vector3d(4.0, 1.0, -3.0) + testing::random_vector(rng, 1)[0] * dir;
  const PcaProjector p = fit_pca(x, 1);
  CHECK(p.explained_ratio[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(std::abs(p.components.row(0).dot(dir)) - 1.0) < 1e-9);
}

TEST_CASE("PCA of exactly rank-3 data captures all variance") {
  std::mt19937_64 rng(2);
  const MatrixXd basis = testing::random_matrix(rng, 8, 3);
  const MatrixXd x = basis * testing::random_matrix(rng, 3, 60);
  const PcaProjector p = fit_pca(x, 3);
  CHECK(p.explained_ratio.sum() >= 0.999);
}

TEST_CASE("property: PCA structure and agreement with an SVD oracle") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Index dim = 3 + Index(rng() % 8);
    const int k = 1 + int(rng() % std::min<Index>(dim, 4));
    const Index n = dim + 5 + Index(rng() % 40);
    // anisotropic cloud so the leading directions are well separated
    MatrixXd x = testing::random_matrix(rng, dim, n);
    for (Index i = 0; i < dim; ++i) x.row(i) *= double(dim - i) * 1.7;
    x = testing::random_matrix(rng, dim, dim).householderQr().householderQ() * x;
    const PcaProjector p = fit_pca(x, k);

    REQUIRE(p.n_components() == k);
    CHECK((p.components * p.components.transpose() - MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff() < 1e-9);
    for (int c = 0; c < k; ++c) {
      CHECK(p.explained_ratio[c] >= 0.0);
      CHECK(p.explained_ratio[c] <= 1.0);
      if (c > 0) CHECK(p.explained_ratio[c] <= p.explained_ratio[c - 1]);
      Index arg = 0;
      p.components.row(c).cwiseAbs().maxCoeff(&arg);
      CHECK(p.components(c, arg) > 0.0);
    }
    CHECK(p.explained_ratio.sum() <= 1.0 + 1e-12);

    const VectorXd mean = x.rowwise().mean();
    const MatrixXd centered = x.colwise() - mean;
    const Eigen::JacobiSVD<MatrixXd> svd(centered, Eigen::ComputeThinU);
    const VectorXd sv2 = svd.singularValues().array().square();
    for (int c = 0; c < k; ++c) {
      CHECK(p.explained_ratio[c] == doctest::Approx(sv2[c] / sv2.sum()).epsilon(1e-8));
      // projections agree up to the sign of each axis
      const VectorXd mine = p.components.row(c) * centered;
      const VectorXd theirs = svd.matrixU().col(c).transpose() * centered;
      CHECK(std::min((mine - theirs).cwiseAbs().maxCoeff(), (mine + theirs).cwiseAbs().maxCoeff()) < 1e-8 * (1.0 + theirs.cwiseAbs().maxCoeff()));
    }
  }
}

TEST_CASE("PCA rejects bad inputs") {
  std::mt19937_64 rng(4);
  const MatrixXd x = testing::random_matrix(rng, 4, 10);
  CHECK_THROWS_AS(fit_pca(x.leftCols(3), 3), DataError);
  CHECK_THROWS_AS(fit_pca(x, 5), ShapeError);
  CHECK_THROWS_AS(fit_pca(x, 0), ConfigError);
  CHECK_THROWS_AS(fit_pca(MatrixXd::Ones(4, 10), 2), DataError);
}

TEST_CASE("pca_apply centering, axes and linearity") {
  std::mt19937_64 rng(5);
  const MatrixXd x = testing::random_matrix(rng, 5, 30, 2.0);
  const PcaProjector p = fit_pca(x, 3);
  CHECK(pca_apply(p, p.mean).norm() < 1e-12);
  const VectorXd first = pca_apply(p, p.mean + p.components.row(0).transpose());
  CHECK((first - Eigen::Vector3d(1.0, 0.0, 0.0)).norm() < 1e-12);
  for (int trial = 0; trial < 20; ++trial) {
    const VectorXd a = testing::random_vector(rng, 5), b = testing::random_vector(rng, 5);
    // affine: the map of the origin absorbs the doubled centering
    CHECK((pca_apply(p, a + b) + pca_apply(p, VectorXd::Zero(5)) - pca_apply(p, a) - pca_apply(p, b)).norm() < 1e-10);
  }
  CHECK((pca_apply_batch(p, x).col(7) - pca_apply(p, x.col(7))).norm() < 1e-12);
  CHECK_THROWS_AS(pca_apply(p, VectorXd::Zero(4)), ShapeError);
  CHECK_THROWS_AS(pca_apply_batch(p, MatrixXd::Zero(6, 2)), ShapeError);
}

TEST_CASE("district feature of one tile and of identical tiles") {
  const Fixture& f = fixture();
  const EnsembleMember& m = f.members[0];
  const Tile& t = f.world.tiles[5];
  const auto r = district_feature(m, f.score_model, make_district({t.id}), f.world);
  REQUIRE(r.values.size() == 7);
  CHECK((r.values.head(3) - pca_apply(m.pca, m.encoder.embed(t.features))).norm() < 1e-12);
  CHECK(r.values.segment(3, 3).isZero(0.0));
  CHECK(r.score_sum() == doctest::Approx(f.score_model.score(t.features)).epsilon(1e-12));

  World copies = f.world;
  for (TileId id : {1, 2, 3}) copies.tiles[std::size_t(id)].features = copies.tiles[0].features;
  const auto same = district_feature(m, f.score_model, make_district({0, 1, 2, 3}), copies);
  CHECK(same.values.segment(3, 3).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("property: district feature equals a direct recomputation") {
  const Fixture& f = fixture();
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TileId> ids;
    for (int i = 0; i < 10; ++i) ids.push_back(TileId(rng() % f.world.tiles.size()));
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    const EnsembleMember& m = f.members[std::size_t(trial) % f.members.size()];
    const auto r = district_feature(m, f.score_model, make_district(ids), f.world);

    Eigen::Vector3d sum = Eigen::Vector3d::Zero(), sq = Eigen::Vector3d::Zero();
    double score_sum = 0.0;
    for (TileId id : ids) {
      const Tile& t = f.world.tile(id);
      const VectorXd e = m.encoder.embed(t.features);
      Eigen::Vector3d z;
      for (int c = 0; c < 3; ++c) z[c] = (e - m.pca.mean).dot(m.pca.components.row(c).transpose());
      sum += z;
      sq += z.cwiseProduct(z);
      score_sum += f.score_model.score(t.features);
    }
    const double n = double(ids.size());
    const Eigen::Vector3d mu = sum / n;
    const Eigen::Vector3d sigma = (sq / n - mu.cwiseProduct(mu)).cwiseMax(0.0).cwiseSqrt();
    CHECK((r.values.head(3) - mu).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((r.values.segment(3, 3) - sigma).cwiseAbs().maxCoeff() < 1e-7);  // E[z^2] - mu^2 loses digits
    CHECK(r.score_sum() == doctest::Approx(score_sum).epsilon(1e-10));
    for (int c = 3; c < 6; ++c) CHECK(r.values[c] >= 0.0);
  }
}

TEST_CASE("ensemble feature layout") {
  const Fixture& f = fixture();
  const District& d = f.world.districts[2];
  const auto r = ensemble_feature(f.members, f.score_model, d, f.world);
  CHECK(r.values.size() == 37);
  CHECK(r.members == 6);
  CHECK(r.components == 3);
  for (std::size_t m = 0; m < 6; ++m) {
    const auto single = district_feature(f.members[m], f.score_model, d, f.world);
    CHECK((r.values.segment(3 * Index(m), 3) - single.values.head(3)).norm() < 1e-12);
    CHECK((r.values.segment(18 + 3 * Index(m), 3) - single.values.segment(3, 3)).norm() < 1e-12);
  }
  const auto one = ensemble_feature(std::span(f.members).first(1), f.score_model, d, f.world);
  CHECK(one.values == district_feature(f.members[0], f.score_model, d, f.world).values);

  CHECK_THROWS_AS(ensemble_feature(std::span<const EnsembleMember>(), f.score_model, d, f.world), DataError);
  CHECK_THROWS_AS(ensemble_feature(f.members, f.score_model, make_district({}), f.world), DataError);
}

TEST_CASE("property: tile order invariance and union consistency of the score sum") {
  const Fixture& f = fixture();
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const District& a = f.world.districts[rng() % f.world.districts.size()];
    const District& b = f.world.districts[rng() % f.world.districts.size()];
    District shuffled = a;
    std::shuffle(shuffled.tiles.begin(), shuffled.tiles.end(), rng);
    const auto ra = ensemble_feature(f.members, f.score_model, a, f.world);
    const auto rs = ensemble_feature(f.members, f.score_model, shuffled, f.world);
    CHECK((ra.values - rs.values).cwiseAbs().maxCoeff() < 1e-10);
    if (a.id == b.id) continue;
    District both = a;
    both.tiles.insert(both.tiles.end(), b.tiles.begin(), b.tiles.end());
    const auto rb = ensemble_feature(f.members, f.score_model, b, f.world);
    const auto ru = ensemble_feature(f.members, f.score_model, both, f.world);
    CHECK(ru.score_sum() == doctest::Approx(ra.score_sum() + rb.score_sum()).epsilon(1e-12));
  }
}

TEST_CASE("summary table lookups") {
  const Fixture& f = fixture();
  const std::vector<Tile> tiles(f.world.tiles.begin(), f.world.tiles.begin() + 10);
  const TileSummaryTable table = build_summary_table(f.members, VectorXd::Ones(10), tiles);
  CHECK(table.column(tiles[3].id) == 3);
  CHECK_THROWS_AS(table.column(TileId(f.world.tiles.size() + 5)), DataError);
  std::vector<TileId> ids{tiles[0].id, tiles[4].id};
  CHECK(summarize(table, ids).score_sum() == 2.0);
  CHECK_THROWS_AS(build_summary_table(f.members, VectorXd::Ones(9), tiles), ShapeError);
}
