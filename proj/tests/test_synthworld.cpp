#include "geolevels/analysis.hpp"
#include "geolevels/synthworld.hpp"

#include "testing.hpp"

#include <doctest.h>

#include <set>

using namespace geolevels;

namespace {

void check_same_world(const World& a, const World& b) {
  REQUIRE(a.tiles.size() == b.tiles.size());
  REQUIRE(a.districts.size() == b.districts.size());
  CHECK(a.factors == b.factors);
  CHECK(a.mixtures == b.mixtures);
  for (std::size_t i = 0; i < a.tiles.size(); ++i) {
    CHECK(a.tiles[i].features == b.tiles[i].features);
    CHECK(a.tiles[i].true_score == b.tiles[i].true_score);
    CHECK(a.tiles[i].proxy == b.tiles[i].proxy);
    CHECK(a.tiles[i].true_class == b.tiles[i].true_class);
  }
  for (std::size_t i = 0; i < a.districts.size(); ++i) {
    CHECK(a.districts[i].tiles == b.districts[i].tiles);
    CHECK(a.districts[i].labels == b.districts[i].labels);
  }
}

World hand_world(std::vector<std::vector<double>> scores, std::vector<double> factors) {
  World w;
  TileId next = 0;
  for (std::size_t d = 0; d < scores.size(); ++d) {
    District district;
    district.id = DistrictId(d);
    for (double s : scores[d]) {
      Tile t;
      t.id = next++;
      t.district = district.id;
      t.true_score = s;
      district.tiles.push_back(t.id);
      w.tiles.push_back(t);
    }
    w.districts.push_back(district);
  }
  w.factors = std::move(factors);
  return w;
}

}  // namespace

TEST_CASE("world has the requested districts and tile counts") {
  WorldSpec spec;
  spec.n_districts = 10;
  spec.tiles_min = 50;
  spec.tiles_max = 200;
  const World w = generate_world(spec, 3);
  CHECK(w.districts.size() == 10);
  CHECK(w.factors.size() == 10);
  for (const auto& d : w.districts) {
    CHECK(d.tiles.size() >= 50);
    CHECK(d.tiles.size() <= 200);
  }
}

TEST_CASE("generation is deterministic under spec and seed") {
  const WorldSpec spec = testing::small_spec();
  check_same_world(generate_world(spec, 5), generate_world(spec, 5));
  CHECK(generate_world(spec, 5).factors != generate_world(spec, 6).factors);
}

TEST_CASE("property: district tile sets partition the tiles") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const World w = generate_world(testing::small_spec(), seed);
    std::set<TileId> seen;
    std::size_t total = 0;
    for (const auto& d : w.districts) {
      CHECK(!d.tiles.empty());
      total += d.tiles.size();
      for (TileId t : d.tiles) {
        CHECK(seen.insert(t).second);
        CHECK(w.tile(t).district == d.id);
      }
    }
    CHECK(total == w.tiles.size());
    for (std::size_t i = 0; i < w.tiles.size(); ++i) CHECK(w.tiles[i].id == TileId(i));
  }
}

TEST_CASE("zero noise makes features an exact invertible linear map of class and score") {
  WorldSpec spec = testing::small_spec();
  spec.feature_noise = 0.0;
  spec.proxy_noise = 0.0;
  spec.label_flip = 0.0;
  const World w = generate_world(spec, 2);
  const MatrixXd a = feature_embedding(spec);
  const auto qr = a.colPivHouseholderQr();
  CHECK(qr.rank() == 4);
  for (const Tile& t : w.tiles) {
    Eigen::Vector4d latent = Eigen::Vector4d::Zero();
    latent[int(t.true_class)] = 1.0;
    latent[3] = t.true_score / 10.0;
    CHECK((t.features - a * latent).norm() == 0.0);
    const Eigen::Vector4d back = qr.solve(t.features);
    CHECK((back - latent).norm() < 1e-10);
    CHECK(t.proxy == std::max(0.0, t.true_score));
  }
}

TEST_CASE("tile scores fall in their class ranges and classes follow the ranges") {
  const World w = generate_world(WorldSpec{}, 4);
  for (const Tile& t : w.tiles) {
    const Interval r = w.spec.score_ranges[std::size_t(t.true_class)];
    CHECK(t.true_score >= r.lo);
    CHECK(t.true_score <= r.hi);
    CHECK(t.proxy >= 0.0);
    CHECK(t.features.allFinite());
  }
}

TEST_CASE("labels equal the brute-force oracle over tiles") {
  const World w = generate_world(WorldSpec{}, 8);
  for (std::size_t i = 0; i < w.districts.size(); ++i) {
    const District& d = w.districts[i];
    double sum = 0.0;
    for (TileId t : d.tiles) sum += w.tiles[std::size_t(t)].true_score > 0.0 ? w.tiles[std::size_t(t)].true_score : 0.0;
    CHECK(d.labels.at("power") == sum * w.factors[i]);
    CHECK(d.labels.at("power_per_tile") == sum * w.factors[i] / double(d.tiles.size()));
    CHECK(oracle_power(w, d.tiles) == d.labels.at("power"));
  }
  const auto truth = world_ground_truth(w, "power");
  CHECK(truth.size() == w.districts.size());
  CHECK_THROWS_AS(world_ground_truth(w, "gdp"), ConfigError);
}

TEST_CASE("a district with no positive scores has power zero") {
  WorldSpec spec = testing::small_spec();
  spec.class_mixture = {1.0, 0.0, 0.0};
  const World w = generate_world(spec, 1);
  for (const auto& d : w.districts) CHECK(d.labels.at("power") == 0.0);
}

TEST_CASE("identical tile multisets scale with the factor") {
  const World w = hand_world({{3.0, -1.0, 12.0}, {12.0, 3.0, -1.0}}, {1.0, 2.0});
  const double a = oracle_power(w, w.districts[0].tiles);
  const double b = oracle_power(w, w.districts[1].tiles);
  CHECK(a == 15.0);
  CHECK(b == 2.0 * a);
  std::vector<TileId> both = w.districts[0].tiles;
  both.insert(both.end(), w.districts[1].tiles.begin(), w.districts[1].tiles.end());
  CHECK(oracle_power(w, both) == a + b);
}

TEST_CASE("latent factors follow a rank-size line with slope -1/alpha") {
  WorldSpec spec;
  spec.n_districts = 2000;
  spec.tiles_min = spec.tiles_max = 1;
  const World w = generate_world(spec, 12);
  const ZipfFit fit = zipf_fit(w.factors, 0.75);
  CHECK(fit.slope == doctest::Approx(-1.0 / spec.pareto_alpha).epsilon(0.15));
  CHECK(fit.r_squared > 0.95);
  for (double m : w.factors) CHECK(m >= spec.pareto_scale);
}

TEST_CASE("class mixtures are probability vectors tilted toward urban by the factor") {
  const World w = generate_world(WorldSpec{}, 9);
  for (std::size_t i = 0; i < w.mixtures.size(); ++i) {
    const auto& p = w.mixtures[i];
    CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
    for (double v : p) CHECK(v >= 0.0);
  }
  std::size_t lo = 0, hi = 0;
  for (std::size_t i = 0; i < w.factors.size(); ++i) {
    if (w.factors[i] < w.factors[lo]) lo = i;
    if (w.factors[i] > w.factors[hi]) hi = i;
  }
  CHECK(w.mixtures[hi][2] > w.mixtures[lo][2]);
}

TEST_CASE("invalid specs are rejected") {
  auto bad = [](auto mutate) {
    WorldSpec s;
    mutate(s);
    CHECK_THROWS_AS(generate_world(s, 1), ConfigError);
  };
  bad([](WorldSpec& s) { s.n_districts = 0; });
  bad([](WorldSpec& s) { s.tiles_min = 10, s.tiles_max = 5; });
  bad([](WorldSpec& s) { s.class_mixture = {0.5, 0.5, 0.5}; });
  bad([](WorldSpec& s) { s.class_mixture = {-0.1, 0.6, 0.5}; });
  bad([](WorldSpec& s) { s.score_ranges[1] = {-1.0, 10.0}; });
  bad([](WorldSpec& s) { s.score_ranges[2] = {12.0, 11.0}; });
  bad([](WorldSpec& s) { s.pareto_alpha = 0.0; });
  bad([](WorldSpec& s) { s.feature_noise = -1.0; });
  bad([](WorldSpec& s) { s.label_flip = 0.9; });
  bad([](WorldSpec& s) { s.annotator_noise = -1.0; });
}

TEST_CASE("surrogate labels: counts, sampling without replacement, one-hot at zero flip") {
  WorldSpec spec;
  spec.label_flip = 0.0;
  spec.annotator_noise = 0.0;
  const World w = generate_world(spec, 10);
  const auto labels = sample_surrogate_labels(w, 1000, 4);
  CHECK(labels.size() == 1000);
  std::set<TileId> ids;
  for (const Tile& t : labels) {
    CHECK(ids.insert(t.id).second);
    REQUIRE(t.soft_label.has_value());
    Eigen::Vector3d onehot = Eigen::Vector3d::Zero();
    onehot[int(t.true_class)] = 1.0;
    CHECK(*t.soft_label == onehot);
  }
  CHECK_THROWS_AS(sample_surrogate_labels(w, int(w.tiles.size()) + 1, 1), DataError);
  CHECK_THROWS_AS(sample_surrogate_labels(w, 0, 1), ConfigError);
}

TEST_CASE("property: flipped soft labels are simplex points whose argmax is the true class") {
  for (double flip : {0.05, 0.1, 0.3}) {
    WorldSpec spec = testing::small_spec();
    spec.label_flip = flip;
    spec.annotator_noise = 0.0;
    const World w = generate_world(spec, 11);
    for (const Tile& t : sample_surrogate_labels(w, 200, 3)) {
      const Eigen::Vector3d p = *t.soft_label;
      CHECK(std::abs(p.sum() - 1.0) < 1e-9);
      CHECK(p.minCoeff() >= 0.0);
      Index arg = 0;
      p.maxCoeff(&arg);
      CHECK(arg == int(t.true_class));
    }
  }
}

TEST_CASE("annotator noise softens labels near class boundaries only") {
  WorldSpec spec = testing::small_spec();
  spec.label_flip = 0.0;
  spec.annotator_noise = 1.0;
  const World w = generate_world(spec, 13);
  for (const Tile& t : sample_surrogate_labels(w, 300, 2)) {
    const Eigen::Vector3d p = *t.soft_label;
    CHECK(std::abs(p.sum() - 1.0) < 1e-9);
    CHECK(p.minCoeff() >= 0.0);
    const double s = t.true_score;
    // half the vote mass crosses a boundary exactly at the boundary
    const double to_boundary = std::min(std::abs(s - 0.0), std::abs(s - 10.0));
    if (to_boundary > 4.0) CHECK(p[int(t.true_class)] > 1.0 - 1e-4);
    if (s > 0.0 && s < 10.0) CHECK(p[1] >= 0.5 - 1e-12);
  }
}

TEST_CASE("surrogate sampling is seeded") {
  const World w = generate_world(testing::small_spec(), 1);
  const auto a = sample_surrogate_labels(w, 50, 9);
  const auto b = sample_surrogate_labels(w, 50, 9);
  const auto c = sample_surrogate_labels(w, 50, 10);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    differs = differs || a[i].id != c[i].id;
  }
  CHECK(differs);
}
