#include "geolevels/synthworld.hpp"

#include "geolevels/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace geolevels {

const char* to_string(LandClass c) {
  switch (c) {
    case LandClass::uninhabited:
      return "uninhabited";
    case LandClass::rural:
      return "rural";
    case LandClass::urban:
      return "urban";
  }
  return "?";
}

void WorldSpec::validate() const {
  if (n_districts <= 0) throw ConfigError("n_districts must be positive");
  if (tiles_min <= 0 || tiles_max < tiles_min) throw ConfigError("tiles_per_district range is invalid");
  if (feature_dim < 4) throw ConfigError("feature_dim must be at least 4 so the embedding is invertible");
  double total = 0.0;
  for (double p : class_mixture) {
    if (!(p >= 0.0)) throw ConfigError("class_mixture entries must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("class_mixture must sum to 1");
  for (std::size_t k = 0; k < 3; ++k) {
    if (!(score_ranges[k].lo < score_ranges[k].hi)) throw ConfigError("score range must satisfy lo < hi");
    if (k > 0 && score_ranges[k - 1].hi > score_ranges[k].lo)
      throw ConfigError("score ranges must be ordered and non-overlapping");
  }
  if (!(pareto_alpha > 0.0) || !(pareto_scale > 0.0)) throw ConfigError("Pareto alpha and scale must be positive");
  if (!(feature_noise >= 0.0) || !(proxy_noise >= 0.0)) throw ConfigError("noise levels must be non-negative");
  if (!(label_flip >= 0.0 && label_flip < 2.0 / 3.0)) throw ConfigError("label_flip must lie in [0, 2/3)");
  if (!(annotator_noise >= 0.0) || !std::isfinite(annotator_noise))
    throw ConfigError("annotator_noise must be non-negative");
  if (!std::isfinite(agglomeration)) throw ConfigError("agglomeration must be finite");
  if (!(intensity_cap >= 0.0) || !std::isfinite(intensity_cap)) throw ConfigError("intensity_cap must be non-negative");
  if (intensity_cap > 0.0 && !(intensity_concentration > 0.0))
    throw ConfigError("intensity_concentration must be positive");
  if (!(mixture_concentration >= 0.0) || !std::isfinite(mixture_concentration))
    throw ConfigError("mixture_concentration must be non-negative");
}

const Tile& World::tile(TileId id) const {
  if (id < 0 || id >= TileId(tiles.size())) throw DataError("unknown tile id " + std::to_string(id));
  return tiles[std::size_t(id)];
}

const District& World::district(DistrictId id) const {
  if (id < 0 || id >= DistrictId(districts.size())) throw DataError("unknown district id " + std::to_string(id));
  return districts[std::size_t(id)];
}

std::vector<const Tile*> World::tiles_of(const District& d) const {
  std::vector<const Tile*> out;
  out.reserve(d.tiles.size());
  for (TileId t : d.tiles) out.push_back(&tile(t));
  return out;
}

bool indicator_is_extensive(const std::string& indicator) {
  if (indicator == kPowerIndicator) return true;
  if (indicator == kPowerPerTileIndicator) return false;
  throw ConfigError("unknown indicator '" + indicator + "'");
}

MatrixXd feature_embedding(const WorldSpec& spec) {
  std::mt19937_64 rng(spec.embedding_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd a(spec.feature_dim, 4);
  for (Index j = 0; j < a.cols(); ++j)
    for (Index i = 0; i < a.rows(); ++i) a(i, j) = normal(rng);
  return a;
}

namespace {

std::array<double, 3> tilted_mixture(const WorldSpec& spec, double factor) {
  std::array<double, 3> p{};
  const double log_m = std::log(factor / spec.pareto_scale);
  double total = 0.0;
  for (int k = 0; k < 3; ++k) {
    p[k] = spec.class_mixture[k] * std::exp(spec.agglomeration * log_m * double(k - 1));
    total += p[k];
  }
  for (double& v : p) v /= total;
  return p;
}

}  // namespace

World generate_world(const WorldSpec& spec, std::uint64_t seed) {
  spec.validate();
  World world;
  world.spec = spec;
  world.seed = seed;

  const MatrixXd embedding = feature_embedding(spec);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> tile_count(spec.tiles_min, spec.tiles_max);

  TileId next_tile = 0;
  for (int i = 0; i < spec.n_districts; ++i) {
    const double factor = spec.pareto_scale * std::pow(1.0 - unit(rng), -1.0 / spec.pareto_alpha);
    auto mixture = tilted_mixture(spec, factor);
    if (spec.mixture_concentration > 0.0) {
      double total = 0.0;
      for (double& p : mixture) {
        std::gamma_distribution<double> gamma(std::max(spec.mixture_concentration * p, 1e-3), 1.0);
        p = gamma(rng);
        total += p;
      }
      for (double& p : mixture) p /= total;
    }
    const double intensity =
        spec.intensity_cap > 0.0 ? 0.1 + 0.8 * std::min(1.0, (factor / spec.pareto_scale - 1.0) / spec.intensity_cap)
                                 : 0.5;
    std::gamma_distribution<double> gamma_a(std::max(spec.intensity_concentration * intensity, 1e-3), 1.0);
    std::gamma_distribution<double> gamma_b(std::max(spec.intensity_concentration * (1.0 - intensity), 1e-3), 1.0);
    std::discrete_distribution<int> pick_class(mixture.begin(), mixture.end());

    District district;
    district.id = i;
    const int n = tile_count(rng);
    double positive_sum = 0.0;
    for (int t = 0; t < n; ++t) {
      Tile tile;
      tile.id = next_tile++;
      tile.district = i;
      const int cls = pick_class(rng);
      tile.true_class = LandClass(cls);
      const Interval range = spec.score_ranges[std::size_t(cls)];
      double position = 0.0;
      if (cls == 0 || spec.intensity_cap == 0.0) {
        position = unit(rng);
      } else {
        const double a = gamma_a(rng);
        position = a / (a + gamma_b(rng));
      }
      tile.true_score = range.lo + (range.hi - range.lo) * position;

      Eigen::Vector4d latent = Eigen::Vector4d::Zero();
      latent[cls] = 1.0;
      latent[3] = tile.true_score / 10.0;
      tile.features = embedding * latent;
      for (Index f = 0; f < tile.features.size(); ++f) tile.features[f] += spec.feature_noise * normal(rng);
      tile.proxy = std::max(0.0, tile.true_score + spec.proxy_noise * normal(rng));

      positive_sum += std::max(0.0, tile.true_score);
      district.tiles.push_back(tile.id);
      world.tiles.push_back(std::move(tile));
    }
    const double power = positive_sum * factor;
    district.labels[kPowerIndicator] = power;
    district.labels[kPowerPerTileIndicator] = power / double(n);
    world.districts.push_back(std::move(district));
    world.factors.push_back(factor);
    world.mixtures.push_back(mixture);
  }
  return world;
}

std::map<DistrictId, double> world_ground_truth(const World& world, const std::string& indicator) {
  indicator_is_extensive(indicator);
  std::map<DistrictId, double> out;
  for (const auto& d : world.districts) out[d.id] = d.labels.at(indicator);
  return out;
}

double oracle_power(const World& world, std::span<const TileId> tile_ids) {
  std::vector<DistrictId> order;
  std::map<DistrictId, double> sums;
  for (TileId id : tile_ids) {
    const Tile& t = world.tile(id);
    if (!sums.count(t.district)) order.push_back(t.district);
    sums[t.district] += std::max(0.0, t.true_score);
  }
  double total = 0.0;
  for (DistrictId d : order) total += sums[d] * world.factors.at(std::size_t(d));
  return total;
}

std::vector<Tile> sample_surrogate_labels(const World& world, int n, std::uint64_t seed) {
  if (n <= 0) throw ConfigError("surrogate label count must be positive");
  if (std::size_t(n) > world.tiles.size())
    throw DataError("requested " + std::to_string(n) + " labels from " + std::to_string(world.tiles.size()) +
                    " tiles");
  std::vector<std::size_t> index(world.tiles.size());
  std::iota(index.begin(), index.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < std::size_t(n); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, index.size() - 1);
    std::swap(index[i], index[pick(rng)]);
  }

  const double flip = world.spec.label_flip;
  std::vector<Tile> out;
  out.reserve(std::size_t(n));
  for (std::size_t i = 0; i < std::size_t(n); ++i) {
    Tile t = world.tiles[index[i]];
    const int cls = int(t.true_class);
    Eigen::Vector3d votes = Eigen::Vector3d::Zero();
    if (world.spec.annotator_noise > 0.0) {
      // expected vote shares of annotators who see s* blurred by Gaussian noise
      auto below = [&](double boundary) {
        return 0.5 * std::erfc((t.true_score - boundary) / (world.spec.annotator_noise * std::sqrt(2.0)));
      };
      const double p0 = below(0.5 * (world.spec.score_ranges[0].hi + world.spec.score_ranges[1].lo));
      const double p01 = below(0.5 * (world.spec.score_ranges[1].hi + world.spec.score_ranges[2].lo));
      votes = Eigen::Vector3d(p0, p01 - p0, 1.0 - p01);
    } else {
      votes[cls] = 1.0;
    }
    Eigen::Vector3d spread = Eigen::Vector3d::Zero();
    if (cls == 1) {
      spread[0] = spread[2] = 0.5;
    } else {
      spread[1] = 1.0;
    }
    Eigen::Vector3d label = (1.0 - flip) * votes + flip * spread;
    label /= label.sum();
    t.soft_label = label;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace geolevels
