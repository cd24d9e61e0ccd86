#pragma once

#include "geolevels/types.hpp"

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace geolevels {

enum class LandClass : int { uninhabited = 0, rural = 1, urban = 2 };

const char* to_string(LandClass c);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const Interval&, const Interval&) = default;
};

/// Parameters of a synthetic country.
///
/// Each district draws a latent factor m* from Pareto(alpha, scale). Its class mixture is the
/// base mixture tilted by m*: p_k is proportional to base_k * m*^(agglomeration * (k - 1)),
/// so high-factor districts are more urban and less empty. That coupling is what lets a
/// district summary of tile features carry information about m*.
struct WorldSpec {
  int n_districts = 60;
  int tiles_min = 40;
  int tiles_max = 160;
  int feature_dim = 16;
  std::array<double, 3> class_mixture{0.2, 0.5, 0.3};
  /// Tilt of the class mixture by ln m*: p_k ~ mixture_k * exp(agglomeration ln m* (k - 1)).
  double agglomeration = 0.5;
  /// Developed-class (rural, urban) scores sit at lo + (hi - lo) B with B ~ Beta(k mu, k (1 - mu)),
  /// mu = 0.1 + 0.8 min(1, (m*/scale - 1) / intensity_cap), k = intensity_concentration.
  /// intensity_cap = 0 draws uniform scores instead.
  double intensity_cap = 30.0;
  double intensity_concentration = 20.0;
  /// Dirichlet concentration of per-district mixture noise around the tilted mixture;
  /// 0 disables the noise.
  double mixture_concentration = 0.0;
  std::array<Interval, 3> score_ranges{{{-10.0, 0.0}, {0.0, 10.0}, {10.0, 20.0}}};
  double pareto_alpha = 1.2;
  double pareto_scale = 1.0;
  double feature_noise = 0.3;
  double proxy_noise = 0.5;
  double label_flip = 0.05;
  /// Spread of annotator perception of s* (in score units) when forming soft labels.
  /// 0 gives the pure flip model.
  double annotator_noise = 3.0;
  /// Seed of the class/score-to-feature embedding. Shared by worlds that should be
  /// mutually transferable, independent of the world seed.
  std::uint64_t embedding_seed = 7001;

  /// Throws ConfigError on violated invariants.
  void validate() const;

  friend bool operator==(const WorldSpec&, const WorldSpec&) = default;
};

struct Tile {
  TileId id = 0;
  DistrictId district = 0;
  VectorXd features;
  double true_score = 0.0;
  LandClass true_class = LandClass::uninhabited;
  double proxy = 0.0;
  std::optional<Eigen::Vector3d> soft_label;
};

struct District {
  DistrictId id = 0;
  std::vector<TileId> tiles;
  std::map<std::string, double> labels;
};

struct World {
  WorldSpec spec;
  std::uint64_t seed = 0;
  std::vector<Tile> tiles;          // tiles[i].id == i
  std::vector<District> districts;  // districts[i].id == i
  std::vector<double> factors;      // latent m* per district
  std::vector<std::array<double, 3>> mixtures;

  const Tile& tile(TileId id) const;
  const District& district(DistrictId id) const;
  /// Tiles of one district, in stored order.
  std::vector<const Tile*> tiles_of(const District& d) const;
};

inline constexpr const char* kPowerIndicator = "power";
inline constexpr const char* kPowerPerTileIndicator = "power_per_tile";

/// Whether an indicator sums under district union (true) or averages by tile count (false).
bool indicator_is_extensive(const std::string& indicator);

/// Feature embedding matrix (feature_dim x 4) applied to [one-hot class; s*/10].
MatrixXd feature_embedding(const WorldSpec& spec);

World generate_world(const WorldSpec& spec, std::uint64_t seed);

std::map<DistrictId, double> world_ground_truth(const World& world, const std::string& indicator);

/// Independent recomputation of the extensive label of an arbitrary tile set:
/// per source district, (sum of max(0, s*)) * m*, accumulated in order of first appearance.
double oracle_power(const World& world, std::span<const TileId> tile_ids);

/// Uniform sample of `n` tiles without replacement, each carrying a soft surrogate label:
/// the true class gets 1 - flip and the flip mass goes to the ordinally adjacent classes
/// (rural splits it between uninhabited and urban; the two extremes give it all to rural).
std::vector<Tile> sample_surrogate_labels(const World& world, int n, std::uint64_t seed);

}  // namespace geolevels
