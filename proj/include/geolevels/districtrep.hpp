#pragma once

#include "geolevels/encfeat.hpp"
#include "geolevels/hyperlocal.hpp"
#include "geolevels/synthworld.hpp"

#include <span>
#include <vector>

namespace geolevels {

/// Principal axes of a point cloud. Rows of `components` are orthonormal and each is
/// signed so its largest-magnitude entry is positive.
struct PcaProjector {
  VectorXd mean;
  MatrixXd components;        // n_components x dim
  VectorXd explained_ratio;   // per component, non-increasing

  int dimension() const { return int(mean.size()); }
  int n_components() const { return int(components.rows()); }
};

/// Points are columns.
PcaProjector fit_pca(const Eigen::Ref<const MatrixXd>& points, int n_components);

/// (embedding - mean) projected on the components.
VectorXd pca_apply(const PcaProjector& pca, const Eigen::Ref<const VectorXd>& embedding);
MatrixXd pca_apply_batch(const PcaProjector& pca, const Eigen::Ref<const MatrixXd>& embeddings);

struct EnsembleMember {
  Encoder encoder;
  PcaProjector pca;
};

/// r_i = [mu blocks of all M members, sigma blocks of all M members, hyperlocal summary].
struct DistrictRepresentation {
  VectorXd values;
  int members = 0;
  int components = 0;

  double score_sum() const { return values[values.size() - 1]; }
};

/// Per-tile inputs to a district summary: projected embeddings per member and one scalar
/// per tile summed into the last coordinate (the hyperlocal score, or 1 to count tiles).
struct TileSummaryTable {
  std::vector<MatrixXd> projected;  // per member: components x n_tiles
  VectorXd summed;                  // n_tiles
  std::vector<Index> column_of;     // tile id -> column

  Index column(TileId id) const;
};

TileSummaryTable build_summary_table(std::span<const EnsembleMember> members, const VectorXd& summed,
                                     std::span<const Tile> tiles);

/// Population mean/std per coordinate, concatenated in ensemble order, plus the sum.
DistrictRepresentation summarize(const TileSummaryTable& table, std::span<const TileId> tile_ids);

DistrictRepresentation district_feature(const EnsembleMember& member, const ScoreModel& score_model,
                                        const District& district, const World& world);

DistrictRepresentation ensemble_feature(std::span<const EnsembleMember> members, const ScoreModel& score_model,
                                        const District& district, const World& world);

}  // namespace geolevels
