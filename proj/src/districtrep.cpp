#include "geolevels/districtrep.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace geolevels {

PcaProjector fit_pca(const Eigen::Ref<const MatrixXd>& points, int n_components) {
  if (n_components <= 0) throw ConfigError("fit_pca: n_components must be positive");
  if (n_components > points.rows())
    throw ShapeError("fit_pca: " + std::to_string(n_components) + " components from dimension " +
                     std::to_string(points.rows()));
  if (points.cols() < n_components + 1)
    throw DataError("fit_pca: need at least n_components + 1 points, got " + std::to_string(points.cols()));

  PcaProjector p;
  p.mean = points.rowwise().mean();
  const MatrixXd centered = points.colwise() - p.mean;
  const MatrixXd cov = centered * centered.transpose() / double(points.cols());
  const double total = cov.trace();
  if (!(total > 1e-300)) throw DataError("fit_pca: zero covariance (all points identical)");

  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DataError("fit_pca: eigendecomposition failed");
  const Index dim = cov.rows();
  p.components.resize(n_components, dim);
  p.explained_ratio.resize(n_components);
  for (int c = 0; c < n_components; ++c) {
    const Index src = dim - 1 - c;  // eigenvalues ascend
    VectorXd v = solver.eigenvectors().col(src);
    Index largest = 0;
    v.cwiseAbs().maxCoeff(&largest);
    if (v[largest] < 0.0) v = -v;
    p.components.row(c) = v.transpose();
    p.explained_ratio[c] = std::max(0.0, solver.eigenvalues()[src]) / total;
  }
  return p;
}

VectorXd pca_apply(const PcaProjector& pca, const Eigen::Ref<const VectorXd>& embedding) {
  if (embedding.size() != pca.mean.size()) throw ShapeError("pca_apply: embedding dimension mismatch");
  return pca.components * (embedding - pca.mean);
}

MatrixXd pca_apply_batch(const PcaProjector& pca, const Eigen::Ref<const MatrixXd>& embeddings) {
  if (embeddings.rows() != pca.mean.size()) throw ShapeError("pca_apply: embedding dimension mismatch");
  return pca.components * (embeddings.colwise() - pca.mean);
}

Index TileSummaryTable::column(TileId id) const {
  if (id < 0 || std::size_t(id) >= column_of.size() || column_of[std::size_t(id)] < 0)
    throw DataError("tile " + std::to_string(id) + " is not in the summary table");
  return column_of[std::size_t(id)];
}

TileSummaryTable build_summary_table(std::span<const EnsembleMember> members, const VectorXd& summed,
                                     std::span<const Tile> tiles) {
  if (members.empty()) throw DataError("empty ensemble");
  if (summed.size() != Index(tiles.size())) throw ShapeError("one summed value per tile required");
  TileSummaryTable table;
  table.summed = summed;
  TileId max_id = -1;
  for (const Tile& t : tiles) max_id = std::max(max_id, t.id);
  table.column_of.assign(std::size_t(max_id + 1), -1);
  for (std::size_t i = 0; i < tiles.size(); ++i) table.column_of[std::size_t(tiles[i].id)] = Index(i);
  if (tiles.empty()) return table;

  const MatrixXd x = feature_matrix(tiles);
  for (const auto& m : members) table.projected.push_back(pca_apply_batch(m.pca, m.encoder.embed_batch(x)));
  return table;
}

DistrictRepresentation summarize(const TileSummaryTable& table, std::span<const TileId> tile_ids) {
  if (tile_ids.empty()) throw DataError("cannot summarize an empty district");
  const int members = int(table.projected.size());
  if (members == 0) throw DataError("empty ensemble");
  const int comps = int(table.projected.front().rows());

  std::vector<Index> cols;
  cols.reserve(tile_ids.size());
  for (TileId id : tile_ids) cols.push_back(table.column(id));
  const double n = double(cols.size());

  DistrictRepresentation r;
  r.members = members;
  r.components = comps;
  r.values.resize(2 * members * comps + 1);
  for (int m = 0; m < members; ++m) {
    const MatrixXd block = table.projected[std::size_t(m)](Eigen::all, cols);
    for (int c = 0; c < comps; ++c) {
      const auto row = block.row(c);
      const double mean = row.sum() / n;
      double sd = 0.0;
      if (row.maxCoeff() != row.minCoeff()) sd = std::sqrt((row.array() - mean).square().sum() / n);
      r.values[m * comps + c] = mean;
      r.values[members * comps + m * comps + c] = sd;
    }
  }
  double total = 0.0;
  for (Index c : cols) total += table.summed[c];
  r.values[r.values.size() - 1] = total;
  return r;
}

namespace {

std::vector<Tile> district_tiles(const District& district, const World& world) {
  if (district.tiles.empty()) throw DataError("district " + std::to_string(district.id) + " has no tiles");
  std::vector<Tile> tiles;
  tiles.reserve(district.tiles.size());
  for (TileId id : district.tiles) tiles.push_back(world.tile(id));
  return tiles;
}

}  // namespace

DistrictRepresentation ensemble_feature(std::span<const EnsembleMember> members, const ScoreModel& score_model,
                                        const District& district, const World& world) {
  if (members.empty()) throw DataError("ensemble_feature: empty ensemble");
  const std::vector<Tile> tiles = district_tiles(district, world);
  const VectorXd scores = score_model.score_batch(feature_matrix(tiles));
  const TileSummaryTable table = build_summary_table(members, scores, tiles);
  return summarize(table, district.tiles);
}

DistrictRepresentation district_feature(const EnsembleMember& member, const ScoreModel& score_model,
                                        const District& district, const World& world) {
  return ensemble_feature(std::span<const EnsembleMember>(&member, 1), score_model, district, world);
}

}  // namespace geolevels
