#include "geolevels/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>
#include <set>
#include <thread>

namespace geolevels {

// ---------------------------------------------------------------------------------------
// Augmentation

AugmentedSet augment_districts(std::span<const LabeledDistrict> districts, AugmentMode mode, std::size_t max_pairs,
                               std::uint64_t seed) {
  if (districts.empty()) throw DataError("augment_districts: no districts");
  std::set<DistrictId> seen;
  DistrictId max_id = districts.front().district.id;
  for (const auto& d : districts) {
    if (!seen.insert(d.district.id).second)
      throw DataError("augment_districts: duplicate district id " + std::to_string(d.district.id));
    if (!std::isfinite(d.label)) throw DataError("augment_districts: non-finite label");
    max_id = std::max(max_id, d.district.id);
  }

  AugmentedSet out;
  out.original_count = districts.size();
  for (const auto& d : districts) out.entries.push_back({d.district, d.label, true, -1, -1});

  const std::size_t n = districts.size();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
  if (max_pairs > 0 && max_pairs < pairs.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(pairs.begin(), pairs.end(), rng);
    pairs.resize(max_pairs);
    std::sort(pairs.begin(), pairs.end());
  }

  DistrictId next_id = max_id + 1;
  for (const auto& [i, j] : pairs) {
    const auto& a = districts[i];
    const auto& b = districts[j];
    AugmentedEntry e;
    e.original = false;
    e.left = a.district.id;
    e.right = b.district.id;
    e.district.id = next_id++;
    e.district.tiles = a.district.tiles;
    e.district.tiles.insert(e.district.tiles.end(), b.district.tiles.begin(), b.district.tiles.end());
    if (mode == AugmentMode::sum) {
      e.label = a.label + b.label;
    } else {
      const double na = double(a.district.tiles.size());
      const double nb = double(b.district.tiles.size());
      e.label = (na * a.label + nb * b.label) / (na + nb);
    }
    out.entries.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------------------
// Targets

ScalingTarget scaling_target(double label, double multiplier, double eps) {
  if (!(label > 0.0)) throw DataError("scaling_target: label must be positive, got " + std::to_string(label));
  if (!(eps > 0.0)) throw ConfigError("scaling_target: eps must be positive");
  ScalingTarget t;
  t.guarded = !(multiplier > eps);
  t.value = std::log(label / (t.guarded ? eps : multiplier));
  return t;
}

ScalingTarget scaling_target(const District& district, double label, const ScoreModel& score_model,
                             const World& world, double eps) {
  double total = 0.0;
  for (TileId id : district.tiles) total += score_model.score(world.tile(id).features);
  return scaling_target(label, total, eps);
}

// ---------------------------------------------------------------------------------------
// Forest

void ForestConfig::validate() const {
  if (n_trees <= 0) throw ConfigError("forest needs at least one tree");
  if (max_depth < 0 || min_leaf <= 0) throw ConfigError("forest depth/leaf limits are invalid");
  if (!(feature_fraction > 0.0 && feature_fraction <= 1.0)) throw ConfigError("feature_fraction must be in (0, 1]");
}

double RegressionTree::predict(const Eigen::Ref<const VectorXd>& x) const {
  int node = 0;
  while (nodes[std::size_t(node)].feature >= 0) {
    const TreeNode& n = nodes[std::size_t(node)];
    node = x[n.feature] <= n.threshold ? n.left : n.right;
  }
  return nodes[std::size_t(node)].value;
}

namespace {

class TreeBuilder {
 public:
  TreeBuilder(const Eigen::Ref<const MatrixXd>& x, std::span<const double> y, const ForestConfig& cfg,
              std::uint64_t seed)
      : x_(x), y_(y), cfg_(cfg), rng_(seed) {
    const int p = int(x.rows());
    n_try_ = std::max(1, int(std::floor(cfg.feature_fraction * double(p))));
    features_.resize(std::size_t(p));
    std::iota(features_.begin(), features_.end(), 0);
  }

  RegressionTree build() {
    const Index n = x_.cols();
    std::vector<Index> sample(static_cast<std::size_t>(n));
    if (cfg_.bootstrap) {
      std::uniform_int_distribution<Index> pick(0, n - 1);
      for (auto& s : sample) s = pick(rng_);
    } else {
      std::iota(sample.begin(), sample.end(), Index(0));
    }
    RegressionTree tree;
    grow(tree, sample, 0, sample.size(), 0);
    return tree;
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  int grow(RegressionTree& tree, std::vector<Index>& sample, std::size_t begin, std::size_t end, int depth) {
    const int node = int(tree.nodes.size());
    tree.nodes.emplace_back();
    const std::size_t m = end - begin;
    double sum = 0.0, lo = y_[std::size_t(sample[begin])], hi = lo;
    for (std::size_t i = begin; i < end; ++i) {
      const double v = y_[std::size_t(sample[i])];
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    tree.nodes[std::size_t(node)].value = sum / double(m);

    const bool depth_limited = cfg_.max_depth > 0 && depth >= cfg_.max_depth;
    if (depth_limited || m < 2 * std::size_t(cfg_.min_leaf) || lo == hi) return node;

    const Split split = best_split(sample, begin, end, sum);
    if (split.feature < 0) return node;

    const auto mid = std::partition(sample.begin() + std::ptrdiff_t(begin), sample.begin() + std::ptrdiff_t(end),
                                    [&](Index s) { return x_(split.feature, s) <= split.threshold; });
    const std::size_t cut = std::size_t(mid - sample.begin());
    const int left = grow(tree, sample, begin, cut, depth + 1);
    const int right = grow(tree, sample, cut, end, depth + 1);
    TreeNode& n = tree.nodes[std::size_t(node)];
    n.feature = split.feature;
    n.threshold = split.threshold;
    n.left = left;
    n.right = right;
    return node;
  }

  Split best_split(const std::vector<Index>& sample, std::size_t begin, std::size_t end, double total) {
    const std::size_t m = end - begin;
    const std::size_t min_leaf = std::size_t(cfg_.min_leaf);
    // partial Fisher-Yates: the first n_try_ entries become this node's candidate features
    for (int i = 0; i < n_try_; ++i) {
      std::uniform_int_distribution<int> pick(i, int(features_.size()) - 1);
      std::swap(features_[std::size_t(i)], features_[std::size_t(pick(rng_))]);
    }
    const double base = total * total / double(m);
    Split best;
    std::vector<std::pair<double, double>> column(m);
    for (int fi = 0; fi < n_try_; ++fi) {
      const int f = features_[std::size_t(fi)];
      for (std::size_t i = 0; i < m; ++i) {
        const Index s = sample[begin + i];
        column[i] = {x_(f, s), y_[std::size_t(s)]};
      }
      std::sort(column.begin(), column.end());
      double left_sum = 0.0;
      for (std::size_t k = 1; k < m; ++k) {
        left_sum += column[k - 1].second;
        if (k < min_leaf || m - k < min_leaf) continue;
        if (!(column[k - 1].first < column[k].first)) continue;
        const double right_sum = total - left_sum;
        const double gain =
            left_sum * left_sum / double(k) + right_sum * right_sum / double(m - k) - base;
        if (gain > best.gain + 1e-12 * std::abs(base) + 1e-300) {
          best.gain = gain;
          best.feature = f;
          double threshold = 0.5 * (column[k - 1].first + column[k].first);
          if (!(threshold < column[k].first)) threshold = column[k - 1].first;
          best.threshold = threshold;
        }
      }
    }
    return best;
  }

  const Eigen::Ref<const MatrixXd>& x_;
  std::span<const double> y_;
  const ForestConfig& cfg_;
  std::mt19937_64 rng_;
  int n_try_ = 1;
  std::vector<int> features_;
};

unsigned thread_count() {
  if (const char* env = std::getenv("GEOLEVELS_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return unsigned(n);
  }
  return 1;
}

}  // namespace

RegressionForest fit_forest(const Eigen::Ref<const MatrixXd>& inputs, std::span<const double> targets,
                            const ForestConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (inputs.cols() == 0 || targets.empty()) throw DataError("fit_forest: empty input");
  if (std::size_t(inputs.cols()) != targets.size()) throw ShapeError("fit_forest: inputs and targets differ in size");
  if (inputs.cols() < 2) throw DataError("fit_forest: need at least 2 samples");
  for (double t : targets)
    if (!std::isfinite(t)) throw DataError("fit_forest: non-finite target");
  if (!inputs.allFinite()) throw DataError("fit_forest: non-finite input");

  RegressionForest forest;
  forest.config = cfg;
  forest.input_dim = int(inputs.rows());
  forest.trees.resize(std::size_t(cfg.n_trees));
  for (int t = 0; t < cfg.n_trees; ++t) forest.tree_seeds.push_back(derive_seed(seed, 31, std::uint64_t(t)));

  const unsigned workers = std::min<unsigned>(thread_count(), unsigned(cfg.n_trees));
  auto work = [&](unsigned w) {
    for (std::size_t t = w; t < forest.trees.size(); t += workers)
      forest.trees[t] = TreeBuilder(inputs, targets, cfg, forest.tree_seeds[t]).build();
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }
  return forest;
}

RegressionForest fit_forest(std::span<const DistrictRepresentation> inputs, std::span<const double> targets,
                            const ForestConfig& cfg, std::uint64_t seed) {
  if (inputs.empty()) throw DataError("fit_forest: empty input");
  MatrixXd x(inputs.front().values.size(), Index(inputs.size()));
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].values.size() != x.rows()) throw ShapeError("fit_forest: representations differ in length");
    x.col(Index(i)) = inputs[i].values;
  }
  return fit_forest(x, targets, cfg, seed);
}

double forest_predict(const RegressionForest& forest, const Eigen::Ref<const VectorXd>& input) {
  if (input.size() != forest.input_dim)
    throw ShapeError("forest_predict: input length " + std::to_string(input.size()) + " != " +
                     std::to_string(forest.input_dim));
  if (forest.trees.empty()) throw DataError("forest_predict: empty forest");
  double total = 0.0;
  for (const auto& tree : forest.trees) total += tree.predict(input);
  return total / double(forest.trees.size());
}

double forest_predict(const RegressionForest& forest, const DistrictRepresentation& input) {
  return forest_predict(forest, input.values);
}

// ---------------------------------------------------------------------------------------
// Pipeline

std::vector<MemberSpec> PipelineConfig::effective_members() const {
  if (ablations.no_ensemble) return {{EncoderSource::surrogate, 30}};
  return members;
}

void PipelineConfig::validate() const {
  if (n_labels <= 0) throw ConfigError("n_labels must be positive");
  ordinal.validate();
  encoder.validate();
  forest.validate();
  if (members.empty()) throw ConfigError("ensemble must have at least one member");
  for (const auto& m : members)
    if (m.n_clusters < 0) throw ConfigError("member n_c must be non-negative");
  if (pca_components <= 0) throw ConfigError("pca_components must be positive");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (shape.hidden.empty()) throw ConfigError("network needs at least one hidden layer");
}

StageModels train_stages(const World& world, const PipelineConfig& config, std::uint64_t seed) {
  config.validate();
  StageModels stages;
  const int n_labels = std::min<int>(config.n_labels, int(world.tiles.size()));
  const std::vector<Tile> labeled = sample_surrogate_labels(world, n_labels, derive_seed(seed, 101));
  stages.score_model = in_stage("step 1 (score model)", [&] {
    return train_score_model(labeled, config.ordinal, derive_seed(seed, 102), config.shape);
  });

  const auto members = config.effective_members();
  if (config.ablations.no_finetune) {
    for (const auto& m : members) stages.encoders.push_back({stages.score_model.net.body(), MatrixXd(), 0, m.source});
    return stages;
  }

  const std::vector<Tile> inhabited = filter_inhabited(stages.score_model, world.tiles);
  for (std::size_t k = 0; k < members.size(); ++k) {
    const auto& m = members[k];
    const std::uint64_t member_seed = derive_seed(seed, 103, k);
    stages.encoders.push_back(in_stage("step 2 (encoder)", [&] {
      if (m.source == EncoderSource::surrogate)
        return train_encoder(labeled, inhabited, stages.score_model, m.n_clusters, config.encoder.lambda, member_seed,
                             config.encoder);
      return train_proxy_encoder(world.tiles, member_seed, config.encoder, &stages.score_model, m.n_clusters,
                                 config.shape);
    }));
  }
  return stages;
}

VectorXd tile_multipliers(const MultiLevelModel& model, std::span<const Tile> tiles) {
  if (!model.hyperlocal) return VectorXd::Ones(Index(tiles.size()));
  if (tiles.empty()) return VectorXd();
  return model.score_model.score_batch(feature_matrix(tiles));
}

namespace {

std::vector<Tile> tiles_of_districts(const World& world, std::span<const DistrictId> ids) {
  std::vector<Tile> tiles;
  for (DistrictId id : ids)
    for (TileId t : world.district(id).tiles) tiles.push_back(world.tile(t));
  return tiles;
}

}  // namespace

MultiLevelModel fit_scaling(const World& world, const StageModels& stages, std::span<const DistrictId> train_ids,
                            const std::string& indicator, const PipelineConfig& config, std::uint64_t seed,
                            ScalingReport* report) {
  config.validate();
  if (train_ids.empty()) throw DataError("fit_scaling: no training districts");
  const bool extensive = indicator_is_extensive(indicator);

  MultiLevelModel model;
  model.score_model = stages.score_model;
  model.eps = config.eps;
  model.hyperlocal = !config.ablations.no_hyperlocal;

  const std::vector<Tile> train_tiles = tiles_of_districts(world, train_ids);
  const MatrixXd x = feature_matrix(train_tiles);
  const VectorXd scores = model.score_model.score_batch(x);
  std::vector<Index> inhabited;
  for (Index i = 0; i < scores.size(); ++i)
    if (scores[i] >= model.score_model.config.t1) inhabited.push_back(i);

  if (report) *report = ScalingReport{};
  for (const auto& enc : stages.encoders) {
    const MatrixXd embedded = enc.embed_batch(x);
    const bool enough = Index(inhabited.size()) > config.pca_components;
    const PcaProjector pca = in_stage("step 2 (pca)", [&] {
      return enough ? fit_pca(embedded(Eigen::all, inhabited), config.pca_components)
                    : fit_pca(embedded, config.pca_components);
    });
    if (report) report->explained_variance.push_back(pca.explained_ratio.sum());
    model.members.push_back({enc, pca});
  }

  const TileSummaryTable table =
      build_summary_table(model.members, tile_multipliers(model, train_tiles), train_tiles);

  std::vector<LabeledDistrict> labeled;
  for (DistrictId id : train_ids) {
    const District& d = world.district(id);
    labeled.push_back({d, d.labels.at(indicator)});
  }
  AugmentedSet augmented;
  if (config.augment) {
    augmented = augment_districts(labeled, extensive ? AugmentMode::sum : AugmentMode::tile_weighted_mean,
                                  config.max_pairs, derive_seed(seed, 202));
  } else {
    augmented.original_count = labeled.size();
    for (const auto& l : labeled) augmented.entries.push_back({l.district, l.label, true, -1, -1});
  }

  MatrixXd inputs(2 * Index(model.members.size()) * config.pca_components + 1, Index(augmented.entries.size()));
  std::vector<double> targets;
  targets.reserve(augmented.entries.size());
  std::size_t guarded = 0;
  for (std::size_t e = 0; e < augmented.entries.size(); ++e) {
    const auto& entry = augmented.entries[e];
    const DistrictRepresentation r = summarize(table, entry.district.tiles);
    inputs.col(Index(e)) = r.values;
    const ScalingTarget t = in_stage("step 3 (targets)", [&] { return scaling_target(entry.label, r.score_sum(), model.eps); });
    guarded += t.guarded ? 1 : 0;
    targets.push_back(t.value);
  }
  model.forest = in_stage("step 3 (forest)", [&] { return fit_forest(inputs, targets, config.forest, derive_seed(seed, 201)); });
  if (report) {
    report->training_entries = augmented.entries.size();
    report->guarded_targets = guarded;
  }
  return model;
}

MultiLevelModel train_pipeline(const World& world, const std::string& indicator, const PipelineConfig& config,
                               std::uint64_t seed, std::span<const DistrictId> train_ids, ScalingReport* report) {
  indicator_is_extensive(indicator);
  const StageModels stages = train_stages(world, config, derive_seed(seed, 1));
  return fit_scaling(world, stages, train_ids, indicator, config, derive_seed(seed, 2), report);
}

DistrictRepresentation district_representation(const MultiLevelModel& model, const District& district,
                                               const World& world) {
  const DistrictId id = district.id;
  std::vector<Tile> tiles;
  for (TileId t : district.tiles) tiles.push_back(world.tile(t));
  if (tiles.empty()) throw DataError("district " + std::to_string(id) + " has no tiles");
  const TileSummaryTable table = build_summary_table(model.members, tile_multipliers(model, tiles), tiles);
  return summarize(table, district.tiles);
}

double district_log_factor(const MultiLevelModel& model, const District& district, const World& world) {
  return forest_predict(model.forest, district_representation(model, district, world));
}

double predict_district(const MultiLevelModel& model, const District& district, const World& world) {
  const DistrictRepresentation r = district_representation(model, district, world);
  const double h = forest_predict(model.forest, r);
  return std::max(r.score_sum(), model.eps) * std::exp(h);
}

std::vector<double> predict_districts(const MultiLevelModel& model, std::span<const DistrictId> ids,
                                      const World& world, std::vector<double>* log_factors) {
  std::vector<double> out;
  if (ids.empty()) return out;
  const std::vector<Tile> tiles = tiles_of_districts(world, ids);
  const TileSummaryTable table = build_summary_table(model.members, tile_multipliers(model, tiles), tiles);
  if (log_factors) log_factors->clear();
  for (DistrictId id : ids) {
    const District& d = world.district(id);
    if (d.tiles.empty()) throw DataError("district " + std::to_string(id) + " has no tiles");
    const DistrictRepresentation r = summarize(table, d.tiles);
    const double h = forest_predict(model.forest, r);
    if (log_factors) log_factors->push_back(h);
    out.push_back(std::max(r.score_sum(), model.eps) * std::exp(h));
  }
  return out;
}

}  // namespace geolevels
