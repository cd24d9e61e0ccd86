#include "geolevels/analysis.hpp"

#include "geolevels/config.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace geolevels {

namespace {

void require_pair(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) throw ShapeError(std::string(what) + ": sequences differ in length");
  if (a.size() < 2) throw DataError(std::string(what) + ": need at least 2 values");
}

bool is_constant(std::span<const double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *lo == *hi;
}

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

double pearson(std::span<const double> a, std::span<const double> b) {
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) throw DataError("correlation: degenerate variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace

double r_squared(std::span<const double> truth, std::span<const double> pred) {
  require_pair(truth, pred, "r_squared");
  if (is_constant(truth)) throw DataError("r_squared: truth has zero variance");
  const double m = mean_of(truth);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - m) * (truth[i] - m);
  }
  return 1.0 - ss_res / ss_tot;
}

const char* to_string(CorrelationKind kind) { return kind == CorrelationKind::pearson ? "pearson" : "spearman"; }

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  for (std::size_t start = 0; start < n;) {
    std::size_t end = start + 1;
    while (end < n && values[order[end]] == values[order[start]]) ++end;
    const double rank = 0.5 * double(start + 1 + end);  // mean of positions start+1 .. end
    for (std::size_t k = start; k < end; ++k) ranks[order[k]] = rank;
    start = end;
  }
  return ranks;
}

double correlation(std::span<const double> a, std::span<const double> b, CorrelationKind kind) {
  require_pair(a, b, "correlation");
  if (is_constant(a) || is_constant(b)) throw DataError("correlation: degenerate variance");
  if (kind == CorrelationKind::pearson) return pearson(a, b);
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  return pearson(ra, rb);
}

double gini(std::span<const double> values) {
  if (values.empty()) throw DataError("gini: empty input");
  std::vector<double> x(values.begin(), values.end());
  for (double v : x)
    if (!(v >= 0.0) || !std::isfinite(v)) throw DataError("gini: values must be finite and non-negative");
  std::sort(x.begin(), x.end());
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  if (!(total > 0.0)) throw DataError("gini: all values are zero");
  const double n = double(x.size());
  // sum_ij |x_i - x_j| = 2 sum_i (2i - n - 1) x_(i) over ascending order, i = 1..n.
  // The weights sum to zero, so shifting by the minimum is free and makes equal values exact.
  double weighted = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) weighted += (2.0 * double(i + 1) - n - 1.0) * (x[i] - x.front());
  return weighted / (n * total);
}

ZipfFit zipf_fit(std::span<const double> values, double top_quantile) {
  if (!(top_quantile > 0.0 && top_quantile <= 1.0)) throw ConfigError("zipf_fit: top_quantile must lie in (0, 1]");
  for (double v : values)
    if (!(v > 0.0) || !std::isfinite(v)) throw DataError("zipf_fit: values must be positive and finite");
  const std::size_t k = std::size_t(std::ceil(top_quantile * double(values.size()) - 1e-9));
  if (k < 3) throw DataError("zipf_fit: fewer than 3 values survive the quantile filter");

  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  ZipfFit fit;
  for (std::size_t r = 0; r < k; ++r) {
    fit.log_rank.push_back(std::log(double(r + 1)));
    fit.log_value.push_back(std::log(sorted[r]));
  }
  const double mx = mean_of(fit.log_rank);
  const double my = mean_of(fit.log_value);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double dx = fit.log_rank[i] - mx;
    const double dy = fit.log_value[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double e = fit.log_value[i] - (fit.intercept + fit.slope * fit.log_rank[i]);
    ss_res += e * e;
  }
  fit.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return fit;
}

Summary summarize_values(std::span<const double> values) {
  if (values.empty()) throw DataError("summary of an empty sequence");
  Summary s;
  s.mean = mean_of(values);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = values.size() > 1 ? std::sqrt(ss / double(values.size() - 1)) : 0.0;
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  s.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  s.min = sorted.front();
  s.max = sorted.back();
  return s;
}

// ---------------------------------------------------------------------------------------

DistrictSplit split_districts(std::span<const DistrictId> ids, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  std::vector<DistrictId> order(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = std::size_t(std::lround(train_fraction * double(order.size())));
  DistrictSplit split;
  split.train.assign(order.begin(), order.begin() + std::ptrdiff_t(n_train));
  split.test.assign(order.begin() + std::ptrdiff_t(n_train), order.end());
  return split;
}

std::vector<double> EvalReport::r2_values() const {
  std::vector<double> out;
  out.reserve(repetitions.size());
  for (const auto& r : repetitions) out.push_back(r.r2);
  return out;
}

EvalReport evaluate_predictor(const World& world, const std::string& indicator, const SplitPredictor& predictor,
                              const EvalOptions& options, std::uint64_t seed) {
  if (options.repetitions <= 0) throw ConfigError("repetitions must be positive");
  indicator_is_extensive(indicator);
  std::vector<DistrictId> ids;
  for (const auto& d : world.districts) ids.push_back(d.id);

  EvalReport report;
  for (int rep = 0; rep < options.repetitions; ++rep) {
    const std::string stage = "repetition " + std::to_string(rep);
    const DistrictSplit split = split_districts(ids, options.train_fraction, derive_seed(seed, 41, std::uint64_t(rep)));
    if (split.train.size() < 2 || split.test.size() < 2)
      throw DataError(stage + ": split leaves fewer than 2 districts on one side");
    std::vector<double> truth;
    for (DistrictId id : split.test) truth.push_back(world.district(id).labels.at(indicator));
    const std::vector<double> pred = in_stage(stage.c_str(), [&] { return predictor(split, rep); });
    if (pred.size() != truth.size()) throw ShapeError(stage + ": predictor returned the wrong number of values");

    RepetitionResult r;
    r.repetition = rep;
    r.r2 = in_stage(stage.c_str(), [&] { return r_squared(truth, pred); });
    r.train_districts = split.train.size();
    r.test_districts = split.test.size();
    report.repetitions.push_back(r);
  }
  report.r2 = summarize_values(report.r2_values());
  return report;
}

StageModels shared_stages(const World& world, const PipelineConfig& config, std::uint64_t seed) {
  return train_stages(world, config, derive_seed(seed, 40));
}

EvalReport evaluate(const World& world, const std::string& indicator, const PipelineConfig& config,
                    const EvalOptions& options, std::uint64_t seed, const StageModels* stages) {
  config.validate();
  StageModels owned;
  if (!stages && options.share_stages) {
    owned = shared_stages(world, config, seed);
    stages = &owned;
  }
  std::vector<std::size_t> guarded(std::size_t(std::max(options.repetitions, 0)), 0);
  const SplitPredictor predictor = [&](const DistrictSplit& split, int rep) {
    const std::uint64_t rep_seed = derive_seed(seed, 42, std::uint64_t(rep));
    StageModels per_rep;
    if (!stages) per_rep = train_stages(world, config, derive_seed(seed, 43, std::uint64_t(rep)));
    ScalingReport scaling;
    const MultiLevelModel model =
        fit_scaling(world, stages ? *stages : per_rep, split.train, indicator, config, rep_seed, &scaling);
    guarded[std::size_t(rep)] = scaling.guarded_targets;
    return predict_districts(model, split.test, world);
  };
  EvalReport report = evaluate_predictor(world, indicator, predictor, options, seed);
  for (auto& r : report.repetitions) {
    r.guarded_targets = guarded[std::size_t(r.repetition)];
    report.guarded_targets += r.guarded_targets;
  }
  report.fingerprint = run_fingerprint(world.spec, world.seed, indicator, config, options, seed);
  return report;
}

std::vector<CurvePoint> robustness_curve(const World& world, const std::string& indicator,
                                         const PipelineConfig& config, std::span<const double> train_fractions,
                                         bool with_augmentation, int repetitions, std::uint64_t seed,
                                         const StageModels* stages) {
  const double n = double(world.districts.size());
  for (double f : train_fractions) {
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("train fractions must lie in (0, 1)");
    const double n_train = double(std::lround(f * n));
    if (n_train < 5.0 || n - n_train < 2.0)
      throw DataError("train fraction " + std::to_string(f) + " leaves too few districts on one side");
  }
  PipelineConfig cfg = config;
  cfg.augment = with_augmentation;
  EvalOptions options;
  options.repetitions = repetitions;

  StageModels owned;
  if (!stages) {
    owned = shared_stages(world, cfg, seed);
    stages = &owned;
  }
  std::vector<CurvePoint> curve;
  for (double f : train_fractions) {
    options.train_fraction = f;
    curve.push_back({f, evaluate(world, indicator, cfg, options, seed, stages)});
  }
  return curve;
}

// ---------------------------------------------------------------------------------------

double transfer_spearman(const MultiLevelModel& model, const World& target, const std::string& indicator) {
  if (model.score_model.net.input_size() != target.spec.feature_dim)
    throw ShapeError("transfer: model expects feature_dim " + std::to_string(model.score_model.net.input_size()) +
                     ", target world has " + std::to_string(target.spec.feature_dim));
  std::vector<DistrictId> ids;
  std::vector<double> truth;
  for (const auto& d : target.districts) {
    ids.push_back(d.id);
    truth.push_back(d.labels.at(indicator));
  }
  const std::vector<double> pred = predict_districts(model, ids, target);
  return correlation(truth, pred, CorrelationKind::spearman);
}

double transfer_eval(const World& source, const World& target, const std::string& indicator,
                     const PipelineConfig& config, std::uint64_t seed) {
  if (source.spec.feature_dim != target.spec.feature_dim)
    throw ShapeError("transfer: source and target feature dimensions differ");
  std::vector<DistrictId> ids;
  for (const auto& d : source.districts) ids.push_back(d.id);
  const MultiLevelModel model = train_pipeline(source, indicator, config, seed, ids);
  return transfer_spearman(model, target, indicator);
}

MatrixXd transfer_grid(std::span<const World> worlds, const std::string& indicator, const PipelineConfig& config,
                       std::uint64_t seed) {
  const Index n = Index(worlds.size());
  MatrixXd grid(n, n);
  for (Index s = 0; s < n; ++s) {
    const World& source = worlds[std::size_t(s)];
    std::vector<DistrictId> ids;
    for (const auto& d : source.districts) ids.push_back(d.id);
    const MultiLevelModel model = train_pipeline(source, indicator, config, derive_seed(seed, 51, std::uint64_t(s)), ids);
    for (Index t = 0; t < n; ++t) grid(s, t) = transfer_spearman(model, worlds[std::size_t(t)], indicator);
  }
  return grid;
}

// ---------------------------------------------------------------------------------------

TileLevelValues tile_level_values(const World& world, const MultiLevelModel& model,
                                  std::span<const DistrictId> districts) {
  std::vector<DistrictId> ids(districts.begin(), districts.end());
  if (ids.empty())
    for (const auto& d : world.districts) ids.push_back(d.id);
  std::vector<double> h;
  predict_districts(model, ids, world, &h);

  TileLevelValues out;
  std::vector<Tile> tiles;
  std::vector<double> factor;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const District& d = world.district(ids[k]);
    out.log_factor[d.id] = h[k];
    for (TileId t : d.tiles) {
      tiles.push_back(world.tile(t));
      factor.push_back(std::exp(h[k]));
    }
  }
  const VectorXd scores = model.score_model.score_batch(feature_matrix(tiles));
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const Tile& t = tiles[i];
    out.tiles.push_back(t.id);
    out.truth.push_back(std::max(0.0, t.true_score) * world.factors.at(std::size_t(t.district)));
    out.original.push_back(scores[Index(i)]);
    out.adjusted.push_back(scores[Index(i)] * factor[i]);
  }
  return out;
}

HyperlocalReport hyperlocal_eval(const World& world, const MultiLevelModel& model,
                                 std::span<const DistrictId> districts) {
  const TileLevelValues v = tile_level_values(world, model, districts);
  HyperlocalReport r;
  r.pearson_original = correlation(v.truth, v.original, CorrelationKind::pearson);
  r.pearson_adjusted = correlation(v.truth, v.adjusted, CorrelationKind::pearson);
  r.spearman_original = correlation(v.truth, v.original, CorrelationKind::spearman);
  r.spearman_adjusted = correlation(v.truth, v.adjusted, CorrelationKind::spearman);
  return r;
}

InequalityReport inequality_eval(const World& world, const MultiLevelModel& model, const InequalityOptions& options) {
  const TileLevelValues v = tile_level_values(world, model);
  InequalityReport report;
  std::map<DistrictId, std::vector<double>> per_district;
  std::vector<double> original, adjusted;
  for (std::size_t i = 0; i < v.tiles.size(); ++i) {
    const double f = std::max(0.0, v.original[i]);
    const DistrictId d = world.tile(v.tiles[i]).district;
    per_district[d].push_back(f);
    original.push_back(f);
    adjusted.push_back(f * std::exp(v.log_factor.at(d)));
  }
  for (const auto& [id, values] : per_district)
    report.district_gini[id] = in_stage(("district " + std::to_string(id)).c_str(), [&] { return gini(values); });

  std::vector<double> factors;
  for (const auto& [id, h] : v.log_factor) {
    const std::size_t copies = options.tile_replicated_factors ? world.district(id).tiles.size() : 1;
    factors.insert(factors.end(), copies, std::exp(h));
  }
  report.national_original = gini(original);
  report.national_factor = gini(factors);
  report.national_adjusted = gini(adjusted);
  return report;
}

OracleInequality oracle_inequality(const World& world) {
  OracleInequality out;
  std::vector<double> national;
  for (const auto& d : world.districts) {
    std::vector<double> values;
    for (TileId t : d.tiles) {
      const double s = std::max(0.0, world.tile(t).true_score);
      values.push_back(s);
      national.push_back(s * world.factors.at(std::size_t(d.id)));
    }
    out.district_gini[d.id] = gini(values);
  }
  out.national = gini(national);
  return out;
}

}  // namespace geolevels
