// geolevels: command-line driver for world generation, training and the evaluation harnesses.

#include "geolevels/analysis.hpp"
#include "geolevels/config.hpp"
#include "geolevels/error.hpp"
#include "geolevels/io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace geolevels;

namespace {

struct Invocation {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
};

/// Collects artifacts in memory; nothing touches disk until every result is computed.
class RunOutput {
 public:
  void add(const std::string& name, std::string content) { files_[name] = std::move(content); }
  void add_json(const std::string& name, const Json& j) { add(name, j.dump(2) + "\n"); }

  void commit(const Invocation& inv, const RunConfig& config) const {
    const fs::path dir(inv.out);
    if (fs::exists(dir / "manifest.json"))
      throw IoError("output directory '" + inv.out + "' already holds a run; outputs are write-once");
    for (const auto& [name, _] : files_)
      if (fs::exists(dir / name)) throw IoError("refusing to overwrite '" + (dir / name).string() + "'");

    Json artifacts = Json::object();
    for (const auto& [name, content] : files_) {
      write_file_atomic((dir / name).string(), content);
      artifacts[name] = hex64(fnv1a64(content));
    }
    const Json cfg = to_json(config);
    const Json manifest = {{"tool", "geolevels"},
                           {"manifest_version", 1},
                           {"command", inv.command},
                           {"seed", inv.seed},
                           {"config", cfg},
                           {"config_fingerprint", hex64(fnv1a64(cfg.dump()))},
                           {"artifacts", artifacts}};
    write_file_atomic((dir / "manifest.json").string(), manifest.dump(2) + "\n");
  }

 private:
  std::map<std::string, std::string> files_;
};

void log(const std::string& msg) { std::cerr << "geolevels: " << msg << std::endl; }

std::string fmt(double v) { return format_double(v); }

World load_or_generate(const RunConfig& config, std::uint64_t seed) {
  if (!config.dataset.empty()) {
    log("loading world " + config.dataset);
    return load_world(config.dataset);
  }
  return generate_world(config.world, config.world_seed.value_or(seed));
}

std::vector<DistrictId> all_ids(const World& world) {
  std::vector<DistrictId> ids;
  for (const auto& d : world.districts) ids.push_back(d.id);
  return ids;
}

Json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"median", s.median}, {"min", s.min}, {"max", s.max}};
}

MultiLevelModel require_checkpoint(const RunConfig& config, const std::string& command) {
  if (config.checkpoint.empty()) throw ConfigError(command + " needs a 'checkpoint' in the config");
  return load_model(config.checkpoint);
}

// ---------------------------------------------------------------------------------------

void cmd_gen(const Invocation& inv, const RunConfig& config, RunOutput& out) {
  const World world = load_or_generate(config, inv.seed);
  std::ostringstream text;
  write_world(text, world);
  out.add("world.jsonl", text.str());
  log("generated " + std::to_string(world.districts.size()) + " districts, " + std::to_string(world.tiles.size()) +
      " tiles");
}

void cmd_train(const Invocation& inv, const RunConfig& config, RunOutput& out) {
  const World world = load_or_generate(config, inv.seed);
  std::vector<DistrictId> train = all_ids(world);
  std::vector<DistrictId> test;
  if (config.train_fraction < 1.0) {
    DistrictSplit split = split_districts(train, config.train_fraction, derive_seed(inv.seed, 61));
    train = std::move(split.train);
    test = std::move(split.test);
  }
  ScalingReport report;
  const MultiLevelModel model = train_pipeline(world, config.indicator, config.pipeline, inv.seed, train, &report);
  out.add("model.json", checkpoint_text("geolevels-model", to_json(model)));

  CsvTable table{{"district_id", "split", "truth", "prediction"}, {}};
  const std::vector<DistrictId> ids = all_ids(world);
  const std::vector<double> pred = predict_districts(model, ids, world);
  std::set<DistrictId> held_out(test.begin(), test.end());
  for (std::size_t i = 0; i < ids.size(); ++i)
    table.add_row({std::to_string(ids[i]), held_out.count(ids[i]) ? "test" : "train",
                   fmt(world.district(ids[i]).labels.at(config.indicator)), fmt(pred[i])});
  out.add("predictions.csv", table.to_string());
  out.add_json("training.json", {{"training_districts", train.size()},
                                 {"test_districts", test.size()},
                                 {"training_entries", report.training_entries},
                                 {"guarded_targets", report.guarded_targets},
                                 {"explained_variance", report.explained_variance},
                                 {"representation_length", model.representation_length()}});
  log("trained on " + std::to_string(train.size()) + " districts");
}

void cmd_predict(const Invocation& inv, const RunConfig& config, RunOutput& out) {
  const MultiLevelModel model = require_checkpoint(config, "predict");
  const World world = load_or_generate(config, inv.seed);
  const std::vector<DistrictId> ids = all_ids(world);
  std::vector<double> h;
  const std::vector<double> pred = predict_districts(model, ids, world, &h);
  CsvTable districts{{"district_id", "truth", "prediction", "log_factor"}, {}};
  for (std::size_t i = 0; i < ids.size(); ++i)
    districts.add_row({std::to_string(ids[i]), fmt(world.district(ids[i]).labels.at(config.indicator)), fmt(pred[i]),
                       fmt(h[i])});
  out.add("predictions.csv", districts.to_string());

  const TileLevelValues tiles = tile_level_values(world, model);
  CsvTable tile_table{{"tile_id", "district_id", "truth", "original", "adjusted"}, {}};
  for (std::size_t i = 0; i < tiles.tiles.size(); ++i)
    tile_table.add_row({std::to_string(tiles.tiles[i]), std::to_string(world.tile(tiles.tiles[i]).district),
                        fmt(tiles.truth[i]), fmt(tiles.original[i]), fmt(tiles.adjusted[i])});
  out.add("tile_scores.csv", tile_table.to_string());

  const HyperlocalReport hl = hyperlocal_eval(world, model);
  out.add_json("hyperlocal.json", {{"pearson_original", hl.pearson_original},
                                   {"pearson_adjusted", hl.pearson_adjusted},
                                   {"spearman_original", hl.spearman_original},
                                   {"spearman_adjusted", hl.spearman_adjusted}});
}

void cmd_evaluate(const Invocation& inv, const RunConfig& config, RunOutput& out) {
  std::optional<StageModels> stages;
  if (!config.checkpoint.empty()) stages = stages_of(load_model(config.checkpoint));
  const World world = load_or_generate(config, inv.seed);
  log("evaluating " + std::to_string(config.evaluate.repetitions) + " repetitions");
  const EvalReport report =
      evaluate(world, config.indicator, config.pipeline, config.evaluate, inv.seed, stages ? &*stages : nullptr);
  CsvTable table{{"repetition", "r2", "train_districts", "test_districts", "guarded_targets"}, {}};
  for (const auto& r : report.repetitions)
    table.add_row({std::to_string(r.repetition), fmt(r.r2), std::to_string(r.train_districts),
                   std::to_string(r.test_districts), std::to_string(r.guarded_targets)});
  out.add("evaluate.csv", table.to_string());
  out.add_json("summary.json", {{"repetitions", report.repetitions.size()},
                                {"r2", summary_json(report.r2)},
                                {"guarded_targets", report.guarded_targets},
                                {"fingerprint", report.fingerprint},
                                {"stages_from_checkpoint", stages.has_value()}});
  log("median R2 " + fmt(report.r2.median));
}

void cmd_robustness(const Invocation& inv, const RunConfig& config, RunOutput& out) {
  const World world = load_or_generate(config, inv.seed);
  const StageModels stages = shared_stages(world, config.pipeline, inv.seed);
  CsvTable table{{"augmentation", "train_fraction", "repetition", "r2"}, {}};
  Json summary = Json::array();
  for (bool augment : {true, false}) {
    const auto curve = robustness_curve(world, config.indicator, config.pipeline, config.robustness.fractions, augment,
                                        config.robustness.repetitions, inv.seed, &stages);
    for (const auto& point : curve) {
      for (const auto& r : point.report.repetitions)
        table.add_row({augment ? "on" : "off", fmt(point.train_fraction), std::to_string(r.repetition), fmt(r.r2)});
      summary.push_back({{"augmentation", augment},
                         {"train_fraction", point.train_fraction},
                         {"r2", summary_json(point.report.r2)}});
      log(std::string("augmentation ") + (augment ? "on" : "off") + " fraction " + fmt(point.train_fraction) +
          " median R2 " + fmt(point.report.r2.median));
    }
  }
  out.add("robustness.csv", table.to_string());
  out.add_json("summary.json", summary);
}

void cmd_transfer(const Invocation& inv, const RunConfig& config, RunOutput& out) {
  std::vector<World> worlds;
  for (const auto& tw : config.transfer.worlds) {
    WorldSpec spec = config.world;
    if (tw.class_mixture) spec.class_mixture = *tw.class_mixture;
    worlds.push_back(generate_world(spec, tw.seed));
  }
  const MatrixXd grid = transfer_grid(worlds, config.indicator, config.pipeline, inv.seed);
  CsvTable table{{"source_seed", "target_seed", "spearman"}, {}};
  Json rows = Json::array();
  for (Index s = 0; s < grid.rows(); ++s) {
    std::vector<double> off;
    for (Index t = 0; t < grid.cols(); ++t) {
      table.add_row({std::to_string(worlds[std::size_t(s)].seed), std::to_string(worlds[std::size_t(t)].seed),
                     fmt(grid(s, t))});
      if (t != s) off.push_back(grid(s, t));
    }
    rows.push_back({{"source_seed", worlds[std::size_t(s)].seed},
                    {"self", grid(s, s)},
                    {"off_diagonal_median", summarize_values(off).median}});
  }
  out.add("transfer.csv", table.to_string());
  out.add_json("summary.json", rows);
}

void cmd_inequality(const Invocation& inv, const RunConfig& config, RunOutput& out) {
  CsvTable national{{"world_seed", "original", "factor", "adjusted", "oracle"}, {}};
  CsvTable districts{{"world_seed", "district_id", "gini", "oracle_gini"}, {}};
  std::vector<double> orig, fac, adj, oracle;
  InequalityOptions options;
  options.tile_replicated_factors = config.inequality.tile_replicated_factors;
  for (std::size_t w = 0; w < config.inequality.world_seeds.size(); ++w) {
    const std::uint64_t world_seed = config.inequality.world_seeds[w];
    const World world = generate_world(config.world, world_seed);
    std::vector<DistrictId> train = all_ids(world);
    if (config.inequality.train_fraction < 1.0)
      train = split_districts(train, config.inequality.train_fraction, derive_seed(inv.seed, 71, w)).train;
    const MultiLevelModel model =
        train_pipeline(world, config.indicator, config.pipeline, derive_seed(inv.seed, 72, w), train);
    const InequalityReport rep = inequality_eval(world, model, options);
    const OracleInequality truth = oracle_inequality(world);
    national.add_row({std::to_string(world_seed), fmt(rep.national_original), fmt(rep.national_factor),
                      fmt(rep.national_adjusted), fmt(truth.national)});
    for (const auto& [id, g] : rep.district_gini)
      districts.add_row({std::to_string(world_seed), std::to_string(id), fmt(g), fmt(truth.district_gini.at(id))});
    orig.push_back(rep.national_original);
    fac.push_back(rep.national_factor);
    adj.push_back(rep.national_adjusted);
    oracle.push_back(truth.national);
    log("world " + std::to_string(world_seed) + " done");
  }
  out.add("inequality.csv", national.to_string());
  out.add("district_gini.csv", districts.to_string());
  out.add_json("summary.json", {{"pearson_vs_oracle",
                                 {{"original", correlation(orig, oracle, CorrelationKind::pearson)},
                                  {"factor", correlation(fac, oracle, CorrelationKind::pearson)},
                                  {"adjusted", correlation(adj, oracle, CorrelationKind::pearson)}}}});
}

void cmd_zipf(const Invocation& inv, const RunConfig& config, RunOutput& out) {
  const World world = load_or_generate(config, inv.seed);
  std::map<std::string, std::vector<double>> series{{"latent_factor", world.factors}};
  if (!config.checkpoint.empty()) {
    const MultiLevelModel model = load_model(config.checkpoint);
    std::vector<double> h;
    predict_districts(model, all_ids(world), world, &h);
    for (double& v : h) v = std::exp(v);
    series["predicted_factor"] = h;
  }
  CsvTable table{{"series", "rank", "value", "log_rank", "log_value"}, {}};
  Json summary = Json::object();
  for (const auto& [name, values] : series) {
    const ZipfFit fit = zipf_fit(values, config.zipf.top_quantile);
    for (std::size_t r = 0; r < fit.log_rank.size(); ++r)
      table.add_row({name, std::to_string(r + 1), fmt(std::exp(fit.log_value[r])), fmt(fit.log_rank[r]),
                     fmt(fit.log_value[r])});
    summary[name] = {{"slope", fit.slope},
                     {"intercept", fit.intercept},
                     {"r_squared", fit.r_squared},
                     {"points", fit.log_rank.size()}};
  }
  out.add("zipf.csv", table.to_string());
  out.add_json("summary.json", summary);
}

int run(const Invocation& inv) {
  const RunConfig config = load_run_config(inv.config_path);
  if (fs::exists(fs::path(inv.out) / "manifest.json"))
    throw IoError("output directory '" + inv.out + "' already holds a run; outputs are write-once");
  RunOutput out;
  static const std::map<std::string, void (*)(const Invocation&, const RunConfig&, RunOutput&)> commands{
      {"gen", cmd_gen},           {"train", cmd_train},         {"predict", cmd_predict},
      {"evaluate", cmd_evaluate}, {"robustness", cmd_robustness}, {"transfer", cmd_transfer},
      {"inequality", cmd_inequality}, {"zipf", cmd_zipf}};
  commands.at(inv.command)(inv, config, out);
  out.commit(inv, config);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-level economic indicator estimation on synthetic worlds"};
  app.require_subcommand(1);
  Invocation inv;
  for (const char* name : {"gen", "train", "predict", "evaluate", "robustness", "transfer", "inequality", "zipf"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", inv.config_path, "JSON run configuration")->required();
    sub->add_option("--seed", inv.seed, "master seed")->required();
    sub->add_option("--out", inv.out, "output directory")->required();
    sub->callback([&inv, name] { inv.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(Error::Category::config);
  }

  try {
    return run(inv);
  } catch (const Error& e) {
    static const char* names[] = {"", "", "config", "data", "divergence", "io"};
    std::cerr << "geolevels: " << names[e.exit_code()] << " error: " << e.what() << std::endl;
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "geolevels: io error: " << e.what() << std::endl;
    return static_cast<int>(Error::Category::io);
  }
}
