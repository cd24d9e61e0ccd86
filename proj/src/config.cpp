#include "geolevels/config.hpp"

#include "geolevels/error.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace geolevels {

namespace {

/// Reads the keys of one JSON object into existing values, remembering which keys were
/// consumed so leftovers can be reported.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!take(key)) return;
    out = convert<T>(j_.at(key), path(key));
  }

  template <typename Fn>
  void object(const char* key, Fn&& fn) {
    if (!take(key)) return;
    ObjectReader sub(j_.at(key), path(key));
    fn(sub);
    sub.finish();
  }

  bool has(const char* key) const { return j_.contains(key); }
  const Json& raw(const char* key) {
    take(key);
    return j_.at(key);
  }
  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + path(it.key()) + "'");
  }

  template <typename T>
  static T convert(const Json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<std::int64_t>() < 0) throw ConfigError(where + ": expected a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
      return v.get<std::string>();
    } else {
      // sequences: std::vector<U> or std::array<U, N>
      if (!v.is_array()) throw ConfigError(where + ": expected an array");
      T out{};
      if constexpr (requires { out.push_back(typename T::value_type{}); }) {
        for (std::size_t i = 0; i < v.size(); ++i)
          out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      } else {
        if (v.size() != out.size())
          throw ConfigError(where + ": expected " + std::to_string(out.size()) + " entries");
        for (std::size_t i = 0; i < v.size(); ++i)
          out[i] = convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]");
      }
      return out;
    }
  }

 private:
  bool take(const char* key) {
    if (!j_.contains(key)) return false;
    seen_.insert(key);
    return true;
  }

  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename Fn>
auto rethrow_as_config(const std::string& where, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------------------

Json to_json(const WorldSpec& s) {
  Json ranges = Json::array();
  for (const auto& r : s.score_ranges) ranges.push_back({r.lo, r.hi});
  return {{"n_districts", s.n_districts},
          {"tiles_per_district", {s.tiles_min, s.tiles_max}},
          {"feature_dim", s.feature_dim},
          {"class_mixture", s.class_mixture},
          {"agglomeration", s.agglomeration},
          {"intensity_cap", s.intensity_cap},
          {"intensity_concentration", s.intensity_concentration},
          {"mixture_concentration", s.mixture_concentration},
          {"score_ranges", ranges},
          {"pareto_alpha", s.pareto_alpha},
          {"pareto_scale", s.pareto_scale},
          {"feature_noise", s.feature_noise},
          {"proxy_noise", s.proxy_noise},
          {"label_flip", s.label_flip},
          {"annotator_noise", s.annotator_noise},
          {"embedding_seed", s.embedding_seed}};
}

WorldSpec world_spec_from_json(const Json& j) {
  WorldSpec s;
  ObjectReader r(j, "world");
  r.get("n_districts", s.n_districts);
  if (r.has("tiles_per_district")) {
    const auto range = ObjectReader::convert<std::array<int, 2>>(r.raw("tiles_per_district"), "world.tiles_per_district");
    s.tiles_min = range[0];
    s.tiles_max = range[1];
  }
  r.get("feature_dim", s.feature_dim);
  r.get("class_mixture", s.class_mixture);
  r.get("agglomeration", s.agglomeration);
  r.get("intensity_cap", s.intensity_cap);
  r.get("intensity_concentration", s.intensity_concentration);
  r.get("mixture_concentration", s.mixture_concentration);
  if (r.has("score_ranges")) {
    const auto ranges =
        ObjectReader::convert<std::array<std::array<double, 2>, 3>>(r.raw("score_ranges"), "world.score_ranges");
    for (std::size_t k = 0; k < 3; ++k) s.score_ranges[k] = {ranges[k][0], ranges[k][1]};
  }
  r.get("pareto_alpha", s.pareto_alpha);
  r.get("pareto_scale", s.pareto_scale);
  r.get("feature_noise", s.feature_noise);
  r.get("proxy_noise", s.proxy_noise);
  r.get("label_flip", s.label_flip);
  r.get("annotator_noise", s.annotator_noise);
  r.get("embedding_seed", s.embedding_seed);
  r.finish();
  s.validate();
  return s;
}

Json to_json(const PipelineConfig& c) {
  Json members = Json::array();
  for (const auto& m : c.members) members.push_back({{"source", to_string(m.source)}, {"n_clusters", m.n_clusters}});
  return {
      {"n_labels", c.n_labels},
      {"ordinal",
       {{"t1", c.ordinal.t1},
        {"t2", c.ordinal.t2},
        {"t_min", c.ordinal.t_min},
        {"t_max", c.ordinal.t_max},
        {"epochs", c.ordinal.epochs},
        {"batch_size", c.ordinal.batch_size},
        {"learning_rate", c.ordinal.learning_rate}}},
      {"network", {{"hidden", c.shape.hidden}, {"activation", to_string(c.shape.activation)}}},
      {"encoder",
       {{"epochs", c.encoder.epochs},
        {"labeled_batch", c.encoder.labeled_batch},
        {"unlabeled_batch", c.encoder.unlabeled_batch},
        {"proxy_batch", c.encoder.proxy_batch},
        {"lambda", c.encoder.lambda},
        {"learning_rate", c.encoder.learning_rate},
        {"proxy_cluster_loss", c.encoder.proxy_cluster_loss}}},
      {"members", members},
      {"pca_components", c.pca_components},
      {"forest",
       {{"n_trees", c.forest.n_trees},
        {"max_depth", c.forest.max_depth},
        {"min_leaf", c.forest.min_leaf},
        {"feature_fraction", c.forest.feature_fraction},
        {"bootstrap", c.forest.bootstrap}}},
      {"augment", c.augment},
      {"max_pairs", c.max_pairs},
      {"eps", c.eps},
      {"ablations",
       {{"no_ensemble", c.ablations.no_ensemble},
        {"no_finetune", c.ablations.no_finetune},
        {"no_hyperlocal", c.ablations.no_hyperlocal}}},
  };
}

PipelineConfig pipeline_config_from_json(const Json& j) {
  PipelineConfig c;
  ObjectReader r(j, "pipeline");
  r.get("n_labels", c.n_labels);
  r.object("ordinal", [&](ObjectReader& o) {
    o.get("t1", c.ordinal.t1);
    o.get("t2", c.ordinal.t2);
    o.get("t_min", c.ordinal.t_min);
    o.get("t_max", c.ordinal.t_max);
    o.get("epochs", c.ordinal.epochs);
    o.get("batch_size", c.ordinal.batch_size);
    o.get("learning_rate", c.ordinal.learning_rate);
  });
  r.object("network", [&](ObjectReader& o) {
    o.get("hidden", c.shape.hidden);
    std::string act = to_string(c.shape.activation);
    o.get("activation", act);
    c.shape.activation = rethrow_as_config("pipeline.network.activation", [&] { return activation_from_string(act); });
  });
  r.object("encoder", [&](ObjectReader& o) {
    o.get("epochs", c.encoder.epochs);
    o.get("labeled_batch", c.encoder.labeled_batch);
    o.get("unlabeled_batch", c.encoder.unlabeled_batch);
    o.get("proxy_batch", c.encoder.proxy_batch);
    o.get("lambda", c.encoder.lambda);
    o.get("learning_rate", c.encoder.learning_rate);
    o.get("proxy_cluster_loss", c.encoder.proxy_cluster_loss);
  });
  if (r.has("members")) {
    const Json& arr = r.raw("members");
    if (!arr.is_array()) throw ConfigError("pipeline.members: expected an array");
    c.members.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ObjectReader m(arr[i], "pipeline.members[" + std::to_string(i) + "]");
      MemberSpec spec;
      std::string source = to_string(spec.source);
      m.get("source", source);
      spec.source = rethrow_as_config(m.path("source"), [&] { return encoder_source_from_string(source); });
      m.get("n_clusters", spec.n_clusters);
      m.finish();
      c.members.push_back(spec);
    }
  }
  r.get("pca_components", c.pca_components);
  r.object("forest", [&](ObjectReader& o) {
    o.get("n_trees", c.forest.n_trees);
    o.get("max_depth", c.forest.max_depth);
    o.get("min_leaf", c.forest.min_leaf);
    o.get("feature_fraction", c.forest.feature_fraction);
    o.get("bootstrap", c.forest.bootstrap);
  });
  r.get("augment", c.augment);
  r.get("max_pairs", c.max_pairs);
  r.get("eps", c.eps);
  r.object("ablations", [&](ObjectReader& o) {
    o.get("no_ensemble", c.ablations.no_ensemble);
    o.get("no_finetune", c.ablations.no_finetune);
    o.get("no_hyperlocal", c.ablations.no_hyperlocal);
  });
  r.finish();
  rethrow_as_config("pipeline", [&] { c.validate(); });
  return c;
}

Json to_json(const EvalOptions& o) {
  return {{"repetitions", o.repetitions}, {"train_fraction", o.train_fraction}, {"share_stages", o.share_stages}};
}

EvalOptions eval_options_from_json(const Json& j) {
  EvalOptions o;
  ObjectReader r(j, "evaluate");
  r.get("repetitions", o.repetitions);
  r.get("train_fraction", o.train_fraction);
  r.get("share_stages", o.share_stages);
  r.finish();
  if (o.repetitions <= 0) throw ConfigError("evaluate.repetitions must be positive");
  if (!(o.train_fraction > 0.0 && o.train_fraction < 1.0))
    throw ConfigError("evaluate.train_fraction must lie in (0, 1)");
  return o;
}

// ---------------------------------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[std::size_t(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

std::string run_fingerprint(const WorldSpec& spec, std::uint64_t world_seed, const std::string& indicator,
                            const PipelineConfig& config, const EvalOptions& options, std::uint64_t seed) {
  const Json j = {{"world", to_json(spec)},     {"world_seed", world_seed}, {"indicator", indicator},
                  {"pipeline", to_json(config)}, {"evaluate", to_json(options)}, {"seed", seed}};
  return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------------------

void RunConfig::validate() const {
  world.validate();
  indicator_is_extensive(indicator);
  pipeline.validate();
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction must lie in (0, 1]");
  if (evaluate.repetitions <= 0) throw ConfigError("evaluate.repetitions must be positive");
  if (robustness.fractions.empty()) throw ConfigError("robustness.fractions must not be empty");
  for (double f : robustness.fractions)
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("robustness.fractions must lie in (0, 1)");
  if (robustness.repetitions <= 0) throw ConfigError("robustness.repetitions must be positive");
  if (transfer.worlds.size() < 2) throw ConfigError("transfer.worlds needs at least 2 worlds");
  if (inequality.world_seeds.size() < 2) throw ConfigError("inequality.world_seeds needs at least 2 worlds");
  if (!(inequality.train_fraction > 0.0 && inequality.train_fraction <= 1.0))
    throw ConfigError("inequality.train_fraction must lie in (0, 1]");
  if (!(zipf.top_quantile > 0.0 && zipf.top_quantile <= 1.0)) throw ConfigError("zipf.top_quantile must lie in (0, 1]");
}

Json to_json(const RunConfig& c) {
  Json transfer = Json::array();
  for (const auto& w : c.transfer.worlds) {
    Json entry = {{"seed", w.seed}};
    if (w.class_mixture) entry["class_mixture"] = *w.class_mixture;
    transfer.push_back(entry);
  }
  Json j = {{"world", to_json(c.world)},
            {"indicator", c.indicator},
            {"pipeline", to_json(c.pipeline)},
            {"train_fraction", c.train_fraction},
            {"evaluate", to_json(c.evaluate)},
            {"robustness", {{"fractions", c.robustness.fractions}, {"repetitions", c.robustness.repetitions}}},
            {"transfer", {{"worlds", transfer}}},
            {"inequality",
             {{"world_seeds", c.inequality.world_seeds},
              {"tile_replicated_factors", c.inequality.tile_replicated_factors},
              {"train_fraction", c.inequality.train_fraction}}},
            {"zipf", {{"top_quantile", c.zipf.top_quantile}}}};
  if (c.world_seed) j["world_seed"] = *c.world_seed;
  if (!c.dataset.empty()) j["dataset"] = c.dataset;
  if (!c.checkpoint.empty()) j["checkpoint"] = c.checkpoint;
  return j;
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  ObjectReader r(j, "");
  if (r.has("world")) c.world = world_spec_from_json(r.raw("world"));
  if (r.has("world_seed")) c.world_seed = ObjectReader::convert<std::uint64_t>(r.raw("world_seed"), "world_seed");
  r.get("dataset", c.dataset);
  r.get("indicator", c.indicator);
  if (r.has("pipeline")) c.pipeline = pipeline_config_from_json(r.raw("pipeline"));
  r.get("checkpoint", c.checkpoint);
  r.get("train_fraction", c.train_fraction);
  if (r.has("evaluate")) c.evaluate = eval_options_from_json(r.raw("evaluate"));
  r.object("robustness", [&](ObjectReader& o) {
    o.get("fractions", c.robustness.fractions);
    o.get("repetitions", c.robustness.repetitions);
  });
  r.object("transfer", [&](ObjectReader& o) {
    if (!o.has("worlds")) return;
    const Json& arr = o.raw("worlds");
    if (!arr.is_array()) throw ConfigError("transfer.worlds: expected an array");
    c.transfer.worlds.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ObjectReader w(arr[i], "transfer.worlds[" + std::to_string(i) + "]");
      TransferWorld tw;
      w.get("seed", tw.seed);
      if (w.has("class_mixture"))
        tw.class_mixture = ObjectReader::convert<std::array<double, 3>>(w.raw("class_mixture"), w.path("class_mixture"));
      w.finish();
      c.transfer.worlds.push_back(tw);
    }
  });
  r.object("inequality", [&](ObjectReader& o) {
    o.get("world_seeds", c.inequality.world_seeds);
    o.get("tile_replicated_factors", c.inequality.tile_replicated_factors);
    o.get("train_fraction", c.inequality.train_fraction);
  });
  r.object("zipf", [&](ObjectReader& o) { o.get("top_quantile", c.zipf.top_quantile); });
  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  namespace fs = std::filesystem;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  const fs::path base = fs::absolute(fs::path(path)).parent_path();
  for (std::string* ref : {&c.dataset, &c.checkpoint}) {
    if (ref->empty()) continue;
    fs::path p(*ref);
    if (p.is_relative()) p = base / p;
    if (!fs::exists(p)) throw IoError("referenced file '" + p.string() + "' does not exist");
    *ref = p.lexically_normal().string();
  }
  return c;
}

}  // namespace geolevels
