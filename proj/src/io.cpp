#include "geolevels/io.hpp"

#include "geolevels/error.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace geolevels {

namespace fs = std::filesystem;

namespace {

constexpr const char* kWorldFormat = "geolevels-world";

Json matrix_json(const MatrixXd& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

MatrixXd matrix_from(const Json& j) {
  const Index rows = j.at("rows").get<Index>();
  const Index cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || Index(data.size()) != rows * cols) throw ShapeError("stored matrix has inconsistent size");
  return Eigen::Map<const MatrixXd>(data.data(), rows, cols);
}

Json vector_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

VectorXd vector_from(const Json& j) {
  const auto data = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(data.data(), Index(data.size()));
}

/// Converts library-level parse failures inside a checkpoint or dataset into IO errors.
template <typename Fn>
auto decode(const std::string& what, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Json::exception& e) {
    throw CorruptionError(what + ": " + e.what());
  } catch (const DataError& e) {
    throw CorruptionError(what + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptionError(what + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------------------

void write_world(std::ostream& out, const World& world) {
  const Json header = {{"record", "header"},
                       {"format", kWorldFormat},
                       {"version", kWorldFormatVersion},
                       {"spec", to_json(world.spec)},
                       {"seed", world.seed},
                       {"n_tiles", world.tiles.size()},
                       {"n_districts", world.districts.size()}};
  out << header.dump() << '\n';
  for (const Tile& t : world.tiles) {
    Json rec = {{"record", "tile"},
                {"id", t.id},
                {"district", t.district},
                {"features", vector_json(t.features)},
                {"true_score", t.true_score},
                {"true_class", int(t.true_class)},
                {"proxy", t.proxy}};
    if (t.soft_label) rec["soft_label"] = {(*t.soft_label)[0], (*t.soft_label)[1], (*t.soft_label)[2]};
    out << rec.dump() << '\n';
  }
  for (std::size_t i = 0; i < world.districts.size(); ++i) {
    const District& d = world.districts[i];
    const Json rec = {{"record", "district"},     {"id", d.id},
                      {"tiles", d.tiles},         {"labels", d.labels},
                      {"factor", world.factors[i]}, {"mixture", world.mixtures[i]}};
    out << rec.dump() << '\n';
  }
}

World read_world(std::istream& in) {
  return decode("world dataset", [&] {
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty dataset");
    const Json header = Json::parse(line);
    if (header.at("record") != "header" || header.at("format") != kWorldFormat)
      throw DataError("missing dataset header");
    const int version = header.at("version").get<int>();
    if (version != kWorldFormatVersion)
      throw VersionError("world dataset version " + std::to_string(version) + ", expected " +
                         std::to_string(kWorldFormatVersion));
    World world;
    world.spec = world_spec_from_json(header.at("spec"));
    world.seed = header.at("seed").get<std::uint64_t>();
    const auto n_tiles = header.at("n_tiles").get<std::size_t>();
    const auto n_districts = header.at("n_districts").get<std::size_t>();

    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const Json rec = Json::parse(line);
      const std::string kind = rec.at("record").get<std::string>();
      if (kind == "tile") {
        Tile t;
        t.id = rec.at("id").get<TileId>();
        t.district = rec.at("district").get<DistrictId>();
        t.features = vector_from(rec.at("features"));
        t.true_score = rec.at("true_score").get<double>();
        const int cls = rec.at("true_class").get<int>();
        if (cls < 0 || cls > 2) throw DataError("tile class out of range");
        t.true_class = LandClass(cls);
        t.proxy = rec.at("proxy").get<double>();
        if (rec.contains("soft_label")) {
          const auto p = rec.at("soft_label").get<std::array<double, 3>>();
          t.soft_label = Eigen::Vector3d(p[0], p[1], p[2]);
        }
        if (t.id != TileId(world.tiles.size())) throw DataError("tile records are out of order");
        world.tiles.push_back(std::move(t));
      } else if (kind == "district") {
        District d;
        d.id = rec.at("id").get<DistrictId>();
        d.tiles = rec.at("tiles").get<std::vector<TileId>>();
        d.labels = rec.at("labels").get<std::map<std::string, double>>();
        if (d.id != DistrictId(world.districts.size())) throw DataError("district records are out of order");
        world.districts.push_back(std::move(d));
        world.factors.push_back(rec.at("factor").get<double>());
        world.mixtures.push_back(rec.at("mixture").get<std::array<double, 3>>());
      } else {
        throw DataError("unknown record type '" + kind + "'");
      }
    }
    if (world.tiles.size() != n_tiles || world.districts.size() != n_districts)
      throw DataError("dataset is truncated");
    for (const District& d : world.districts)
      for (TileId t : d.tiles)
        if (world.tile(t).district != d.id) throw DataError("tile " + std::to_string(t) + " is in the wrong district");
    return world;
  });
}

void save_world(const World& world, const std::string& path) {
  std::ostringstream out;
  write_world(out, world);
  write_file_atomic(path, out.str());
}

World load_world(const std::string& path) {
  std::istringstream in(read_file(path));
  return read_world(in);
}

// ---------------------------------------------------------------------------------------

Json to_json(const MlpParams& net) {
  Json layers = Json::array();
  for (std::size_t l = 0; l < net.layer_count(); ++l)
    layers.push_back({{"weight", matrix_json(net.layer(l).weight)}, {"bias", vector_json(net.layer(l).bias)}});
  return {{"sizes", net.layer_sizes()},
          {"activation", to_string(net.activation())},
          {"activate_output", net.activate_output()},
          {"layers", layers}};
}

MlpParams mlp_from_json(const Json& j) {
  MlpParams net(j.at("sizes").get<std::vector<int>>(), activation_from_string(j.at("activation").get<std::string>()),
                j.at("activate_output").get<bool>());
  const Json& layers = j.at("layers");
  if (layers.size() != net.layer_count()) throw ShapeError("stored network has the wrong layer count");
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    MatrixXd w = matrix_from(layers[l].at("weight"));
    VectorXd b = vector_from(layers[l].at("bias"));
    if (w.rows() != net.layer(l).weight.rows() || w.cols() != net.layer(l).weight.cols() ||
        b.size() != net.layer(l).bias.size())
      throw ShapeError("stored layer " + std::to_string(l) + " has the wrong shape");
    net.layer(l).weight = std::move(w);
    net.layer(l).bias = std::move(b);
  }
  return net;
}

Json to_json(const ScoreModel& model) {
  const OrdinalConfig& c = model.config;
  return {{"net", to_json(model.net)},
          {"ordinal",
           {{"t1", c.t1},
            {"t2", c.t2},
            {"t_min", c.t_min},
            {"t_max", c.t_max},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate}}}};
}

ScoreModel score_model_from_json(const Json& j) {
  ScoreModel m;
  m.net = mlp_from_json(j.at("net"));
  const Json& o = j.at("ordinal");
  m.config.t1 = o.at("t1").get<double>();
  m.config.t2 = o.at("t2").get<double>();
  m.config.t_min = o.at("t_min").get<double>();
  m.config.t_max = o.at("t_max").get<double>();
  m.config.epochs = o.at("epochs").get<int>();
  m.config.batch_size = o.at("batch_size").get<int>();
  m.config.learning_rate = o.at("learning_rate").get<double>();
  return m;
}

Json to_json(const Encoder& e) {
  return {{"body", to_json(e.body)},
          {"cluster_head", matrix_json(e.cluster_head)},
          {"n_clusters", e.n_clusters},
          {"source", to_string(e.source)}};
}

Encoder encoder_from_json(const Json& j) {
  Encoder e;
  e.body = mlp_from_json(j.at("body"));
  e.cluster_head = matrix_from(j.at("cluster_head"));
  e.n_clusters = j.at("n_clusters").get<int>();
  e.source = encoder_source_from_string(j.at("source").get<std::string>());
  return e;
}

Json to_json(const MultiLevelModel& model) {
  Json members = Json::array();
  for (const auto& m : model.members)
    members.push_back({{"encoder", to_json(m.encoder)},
                       {"pca",
                        {{"mean", vector_json(m.pca.mean)},
                         {"components", matrix_json(m.pca.components)},
                         {"explained_ratio", vector_json(m.pca.explained_ratio)}}}});
  Json trees = Json::array();
  for (const auto& tree : model.forest.trees) {
    std::vector<int> feature, left, right;
    std::vector<double> threshold, value;
    for (const auto& n : tree.nodes) {
      feature.push_back(n.feature);
      threshold.push_back(n.threshold);
      left.push_back(n.left);
      right.push_back(n.right);
      value.push_back(n.value);
    }
    trees.push_back(
        {{"feature", feature}, {"threshold", threshold}, {"left", left}, {"right", right}, {"value", value}});
  }
  const ForestConfig& fc = model.forest.config;
  return {{"score_model", to_json(model.score_model)},
          {"members", members},
          {"forest",
           {{"config",
             {{"n_trees", fc.n_trees},
              {"max_depth", fc.max_depth},
              {"min_leaf", fc.min_leaf},
              {"feature_fraction", fc.feature_fraction},
              {"bootstrap", fc.bootstrap}}},
            {"input_dim", model.forest.input_dim},
            {"tree_seeds", model.forest.tree_seeds},
            {"trees", trees}}},
          {"eps", model.eps},
          {"hyperlocal", model.hyperlocal}};
}

MultiLevelModel model_from_json(const Json& j) {
  MultiLevelModel model;
  model.score_model = score_model_from_json(j.at("score_model"));
  for (const Json& m : j.at("members")) {
    EnsembleMember member;
    member.encoder = encoder_from_json(m.at("encoder"));
    const Json& pca = m.at("pca");
    member.pca.mean = vector_from(pca.at("mean"));
    member.pca.components = matrix_from(pca.at("components"));
    member.pca.explained_ratio = vector_from(pca.at("explained_ratio"));
    model.members.push_back(std::move(member));
  }
  const Json& forest = j.at("forest");
  const Json& fc = forest.at("config");
  model.forest.config.n_trees = fc.at("n_trees").get<int>();
  model.forest.config.max_depth = fc.at("max_depth").get<int>();
  model.forest.config.min_leaf = fc.at("min_leaf").get<int>();
  model.forest.config.feature_fraction = fc.at("feature_fraction").get<double>();
  model.forest.config.bootstrap = fc.at("bootstrap").get<bool>();
  model.forest.input_dim = forest.at("input_dim").get<int>();
  model.forest.tree_seeds = forest.at("tree_seeds").get<std::vector<std::uint64_t>>();
  for (const Json& t : forest.at("trees")) {
    const auto feature = t.at("feature").get<std::vector<int>>();
    const auto threshold = t.at("threshold").get<std::vector<double>>();
    const auto left = t.at("left").get<std::vector<int>>();
    const auto right = t.at("right").get<std::vector<int>>();
    const auto value = t.at("value").get<std::vector<double>>();
    const std::size_t n = feature.size();
    if (threshold.size() != n || left.size() != n || right.size() != n || value.size() != n)
      throw ShapeError("stored tree arrays differ in length");
    RegressionTree tree;
    for (std::size_t i = 0; i < n; ++i) {
      const bool leaf = feature[i] < 0;
      if (!leaf && (feature[i] >= model.forest.input_dim || left[i] <= int(i) || right[i] <= int(i) ||
                    left[i] >= int(n) || right[i] >= int(n)))
        throw DataError("stored tree has an invalid node");
      tree.nodes.push_back({feature[i], threshold[i], left[i], right[i], value[i]});
    }
    if (tree.nodes.empty()) throw DataError("stored tree is empty");
    model.forest.trees.push_back(std::move(tree));
  }
  model.eps = j.at("eps").get<double>();
  model.hyperlocal = j.at("hyperlocal").get<bool>();
  return model;
}

std::string checkpoint_text(const std::string& format, const Json& payload) {
  Json body = {{"format", format}, {"version", kCheckpointFormatVersion}, {"payload", payload}};
  const std::string checksum = hex64(fnv1a64(body.dump()));
  body["checksum"] = checksum;
  return body.dump() + "\n";
}

Json parse_checkpoint(const std::string& text, const std::string& format) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw CorruptionError(std::string("unparseable checkpoint: ") + e.what());
  }
  if (!j.is_object() || !j.contains("checksum") || !j.contains("format") || !j.contains("version") ||
      !j.contains("payload") || j.size() != 4)
    throw CorruptionError("checkpoint is missing fields");
  const Json body = {{"format", j["format"]}, {"version", j["version"]}, {"payload", j["payload"]}};
  if (!j["checksum"].is_string() || j["checksum"].get<std::string>() != hex64(fnv1a64(body.dump())))
    throw CorruptionError("checksum mismatch");
  if (j["format"] != format) throw CorruptionError("expected a '" + format + "' checkpoint");
  if (!j["version"].is_number_integer() || j["version"].get<int>() != kCheckpointFormatVersion)
    throw VersionError("checkpoint format version " + j["version"].dump() + ", this build reads " +
                       std::to_string(kCheckpointFormatVersion));
  return j["payload"];
}

void save_score_model(const ScoreModel& model, const std::string& path) {
  write_file_atomic(path, checkpoint_text("geolevels-score-model", to_json(model)));
}

ScoreModel load_score_model(const std::string& path) {
  const Json payload = parse_checkpoint(read_file(path), "geolevels-score-model");
  return decode("score model checkpoint", [&] { return score_model_from_json(payload); });
}

void save_encoder(const Encoder& encoder, const std::string& path) {
  write_file_atomic(path, checkpoint_text("geolevels-encoder", to_json(encoder)));
}

Encoder load_encoder(const std::string& path) {
  const Json payload = parse_checkpoint(read_file(path), "geolevels-encoder");
  return decode("encoder checkpoint", [&] { return encoder_from_json(payload); });
}

void save_model(const MultiLevelModel& model, const std::string& path) {
  write_file_atomic(path, checkpoint_text("geolevels-model", to_json(model)));
}

MultiLevelModel load_model(const std::string& path) {
  const Json payload = parse_checkpoint(read_file(path), "geolevels-model");
  return decode("model checkpoint", [&] { return model_from_json(payload); });
}

StageModels stages_of(const MultiLevelModel& model) {
  StageModels stages;
  stages.score_model = model.score_model;
  for (const auto& m : model.members) stages.encoders.push_back(m.encoder);
  return stages;
}

// ---------------------------------------------------------------------------------------

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("cannot read '" + path + "'");
  return buf.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + target.parent_path().string() + "': " + ec.message());
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(content.data(), std::streamsize(content.size()));
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move '" + tmp.string() + "' to '" + path + "'");
  }
}

std::string file_checksum(const std::string& path) { return hex64(fnv1a64(read_file(path))); }

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header.size()) throw ShapeError("CSV row width differs from the header");
  rows.push_back(std::move(row));
}

std::string CsvTable::to_string() const {
  std::string out;
  auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  emit(header);
  for (const auto& r : rows) emit(r);
  return out;
}

}  // namespace geolevels
