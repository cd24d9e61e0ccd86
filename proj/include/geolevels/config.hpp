#pragma once

#include "geolevels/analysis.hpp"
#include "geolevels/scaling.hpp"
#include "geolevels/synthworld.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace geolevels {

using Json = nlohmann::json;

// Every *_from_json starts from the defaults, overrides the keys present and rejects
// unknown keys and wrongly typed values with ConfigError. to_json emits every field, so
// from_json(to_json(x)) == x.

Json to_json(const WorldSpec& spec);
WorldSpec world_spec_from_json(const Json& j);

Json to_json(const PipelineConfig& config);
PipelineConfig pipeline_config_from_json(const Json& j);

Json to_json(const EvalOptions& options);
EvalOptions eval_options_from_json(const Json& j);

/// 64-bit FNV-1a, printed as 16 lowercase hex digits.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

/// Hash of the canonical (key-sorted, compact) JSON of everything that determines an
/// evaluation's output.
std::string run_fingerprint(const WorldSpec& spec, std::uint64_t world_seed, const std::string& indicator,
                            const PipelineConfig& config, const EvalOptions& options, std::uint64_t seed);

struct TransferWorld {
  std::uint64_t seed = 0;
  std::optional<std::array<double, 3>> class_mixture;  // overrides the base spec when set
};

struct RunConfig {
  WorldSpec world;
  /// World seed; falls back to the command-line seed when absent.
  std::optional<std::uint64_t> world_seed;
  /// World dataset to load instead of generating one. Relative paths resolve against the
  /// config file's directory.
  std::string dataset;
  std::string indicator = kPowerIndicator;
  PipelineConfig pipeline;
  /// Model checkpoint read by predict, evaluate (as shared stages) and zipf.
  std::string checkpoint;
  /// Fraction of districts train uses; 1 trains on all of them.
  double train_fraction = 1.0;
  EvalOptions evaluate;

  struct Robustness {
    std::vector<double> fractions{0.2, 0.4, 0.6, 0.8};
    int repetitions = 20;
  } robustness;

  struct Transfer {
    std::vector<TransferWorld> worlds{{101, std::nullopt},
                                      {102, std::array<double, 3>{0.3, 0.5, 0.2}},
                                      {103, std::array<double, 3>{0.15, 0.45, 0.4}}};
  } transfer;

  struct Inequality {
    std::vector<std::uint64_t> world_seeds{201, 202, 203, 204};
    bool tile_replicated_factors = false;
    double train_fraction = 0.8;
  } inequality;

  struct Zipf {
    double top_quantile = 0.75;
  } zipf;

  void validate() const;
};

Json to_json(const RunConfig& config);
RunConfig run_config_from_json(const Json& j);

/// Parses a config file. Relative dataset and checkpoint paths are made absolute against
/// the file's directory, and referenced files must exist.
RunConfig load_run_config(const std::string& path);

}  // namespace geolevels
