#pragma once

#include "geolevels/config.hpp"
#include "geolevels/scaling.hpp"
#include "geolevels/synthworld.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace geolevels {

inline constexpr int kWorldFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;

// ---------------------------------------------------------------------------------------
// World datasets: one JSON record per line. A header (spec, seed, counts), then one record
// per tile, then one per district. Doubles are written in shortest round-trip form, so
// reading a dataset back reproduces the world bit for bit.

void write_world(std::ostream& out, const World& world);
World read_world(std::istream& in);

void save_world(const World& world, const std::string& path);
World load_world(const std::string& path);

// ---------------------------------------------------------------------------------------
// Checkpoints: {"format", "version", "payload", "checksum"} where the checksum is FNV-1a
// over the compact dump of the first three fields. A checksum mismatch or unparseable file
// raises CorruptionError; a well-formed file of another version raises VersionError.

Json to_json(const MlpParams& net);
MlpParams mlp_from_json(const Json& j);

Json to_json(const ScoreModel& model);
ScoreModel score_model_from_json(const Json& j);

Json to_json(const Encoder& encoder);
Encoder encoder_from_json(const Json& j);

Json to_json(const MultiLevelModel& model);
MultiLevelModel model_from_json(const Json& j);

std::string checkpoint_text(const std::string& format, const Json& payload);
/// Validates format tag, checksum and version; returns the payload.
Json parse_checkpoint(const std::string& text, const std::string& format);

void save_score_model(const ScoreModel& model, const std::string& path);
ScoreModel load_score_model(const std::string& path);
void save_encoder(const Encoder& encoder, const std::string& path);
Encoder load_encoder(const std::string& path);
void save_model(const MultiLevelModel& model, const std::string& path);
MultiLevelModel load_model(const std::string& path);

/// The Step 1 and Step 2 parts of a trained model, for reuse as shared stages.
StageModels stages_of(const MultiLevelModel& model);

// ---------------------------------------------------------------------------------------
// Files and tables

std::string read_file(const std::string& path);

/// Writes to a sibling temporary file and renames it over `path`, so readers never see a
/// partial file.
void write_file_atomic(const std::string& path, const std::string& content);

/// FNV-1a of the file's bytes as 16 hex digits.
std::string file_checksum(const std::string& path);

/// Shortest decimal form that reads back to the same double.
std::string format_double(double value);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row);
  std::string to_string() const;
};

}  // namespace geolevels
