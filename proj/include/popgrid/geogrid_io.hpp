#pragma once

#include "popgrid/geogrid.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace popgrid::geo {

void to_json(nlohmann::json& j, const GridDef& g);
void from_json(const nlohmann::json& j, GridDef& g);
void to_json(nlohmann::json& j, const Tile& t);
void from_json(const nlohmann::json& j, Tile& t);
void to_json(nlohmann::json& j, const CurationDecision& d);
void from_json(const nlohmann::json& j, CurationDecision& d);

GridDef load_grid(const std::filesystem::path& path);
void save_grid(const std::filesystem::path& path, const GridDef& grid);

/// Tile manifest: JSON lines, one tile per line.
std::vector<Tile> load_tile_manifest(const std::filesystem::path& path);
std::string format_tile_manifest(const std::vector<Tile>& tiles);
void save_tile_manifest(const std::filesystem::path& path, const std::vector<Tile>& tiles);

struct MicrocensusInput {
    std::vector<MicrocensusRecord> records;
    std::optional<std::string> crs;  ///< declared by GeoJSON "crs" member; CSV carries none
};

/// CSV with columns x,y,household_size,psu_id,survey_date.
MicrocensusInput parse_microcensus_csv(std::string_view text);
/// FeatureCollection of Point features with the same properties.
MicrocensusInput parse_microcensus_geojson(std::string_view text);
/// Dispatches on extension (.csv, .geojson/.json).
MicrocensusInput load_microcensus(const std::filesystem::path& path);
std::string format_microcensus_csv(const std::vector<MicrocensusRecord>& records);

/// Fold file: JSON object tile_id -> fold index. Duplicate keys are rejected as leakage.
FoldSpec parse_folds(std::string_view text);
FoldSpec load_folds(const std::filesystem::path& path);
std::string format_folds(const FoldSpec& folds);

}  // namespace popgrid::geo
