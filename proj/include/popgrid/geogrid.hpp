#pragma once

#include "popgrid/timestamp.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace popgrid::geo {

/// Axis-aligned half-open box [min_x, max_x) x [min_y, max_y) in projected metres.
struct Box {
    double min_x = 0, min_y = 0, max_x = 0, max_y = 0;
    bool contains(double x, double y) const { return x >= min_x && x < max_x && y >= min_y && y < max_y; }
};

struct CellIndex {
    int row = 0;
    int col = 0;
    auto operator<=>(const CellIndex&) const = default;
};

/// North-up analysis grid. Row 0 is the northernmost row; origin is the north-west corner.
struct GridDef {
    double origin_x = 0;
    double origin_y = 0;
    double cell_size = 100.0;
    int n_rows = 1;
    int n_cols = 1;
    std::string crs_code;
    std::string district_id;

    void validate() const;
    Box extent() const;
    Box cell_box(int row, int col) const;
    /// Cell whose half-open box contains (x, y), if any.
    std::optional<CellIndex> locate(double x, double y) const;
    bool same_geometry(const GridDef& other) const;
};

/// Canonicalises "EPSG:32736", "epsg:32736" and OGC URNs to "EPSG:<code>".
/// Throws for unparseable codes and for geographic (degree-based) EPSG codes.
std::string normalize_crs(std::string_view code);

enum class TileStatus { unlabelled, surveyed, curated, excluded, zero };

std::string_view to_string(TileStatus s);
TileStatus parse_tile_status(std::string_view s);

struct Tile {
    std::string tile_id;
    std::string district_id;
    int row = 0;
    int col = 0;
    std::optional<double> population;
    TileStatus status = TileStatus::unlabelled;
    std::string region_key;

    /// Checks the status/population invariants; throws on violation.
    void validate() const;
    bool labelled() const { return population.has_value(); }
};

std::string make_tile_id(std::string_view district_id, int row, int col);

/// Builds an unlabelled tile for a grid cell, region_key defaulting to the district.
Tile make_tile(const GridDef& grid, int row, int col);

struct MicrocensusRecord {
    double x = 0;
    double y = 0;
    int household_size = 0;
    std::string psu_id;
    std::string survey_date;
};

struct RejectedRecord {
    std::size_t index = 0;
    double x = 0;
    double y = 0;
    std::string reason;
};

struct AggregationResult {
    std::vector<Tile> tiles;  ///< status=surveyed, ordered by (row, col)
    std::vector<RejectedRecord> rejects;
    std::size_t accepted = 0;
};

/// Sums household sizes into the half-open cells of `grid`.
/// `records_crs`, when known, must match the grid CRS.
AggregationResult aggregate_microcensus(std::span<const MicrocensusRecord> records, const GridDef& grid,
                                        std::optional<std::string_view> records_crs = std::nullopt);

enum class Decision { curate, exclude, zero };

std::string_view to_string(Decision d);
Decision parse_decision(std::string_view s);

struct CurationDecision {
    std::string tile_id;
    Decision decision = Decision::curate;
    std::string annotator;
    Timestamp timestamp{};
    std::optional<std::string> note;
};

/// Applies the latest decision per tile (by timestamp, later list position breaks ties).
///  curate: labelled, non-zero tile -> curated
///  exclude: -> excluded (a zero tile loses its synthetic 0 label)
///  zero: tile without a survey label -> zero, population 0
std::vector<Tile> apply_curation(std::vector<Tile> tiles, std::span<const CurationDecision> decisions);

/// Applies one decision to one tile; throws when the transition is not allowed.
void apply_decision(Tile& tile, Decision decision);

struct FoldSpec {
    int n_folds = 4;
    std::map<std::string, int> assignment;

    int fold_of(const std::string& tile_id) const;
    std::vector<std::string> members(int fold) const;
};

/// Distance along the Hilbert curve of a side x side grid (side a power of two).
std::uint64_t hilbert_index(std::uint32_t side, std::uint32_t x, std::uint32_t y);

/// Per region_key, orders labelled tiles by the Hilbert index of their (col, row) and cuts the
/// order into n_folds equal-count contiguous runs; fold f is the union over regions of run f.
FoldSpec make_spatial_folds(std::span<const Tile> tiles, int n_folds);

}  // namespace popgrid::geo
