#pragma once

#include "popgrid/evalx.hpp"
#include "popgrid/geogrid.hpp"
#include "popgrid/imagery.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace popgrid::mapgen {

inline constexpr float kNodata = -1.0f;

/// Persons per grid cell, row-major with row 0 at the north edge. NaN marks nodata. Values are
/// kept at float32 precision so that GeoTIFF export is lossless.
struct PopulationRaster {
    geo::GridDef grid;
    std::vector<double> values;
    std::optional<std::vector<double>> uncertainty;
    std::string provenance;

    static PopulationRaster empty(const geo::GridDef& grid, bool with_uncertainty = false);

    double& at(int row, int col) { return values[static_cast<std::size_t>(row) * grid.n_cols + col]; }
    double at(int row, int col) const { return values[static_cast<std::size_t>(row) * grid.n_cols + col]; }
    bool valid(std::size_t i) const;
    std::size_t n_valid() const;
    /// Sum over valid cells.
    double total() const;
    /// Shape matches the grid; valid values finite and >= 0; uncertainty likewise.
    void validate() const;
};

struct TilePrediction {
    std::string tile_id;
    int row = 0;
    int col = 0;
    double mean = 0;
    double std = 0;
};

struct MapReport {
    std::size_t n_cells = 0;
    std::size_t n_predicted = 0;
    std::size_t n_nodata = 0;
    /// Cells whose chip could not be extracted, with the reason.
    std::vector<std::pair<std::string, std::string>> gaps;

    nlohmann::json to_json() const;
};

struct MapResult {
    PopulationRaster raster;
    std::vector<TilePrediction> predictions;  ///< per-tile log, raster order
    MapReport report;

    std::string predictions_csv() const;
};

struct MapOptions {
    int rows_per_block = 4;
    bool with_uncertainty = true;
    std::string provenance;
};

/// Predicts every grid cell. Imagery problems that affect the whole raster (band count, CRS,
/// pixel size) throw; a cell whose chip cannot be read becomes nodata and is listed in the report.
MapResult generate_map(evalx::Pipeline& pipeline, const geo::GridDef& grid, const imagery::RasterSource& source,
                       const MapOptions& opts = {});

/// Float32 GeoTIFF: band 1 estimate, band 2 uncertainty std when present, nodata -1.
void export_geotiff(const PopulationRaster& raster, const std::filesystem::path& path);
/// Reads a raster written by export_geotiff or a third-party product on the same grid. When
/// `expected` is given the file must match its geometry exactly.
PopulationRaster import_geotiff(const std::filesystem::path& path, const std::optional<geo::GridDef>& expected = {});

struct ProductComparison {
    double spearman = 0;
    double pearson = 0;
    std::size_t n_cells = 0;
    PopulationRaster difference;  ///< ours - theirs; NaN outside the common valid set
    double aggregate_pct_error = 0;

    nlohmann::json to_json() const;
};

/// Correlations and totals over the cells valid in both rasters. Misaligned grids and disjoint
/// valid sets throw.
ProductComparison compare_products(const PopulationRaster& ours, const PopulationRaster& theirs);

/// (sum(raster) - projected_total) / projected_total.
double census_check(const PopulationRaster& raster, double projected_total);

/// {"district_id": projected_total, ...}
std::map<std::string, double> parse_census_totals(std::string_view json_text);
std::map<std::string, double> load_census_totals(const std::filesystem::path& path);

}  // namespace popgrid::mapgen
