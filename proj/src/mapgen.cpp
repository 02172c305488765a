#include "popgrid/mapgen.hpp"

#include "popgrid/common.hpp"
#include "popgrid/csv.hpp"
#include "popgrid/geotiff.hpp"
#include "popgrid/stats.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>

namespace popgrid::mapgen {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double to_float_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

PopulationRaster PopulationRaster::empty(const geo::GridDef& grid, bool with_uncertainty) {
    grid.validate();
    PopulationRaster r;
    r.grid = grid;
    const auto n = static_cast<std::size_t>(grid.n_rows) * grid.n_cols;
    r.values.assign(n, kNaN);
    if (with_uncertainty) r.uncertainty.emplace(n, kNaN);
    return r;
}

bool PopulationRaster::valid(std::size_t i) const { return !std::isnan(values[i]); }

std::size_t PopulationRaster::n_valid() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < values.size(); ++i) n += valid(i) ? 1 : 0;
    return n;
}

double PopulationRaster::total() const {
    double s = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (valid(i)) s += values[i];
    }
    return s;
}

void PopulationRaster::validate() const {
    const auto n = static_cast<std::size_t>(grid.n_rows) * grid.n_cols;
    if (values.size() != n) throw Error("population raster: value count does not match the grid");
    for (double v : values) {
        if (!std::isnan(v) && (!std::isfinite(v) || v < 0)) throw Error("population raster: invalid cell value");
    }
    if (uncertainty) {
        if (uncertainty->size() != n) throw Error("population raster: uncertainty size does not match the grid");
        for (double v : *uncertainty) {
            if (!std::isnan(v) && (!std::isfinite(v) || v < 0)) throw Error("population raster: invalid uncertainty value");
        }
    }
}

nlohmann::json MapReport::to_json() const {
    nlohmann::json g = nlohmann::json::array();
    for (const auto& [id, why] : gaps) g.push_back({{"tile_id", id}, {"reason", why}});
    return {{"n_cells", n_cells}, {"n_predicted", n_predicted}, {"n_nodata", n_nodata}, {"gaps", g}};
}

std::string MapResult::predictions_csv() const {
    std::string out = "tile_id,row,col,prediction,std\n";
    for (const auto& p : predictions) {
        out += csv::join_row({p.tile_id, std::to_string(p.row), std::to_string(p.col), csv::format_double(p.mean),
                              csv::format_double(p.std)}) +
               "\n";
    }
    return out;
}

MapResult generate_map(evalx::Pipeline& pipeline, const geo::GridDef& grid, const imagery::RasterSource& source,
                       const MapOptions& opts) {
    grid.validate();
    imagery::check_source_compatible(source, grid);
    if (opts.rows_per_block < 1) throw Error("generate_map: rows_per_block must be >= 1");

    MapResult res;
    res.raster = PopulationRaster::empty(grid, opts.with_uncertainty);
    res.raster.provenance = opts.provenance.empty() ? pipeline.describe() : opts.provenance;
    res.report.n_cells = res.raster.values.size();

    for (int r0 = 0; r0 < grid.n_rows; r0 += opts.rows_per_block) {
        const int r1 = std::min(grid.n_rows, r0 + opts.rows_per_block);
        std::vector<geo::Tile> tiles;
        std::vector<imagery::Chip> chips;
        for (int r = r0; r < r1; ++r) {
            for (int c = 0; c < grid.n_cols; ++c) {
                auto tile = geo::make_tile(grid, r, c);
                try {
                    chips.push_back(imagery::extract_chip(source, tile, grid));
                    tiles.push_back(std::move(tile));
                } catch (const Error& e) {
                    res.report.gaps.emplace_back(tile.tile_id, e.what());
                }
            }
        }
        if (tiles.empty()) continue;
        std::vector<evalx::Sample> samples;
        samples.reserve(tiles.size());
        for (std::size_t i = 0; i < tiles.size(); ++i) samples.push_back({&tiles[i], &chips[i]});
        const auto preds = pipeline.predict(samples);
        if (preds.size() != samples.size()) throw Error("pipeline returned the wrong number of predictions");
        for (std::size_t i = 0; i < tiles.size(); ++i) {
            const double mean = to_float_precision(std::max(0.0, preds[i].mean));
            const double sd = to_float_precision(std::max(0.0, preds[i].std));
            if (!std::isfinite(mean)) throw Error("pipeline produced a non-finite prediction for '" + tiles[i].tile_id + "'");
            res.raster.at(tiles[i].row, tiles[i].col) = mean;
            if (res.raster.uncertainty) {
                (*res.raster.uncertainty)[static_cast<std::size_t>(tiles[i].row) * grid.n_cols + tiles[i].col] = sd;
            }
            res.predictions.push_back({tiles[i].tile_id, tiles[i].row, tiles[i].col, mean, sd});
        }
        spdlog::debug("map rows {}-{} done", r0, r1 - 1);
    }
    res.report.n_predicted = res.predictions.size();
    res.report.n_nodata = res.report.n_cells - res.report.n_predicted;
    if (!res.report.gaps.empty()) {
        spdlog::warn("{} of {} cells have no usable imagery and are nodata", res.report.gaps.size(), res.report.n_cells);
    }
    return res;
}

void export_geotiff(const PopulationRaster& raster, const std::filesystem::path& path) {
    raster.validate();
    raster::RasterInfo info;
    info.width = raster.grid.n_cols;
    info.height = raster.grid.n_rows;
    info.bands = raster.uncertainty ? 2 : 1;
    info.type = raster::SampleType::float32;
    info.transform = {raster.grid.origin_x, raster.grid.origin_y, raster.grid.cell_size, raster.grid.cell_size};
    info.crs_code = raster.grid.crs_code;
    info.nodata = kNodata;

    const std::size_t n = raster.values.size();
    std::vector<float> samples(n * info.bands);
    for (std::size_t i = 0; i < n; ++i) {
        samples[i * info.bands] = raster.valid(i) ? static_cast<float>(raster.values[i]) : kNodata;
        if (raster.uncertainty) {
            const double u = (*raster.uncertainty)[i];
            samples[i * info.bands + 1] = raster.valid(i) && !std::isnan(u) ? static_cast<float>(u) : kNodata;
        }
    }
    raster::write_geotiff(path, info, samples);
}

PopulationRaster import_geotiff(const std::filesystem::path& path, const std::optional<geo::GridDef>& expected) {
    raster::GeoTiffReader reader(path);
    const auto& info = reader.info();
    if (info.bands < 1 || info.bands > 2) {
        throw Error(path.string() + ": population rasters have 1 or 2 bands, found " + std::to_string(info.bands));
    }
    const auto& tf = info.transform;
    if (std::abs(tf.pixel_width - tf.pixel_height) > 1e-9 * tf.pixel_width) {
        throw Error(path.string() + ": pixels are not square; align the product to the analysis grid first");
    }
    geo::GridDef grid;
    grid.origin_x = tf.origin_x;
    grid.origin_y = tf.origin_y;
    grid.cell_size = tf.pixel_width;
    grid.n_rows = info.height;
    grid.n_cols = info.width;
    grid.crs_code = info.crs_code;
    if (expected) {
        if (grid.crs_code.empty()) grid.crs_code = expected->crs_code;
        if (!grid.same_geometry(*expected)) {
            throw Error(path.string() + " is not aligned with the analysis grid (origin, cell size, shape and CRS must match)");
        }
        grid.district_id = expected->district_id;
    }

    const auto samples = reader.read_window_f32(0, 0, info.width, info.height);
    PopulationRaster r = PopulationRaster::empty(grid, info.bands == 2);
    r.provenance = path.filename().string();
    const std::size_t n = r.values.size();
    auto decode = [&](float v) {
        if (std::isnan(v) || (info.nodata && static_cast<double>(v) == *info.nodata)) return kNaN;
        return static_cast<double>(v);
    };
    for (std::size_t i = 0; i < n; ++i) {
        r.values[i] = decode(samples[i * info.bands]);
        if (info.bands == 2) (*r.uncertainty)[i] = decode(samples[i * info.bands + 1]);
    }
    r.validate();
    return r;
}

nlohmann::json ProductComparison::to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"spearman", num(spearman)},
            {"pearson", num(pearson)},
            {"n_cells", n_cells},
            {"aggregate_pct_error", num(aggregate_pct_error)}};
}

ProductComparison compare_products(const PopulationRaster& ours, const PopulationRaster& theirs) {
    ours.validate();
    theirs.validate();
    if (!ours.grid.same_geometry(theirs.grid)) {
        throw Error("compare_products: rasters are not aligned to the same grid; resample the product first");
    }
    ProductComparison out;
    out.difference = PopulationRaster::empty(ours.grid);
    out.difference.provenance = ours.provenance + " - " + theirs.provenance;
    std::vector<double> a, b;
    double sum_a = 0, sum_b = 0;
    for (std::size_t i = 0; i < ours.values.size(); ++i) {
        if (!ours.valid(i) || !theirs.valid(i)) continue;
        a.push_back(ours.values[i]);
        b.push_back(theirs.values[i]);
        sum_a += ours.values[i];
        sum_b += theirs.values[i];
        out.difference.values[i] = ours.values[i] - theirs.values[i];
    }
    if (a.empty()) throw Error("compare_products: the rasters share no valid cell");
    out.n_cells = a.size();
    out.spearman = stats::spearman(a, b);
    out.pearson = stats::pearson(a, b);
    out.aggregate_pct_error = sum_b > 0 ? std::abs(sum_a - sum_b) / sum_b : kNaN;
    return out;
}

double census_check(const PopulationRaster& raster, double projected_total) {
    if (!(projected_total > 0) || !std::isfinite(projected_total)) throw Error("census_check: projected total must be > 0");
    return (raster.total() - projected_total) / projected_total;
}

std::map<std::string, double> parse_census_totals(std::string_view json_text) {
    const auto j = nlohmann::json::parse(json_text);
    if (!j.is_object()) throw Error("census totals: expected an object {district_id: projected_total}");
    std::map<std::string, double> out;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_number()) throw Error("census totals: value for '" + k + "' is not a number");
        const double t = v.get<double>();
        if (!(t > 0)) throw Error("census totals: total for '" + k + "' must be > 0");
        out[k] = t;
    }
    return out;
}

std::map<std::string, double> load_census_totals(const std::filesystem::path& path) {
    return parse_census_totals(read_text_file(path));
}

}  // namespace popgrid::mapgen
