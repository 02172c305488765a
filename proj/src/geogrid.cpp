#include "popgrid/geogrid.hpp"

#include "popgrid/common.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace popgrid::geo {

void GridDef::validate() const {
    if (!(cell_size > 0) || !std::isfinite(cell_size)) throw Error("grid: cell_size must be > 0");
    if (n_rows < 1 || n_cols < 1) throw Error("grid: n_rows and n_cols must be >= 1");
    if (!std::isfinite(origin_x) || !std::isfinite(origin_y)) throw Error("grid: origin must be finite");
    if (district_id.empty()) throw Error("grid: district_id is required");
    if (district_id.find(':') != std::string::npos) throw Error("grid: district_id must not contain ':'");
    normalize_crs(crs_code);
}

Box GridDef::extent() const {
    return {origin_x, origin_y - n_rows * cell_size, origin_x + n_cols * cell_size, origin_y};
}

Box GridDef::cell_box(int row, int col) const {
    return {origin_x + col * cell_size, origin_y - (row + 1) * cell_size, origin_x + (col + 1) * cell_size,
            origin_y - row * cell_size};
}

std::optional<CellIndex> GridDef::locate(double x, double y) const {
    if (!std::isfinite(x) || !std::isfinite(y)) return std::nullopt;
    if (!extent().contains(x, y)) return std::nullopt;
    int col = static_cast<int>(std::floor((x - origin_x) / cell_size));
    int row = static_cast<int>(std::ceil((origin_y - y) / cell_size)) - 1;
    // Division rounding can land one cell off near edges; settle against the exact box edges.
    col = std::clamp(col, 0, n_cols - 1);
    row = std::clamp(row, 0, n_rows - 1);
    while (col > 0 && x < cell_box(row, col).min_x) --col;
    while (col < n_cols - 1 && x >= cell_box(row, col).max_x) ++col;
    while (row > 0 && y >= cell_box(row, col).max_y) --row;
    while (row < n_rows - 1 && y < cell_box(row, col).min_y) ++row;
    if (!cell_box(row, col).contains(x, y)) return std::nullopt;
    return CellIndex{row, col};
}

bool GridDef::same_geometry(const GridDef& other) const {
    return origin_x == other.origin_x && origin_y == other.origin_y && cell_size == other.cell_size &&
           n_rows == other.n_rows && n_cols == other.n_cols &&
           normalize_crs(crs_code) == normalize_crs(other.crs_code);
}

std::string normalize_crs(std::string_view code) {
    std::string upper;
    for (char ch : code) upper.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    const auto pos = upper.rfind("EPSG:");
    if (pos == std::string::npos) throw Error("crs: expected an EPSG code, got '" + std::string(code) + "'");
    std::string digits = upper.substr(pos + 5);
    while (!digits.empty() && digits.front() == ':') digits.erase(digits.begin());
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return std::isdigit(
                                                                            static_cast<unsigned char>(c)); })) {
        throw Error("crs: malformed EPSG code '" + std::string(code) + "'");
    }
    const long value = std::stol(digits);
    // EPSG 4000-4999 are geographic 2D/3D systems in degrees.
    if (value >= 4000 && value <= 4999) {
        throw Error("crs: EPSG:" + digits + " is geographic; a projected CRS in metres is required");
    }
    return "EPSG:" + std::to_string(value);
}

std::string_view to_string(TileStatus s) {
    switch (s) {
        case TileStatus::unlabelled: return "unlabelled";
        case TileStatus::surveyed: return "surveyed";
        case TileStatus::curated: return "curated";
        case TileStatus::excluded: return "excluded";
        case TileStatus::zero: return "zero";
    }
    return "unlabelled";
}

TileStatus parse_tile_status(std::string_view s) {
    if (s == "unlabelled") return TileStatus::unlabelled;
    if (s == "surveyed") return TileStatus::surveyed;
    if (s == "curated") return TileStatus::curated;
    if (s == "excluded") return TileStatus::excluded;
    if (s == "zero") return TileStatus::zero;
    throw Error("unknown tile status '" + std::string(s) + "'");
}

void Tile::validate() const {
    if (tile_id != make_tile_id(district_id, row, col)) {
        throw Error("tile '" + tile_id + "': id does not match district:row:col");
    }
    if (population && (!std::isfinite(*population) || *population < 0)) {
        throw Error("tile '" + tile_id + "': population must be finite and >= 0");
    }
    if (status == TileStatus::zero && (!population || *population != 0.0)) {
        throw Error("tile '" + tile_id + "': zero status requires population 0");
    }
    if ((status == TileStatus::curated || status == TileStatus::surveyed) && !population) {
        throw Error("tile '" + tile_id + "': " + std::string(to_string(status)) + " status requires a population");
    }
}

std::string make_tile_id(std::string_view district_id, int row, int col) {
    std::ostringstream ss;
    ss << district_id << ':' << row << ':' << col;
    return ss.str();
}

Tile make_tile(const GridDef& grid, int row, int col) {
    Tile t;
    t.district_id = grid.district_id;
    t.row = row;
    t.col = col;
    t.tile_id = make_tile_id(grid.district_id, row, col);
    t.region_key = grid.district_id;
    return t;
}

AggregationResult aggregate_microcensus(std::span<const MicrocensusRecord> records, const GridDef& grid,
                                        std::optional<std::string_view> records_crs) {
    grid.validate();
    if (records_crs && normalize_crs(*records_crs) != normalize_crs(grid.crs_code)) {
        throw Error("microcensus CRS " + std::string(*records_crs) + " does not match grid CRS " + grid.crs_code +
                    " (reprojection is not supported)");
    }
    AggregationResult result;
    std::map<CellIndex, double> sums;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        if (rec.household_size < 0) {
            result.rejects.push_back({i, rec.x, rec.y, "negative household_size"});
            continue;
        }
        const auto cell = grid.locate(rec.x, rec.y);
        if (!cell) {
            result.rejects.push_back({i, rec.x, rec.y, "outside grid extent"});
            continue;
        }
        sums[*cell] += rec.household_size;
        ++result.accepted;
    }
    result.tiles.reserve(sums.size());
    for (const auto& [cell, total] : sums) {
        Tile t = make_tile(grid, cell.row, cell.col);
        t.population = total;
        t.status = TileStatus::surveyed;
        result.tiles.push_back(std::move(t));
    }
    return result;
}

std::string_view to_string(Decision d) {
    switch (d) {
        case Decision::curate: return "curate";
        case Decision::exclude: return "exclude";
        case Decision::zero: return "zero";
    }
    return "curate";
}

Decision parse_decision(std::string_view s) {
    if (s == "curate") return Decision::curate;
    if (s == "exclude") return Decision::exclude;
    if (s == "zero") return Decision::zero;
    throw Error("unknown decision '" + std::string(s) + "' (expected curate|exclude|zero)");
}

void apply_decision(Tile& tile, Decision decision) {
    switch (decision) {
        case Decision::curate:
            if (tile.status == TileStatus::zero || !tile.population) {
                throw Error("tile '" + tile.tile_id + "': only surveyed tiles can be curated");
            }
            tile.status = TileStatus::curated;
            break;
        case Decision::exclude:
            if (tile.status == TileStatus::zero) tile.population.reset();
            tile.status = TileStatus::excluded;
            break;
        case Decision::zero:
            if (tile.population && tile.status != TileStatus::zero) {
                throw Error("tile '" + tile.tile_id + "': zero decision is only valid for tiles without survey labels");
            }
            tile.population = 0.0;
            tile.status = TileStatus::zero;
            break;
    }
}

std::vector<Tile> apply_curation(std::vector<Tile> tiles, std::span<const CurationDecision> decisions) {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < tiles.size(); ++i) index.emplace(tiles[i].tile_id, i);

    std::unordered_map<std::string, const CurationDecision*> latest;
    for (const auto& d : decisions) {
        if (!index.contains(d.tile_id)) throw Error("curation decision for unknown tile_id '" + d.tile_id + "'");
        auto& slot = latest[d.tile_id];
        if (slot == nullptr || d.timestamp >= slot->timestamp) slot = &d;
    }
    for (const auto& [id, d] : latest) apply_decision(tiles[index.at(id)], d->decision);
    return tiles;
}

int FoldSpec::fold_of(const std::string& tile_id) const {
    const auto it = assignment.find(tile_id);
    if (it == assignment.end()) throw Error("tile '" + tile_id + "' has no fold assignment");
    return it->second;
}

std::vector<std::string> FoldSpec::members(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : assignment) {
        if (f == fold) out.push_back(id);
    }
    return out;
}

std::uint64_t hilbert_index(std::uint32_t side, std::uint32_t x, std::uint32_t y) {
    std::uint64_t d = 0;
    for (std::uint32_t s = side / 2; s > 0; s /= 2) {
        const std::uint32_t rx = (x & s) > 0 ? 1 : 0;
        const std::uint32_t ry = (y & s) > 0 ? 1 : 0;
        d += static_cast<std::uint64_t>(s) * s * ((3 * rx) ^ ry);
        if (ry == 0) {
            if (rx == 1) {
                x = side - 1 - x;
                y = side - 1 - y;
            }
            std::swap(x, y);
        }
    }
    return d;
}

FoldSpec make_spatial_folds(std::span<const Tile> tiles, int n_folds) {
    if (n_folds < 2) throw Error("make_spatial_folds: n_folds must be >= 2");
    std::map<std::string, std::vector<const Tile*>> by_region;
    for (const auto& t : tiles) {
        if (t.labelled()) by_region[t.region_key].push_back(&t);
    }
    FoldSpec spec;
    spec.n_folds = n_folds;
    for (auto& [region, members] : by_region) {
        if (static_cast<int>(members.size()) < n_folds) {
            throw Error("region '" + region + "' has " + std::to_string(members.size()) +
                        " labelled tiles, fewer than n_folds=" + std::to_string(n_folds) +
                        "; use a lower fold count");
        }
        int extent = 1;
        for (const Tile* t : members) extent = std::max({extent, t->row + 1, t->col + 1});
        std::uint32_t side = 1;
        while (side < static_cast<std::uint32_t>(extent)) side *= 2;

        std::vector<std::pair<std::uint64_t, const Tile*>> order;
        order.reserve(members.size());
        for (const Tile* t : members) {
            order.emplace_back(hilbert_index(side, static_cast<std::uint32_t>(t->col), static_cast<std::uint32_t>(t->row)),
                               t);
        }
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first < b.first : a.second->tile_id < b.second->tile_id;
        });
        const std::size_t n = order.size();
        for (int f = 0; f < n_folds; ++f) {
            const std::size_t lo = n * static_cast<std::size_t>(f) / static_cast<std::size_t>(n_folds);
            const std::size_t hi = n * static_cast<std::size_t>(f + 1) / static_cast<std::size_t>(n_folds);
            for (std::size_t i = lo; i < hi; ++i) {
                if (!spec.assignment.emplace(order[i].second->tile_id, f).second) {
                    throw Error("duplicate tile_id '" + order[i].second->tile_id + "' in fold construction");
                }
            }
        }
    }
    return spec;
}

}  // namespace popgrid::geo
