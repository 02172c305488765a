#include "popgrid/synth.hpp"

#include "popgrid/common.hpp"

#include <algorithm>
#include <cmath>

namespace popgrid::synth {

namespace {

struct Disc {
    double x, y, r;
};

}  // namespace

std::vector<std::uint8_t> render_blob_chip(int n_blobs, std::mt19937_64& rng) {
    constexpr int n = imagery::kRawSize;
    std::vector<std::uint8_t> px(static_cast<std::size_t>(n) * n * 3);
    std::normal_distribution<double> noise(0.0, 9.0);
    const double base[3] = {48, 52, 40};
    for (std::size_t p = 0; p < static_cast<std::size_t>(n) * n; ++p) {
        for (int c = 0; c < 3; ++c) px[p * 3 + c] = static_cast<std::uint8_t>(std::clamp(base[c] + noise(rng), 0.0, 255.0));
    }

    std::uniform_real_distribution<double> radius(7.0, 11.0);
    std::vector<Disc> discs;
    int attempts = 0;
    while (static_cast<int>(discs.size()) < n_blobs) {
        if (++attempts > 100000) throw Error("synthetic chip: cannot place " + std::to_string(n_blobs) + " discs");
        const double r = radius(rng);
        std::uniform_real_distribution<double> pos(r + 1, n - r - 1);
        const Disc d{pos(rng), pos(rng), r};
        const bool clear = std::none_of(discs.begin(), discs.end(), [&](const Disc& o) {
            return std::hypot(o.x - d.x, o.y - d.y) < o.r + d.r + 4;
        });
        if (clear) discs.push_back(d);
    }
    std::uniform_int_distribution<int> tint(0, 30);
    for (const auto& d : discs) {
        const int shade[3] = {225 + tint(rng), 215 + tint(rng), 200 + tint(rng)};
        for (int y = static_cast<int>(d.y - d.r); y <= static_cast<int>(d.y + d.r) + 1; ++y) {
            for (int x = static_cast<int>(d.x - d.r); x <= static_cast<int>(d.x + d.r) + 1; ++x) {
                if (x < 0 || y < 0 || x >= n || y >= n) continue;
                if (std::hypot(x + 0.5 - d.x, y + 0.5 - d.y) > d.r) continue;
                for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(y) * n + x) * 3 + c] = static_cast<std::uint8_t>(shade[c]);
            }
        }
    }
    return px;
}

Dataset make_dataset(const Config& cfg) {
    if (cfg.n_rows < 1 || cfg.n_cols < 1) throw Error("synthetic dataset: grid must be at least 1x1");
    if (cfg.max_blobs < 0 || cfg.max_blobs > 40) throw Error("synthetic dataset: max_blobs must lie in 0..40");
    Dataset data;
    data.grid = {cfg.origin_x, cfg.origin_y, 100.0, cfg.n_rows, cfg.n_cols, geo::normalize_crs(cfg.crs_code),
                 cfg.district_id};
    data.grid.validate();
    std::uint64_t index = 0;
    for (int r = 0; r < cfg.n_rows; ++r) {
        for (int c = 0; c < cfg.n_cols; ++c, ++index) {
            std::mt19937_64 rng(mix_seed(cfg.seed, index));
            const int blobs = std::uniform_int_distribution<int>(0, cfg.max_blobs)(rng);
            std::normal_distribution<double> noise(0.0, cfg.label_noise_sd);
            const int population = std::max(0, blobs + static_cast<int>(std::lround(noise(rng))));

            geo::Tile tile = geo::make_tile(data.grid, r, c);
            tile.region_key = cfg.district_id + (c < (cfg.n_cols + 1) / 2 ? "-W" : "-E");

            imagery::Chip chip;
            chip.tile_id = tile.tile_id;
            chip.pixels_raw = render_blob_chip(blobs, rng);
            chip.acquisition_year = 2018;

            // Split the population into households scattered inside the cell.
            const auto box = data.grid.cell_box(r, c);
            std::uniform_real_distribution<double> ux(box.min_x + 1, box.max_x - 1), uy(box.min_y + 1, box.max_y - 1);
            std::uniform_int_distribution<int> hh(1, 6);
            int remaining = population, h = 0;
            while (remaining > 0) {
                const int size = std::min(remaining, hh(rng));
                data.households.push_back({ux(rng), uy(rng), size, tile.tile_id + "-psu", "2017-06-" + std::to_string(10 + (h++ % 18))});
                remaining -= size;
            }
            tile.population = population;
            tile.status = geo::TileStatus::surveyed;
            if (population == 0) {
                // No household, so the tile would not appear in an aggregation; keep it labelled via an empty dwelling.
                data.households.push_back({ux(rng), uy(rng), 0, tile.tile_id + "-psu", "2017-06-10"});
            }
            data.tiles.push_back(std::move(tile));
            data.chips.push_back(std::move(chip));
            data.blob_counts.push_back(blobs);
        }
    }
    return data;
}

imagery::MemoryRaster make_mosaic(const Dataset& data) {
    const auto& g = data.grid;
    constexpr int n = imagery::kRawSize;
    raster::RasterInfo info;
    info.width = g.n_cols * n;
    info.height = g.n_rows * n;
    info.bands = 3;
    info.type = raster::SampleType::uint8;
    info.transform = {g.origin_x, g.origin_y, g.cell_size / n, g.cell_size / n};
    info.crs_code = g.crs_code;
    std::vector<std::uint8_t> samples(static_cast<std::size_t>(info.width) * info.height * 3);
    for (std::size_t t = 0; t < data.tiles.size(); ++t) {
        const auto& tile = data.tiles[t];
        const auto& raw = data.chips[t].pixels_raw;
        for (int y = 0; y < n; ++y) {
            const std::size_t dst = ((static_cast<std::size_t>(tile.row) * n + y) * info.width + static_cast<std::size_t>(tile.col) * n) * 3;
            std::copy_n(raw.begin() + static_cast<std::ptrdiff_t>(y) * n * 3, n * 3, samples.begin() + static_cast<std::ptrdiff_t>(dst));
        }
    }
    return imagery::MemoryRaster(std::move(info), std::move(samples));
}

}  // namespace popgrid::synth
