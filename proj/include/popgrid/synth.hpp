#pragma once

#include "popgrid/geogrid.hpp"
#include "popgrid/imagery.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace popgrid::synth {

/// Synthetic district: every tile shows 0..max_blobs bright discs on a dark, noisy background
/// and its population is the disc count plus integer noise, recorded as household points.
struct Config {
    int n_rows = 20;
    int n_cols = 20;
    int max_blobs = 15;
    double label_noise_sd = 1.0;
    std::uint64_t seed = 7;
    double origin_x = 500000.0;
    double origin_y = 8000000.0;
    std::string district_id = "SYN";
    std::string crs_code = "EPSG:32736";
};

/// 200x200 RGB interleaved chip with `n_blobs` non-overlapping discs.
std::vector<std::uint8_t> render_blob_chip(int n_blobs, std::mt19937_64& rng);

struct Dataset {
    geo::GridDef grid;
    std::vector<geo::Tile> tiles;            ///< surveyed, region_key = <district>-W / <district>-E
    std::vector<imagery::Chip> chips;        ///< raw pixels only, aligned with tiles
    std::vector<int> blob_counts;            ///< aligned with tiles
    std::vector<geo::MicrocensusRecord> households;
};

Dataset make_dataset(const Config& cfg);

/// The dataset's chips stitched into one north-up mosaic at 0.5 m pixels in the grid CRS.
imagery::MemoryRaster make_mosaic(const Dataset& data);

}  // namespace popgrid::synth
