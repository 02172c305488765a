#pragma once

#include "popgrid/geogrid.hpp"
#include "popgrid/geotiff.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace popgrid::imagery {

inline constexpr int kRawSize = 200;
inline constexpr int kModelSize = 224;
inline constexpr int kChannels = 3;

/// Per-channel statistics applied after scaling intensities to [0, 1].
struct NormalizationStats {
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};
};

struct Chip {
    std::string tile_id;
    std::vector<std::uint8_t> pixels_raw;  ///< 200x200x3, row-major, RGB interleaved
    std::vector<float> pixels_model;       ///< 3x224x224 planar (CHW); empty until prepared
    std::optional<int> acquisition_year;

    std::uint8_t raw(int y, int x, int c) const {
        return pixels_raw[(static_cast<std::size_t>(y) * kRawSize + x) * kChannels + c];
    }
    float model(int c, int y, int x) const {
        return pixels_model[(static_cast<std::size_t>(c) * kModelSize + y) * kModelSize + x];
    }
    bool prepared() const { return !pixels_model.empty(); }
    /// Throws unless both pixel arrays have their fixed shapes (model may be empty).
    void validate() const;
};

/// Read-only access to an RGB mosaic.
class RasterSource {
public:
    virtual ~RasterSource() = default;
    virtual const raster::RasterInfo& info() const = 0;
    /// Pixel-interleaved bands of the window; the window must lie inside the raster.
    virtual std::vector<std::uint8_t> read_window(int x0, int y0, int w, int h) const = 0;
};

class MemoryRaster : public RasterSource {
public:
    MemoryRaster(raster::RasterInfo info, std::vector<std::uint8_t> samples);
    const raster::RasterInfo& info() const override { return info_; }
    std::vector<std::uint8_t> read_window(int x0, int y0, int w, int h) const override;
    std::span<const std::uint8_t> samples() const { return samples_; }

private:
    raster::RasterInfo info_;
    std::vector<std::uint8_t> samples_;
};

class GeoTiffRaster : public RasterSource {
public:
    explicit GeoTiffRaster(const std::filesystem::path& path);
    const raster::RasterInfo& info() const override { return reader_.info(); }
    std::vector<std::uint8_t> read_window(int x0, int y0, int w, int h) const override;

private:
    raster::GeoTiffReader reader_;
};

/// Reads the 200x200 RGB window covering the tile's half-open box. Raster pixel size must be
/// cell_size / 200; tiles partly outside the raster or touching nodata pixels are rejected.
Chip extract_chip(const RasterSource& source, const geo::Tile& tile, const geo::GridDef& grid);
/// The raster-wide part of extract_chip's checks: band count, CRS and pixel size.
void check_source_compatible(const RasterSource& source, const geo::GridDef& grid);

/// Bilinear (half-pixel centre) resize of interleaved 8-bit data into planar doubles, unscaled.
std::vector<double> resize_bilinear(std::span<const std::uint8_t> interleaved, int in_h, int in_w, int channels,
                                    int out_h, int out_w);

/// Fills pixels_model: bilinear 200->224, scale to [0,1], then (v - mean_c) / std_c.
Chip prepare_for_model(Chip chip, const NormalizationStats& stats);

/// Element R^k F^f of the square's dihedral group, code = k + 4f: a horizontal flip (f = 1)
/// followed by k counter-clockwise quarter turns.
struct DihedralTransform {
    int code = 0;

    int rotations() const { return code & 3; }
    bool flipped() const { return code >= 4; }
    /// `a ∘ b`: apply b first, then a.
    static DihedralTransform compose(DihedralTransform a, DihedralTransform b);
    DihedralTransform inverse() const;
    bool operator==(const DihedralTransform&) const = default;
};

/// Permutes pixels (raw and model) by the group element; ids, labels and intensities untouched.
Chip apply_dihedral(const Chip& chip, DihedralTransform t);

/// For an n x n image, the source pixel index (y*n + x) that lands on each destination pixel.
std::vector<int> dihedral_source_index(int n, DihedralTransform t);

/// Chip cache: <dir>/<tile_id>.png plus <dir>/<tile_id>.json with acquisition_year.
void save_chip(const std::filesystem::path& dir, const Chip& chip);
Chip load_chip(const std::filesystem::path& dir, const std::string& tile_id);
bool has_cached_chip(const std::filesystem::path& dir, const std::string& tile_id);

}  // namespace popgrid::imagery
