#pragma once

#include <cstdint>
#include <filesystem>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace popgrid::raster {

enum class SampleType { uint8, float32 };

/// North-up georeference: pixel (col, row) covers
/// [origin_x + col*pixel_width, origin_x + (col+1)*pixel_width) x (origin_y - (row+1)*pixel_height, origin_y - row*pixel_height].
struct GeoTransform {
    double origin_x = 0;
    double origin_y = 0;
    double pixel_width = 1;
    double pixel_height = 1;
};

struct RasterInfo {
    int width = 0;
    int height = 0;
    int bands = 1;
    SampleType type = SampleType::uint8;
    GeoTransform transform;
    std::string crs_code;  ///< "EPSG:<code>" or empty when the file carries no projected CRS key
    std::optional<double> nodata;
};

/// Windowed GeoTIFF reader. Supports classic TIFF and BigTIFF, strips or tiles, chunky or planar
/// layout, 8-bit unsigned and 32-bit float samples, compression none/LZW/Deflate with predictor 1 or 2.
/// Reads are thread-safe; decoded chunks are kept in a small LRU cache.
class GeoTiffReader {
public:
    explicit GeoTiffReader(const std::filesystem::path& path);
    ~GeoTiffReader();
    GeoTiffReader(const GeoTiffReader&) = delete;
    GeoTiffReader& operator=(const GeoTiffReader&) = delete;

    const RasterInfo& info() const { return info_; }

    /// Pixel-interleaved samples of the window (row-major, all bands). Window must lie inside the image.
    std::vector<std::uint8_t> read_window_u8(int x0, int y0, int w, int h) const;
    std::vector<float> read_window_f32(int x0, int y0, int w, int h) const;

private:
    struct Layout;
    std::vector<std::uint8_t> read_window_raw(int x0, int y0, int w, int h) const;
    std::shared_ptr<const std::vector<std::uint8_t>> chunk(std::size_t index) const;

    std::filesystem::path path_;
    RasterInfo info_;
    std::unique_ptr<Layout> layout_;
    mutable std::mutex mutex_;
    mutable std::list<std::size_t> lru_;
    mutable std::unordered_map<std::size_t, std::shared_ptr<const std::vector<std::uint8_t>>> cache_;
};

/// Uncompressed striped classic GeoTIFF, little-endian, pixel-interleaved. Output bytes depend only
/// on the arguments. `samples` holds width*height*bands values of the matching type.
std::vector<std::uint8_t> encode_geotiff(const RasterInfo& info, std::span<const std::uint8_t> samples);
std::vector<std::uint8_t> encode_geotiff(const RasterInfo& info, std::span<const float> samples);

void write_geotiff(const std::filesystem::path& path, const RasterInfo& info, std::span<const std::uint8_t> samples);
void write_geotiff(const std::filesystem::path& path, const RasterInfo& info, std::span<const float> samples);

}  // namespace popgrid::raster
