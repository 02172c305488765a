#include "popgrid/imagery.hpp"

#include "popgrid/common.hpp"
#include "popgrid/png_io.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numeric>
#include <sstream>

namespace popgrid::imagery {

void Chip::validate() const {
    if (pixels_raw.size() != static_cast<std::size_t>(kRawSize) * kRawSize * kChannels) {
        throw Error("chip '" + tile_id + "': pixels_raw must be 200x200x3");
    }
    if (!pixels_model.empty() && pixels_model.size() != static_cast<std::size_t>(kModelSize) * kModelSize * kChannels) {
        throw Error("chip '" + tile_id + "': pixels_model must be 224x224x3");
    }
}

MemoryRaster::MemoryRaster(raster::RasterInfo info, std::vector<std::uint8_t> samples)
    : info_(std::move(info)), samples_(std::move(samples)) {
    if (samples_.size() != static_cast<std::size_t>(info_.width) * info_.height * info_.bands) {
        throw Error("memory raster: sample count does not match shape");
    }
}

std::vector<std::uint8_t> MemoryRaster::read_window(int x0, int y0, int w, int h) const {
    if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > info_.width || y0 + h > info_.height) {
        throw Error("memory raster: window outside raster");
    }
    const std::size_t bands = info_.bands;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(w) * h * bands);
    for (int y = 0; y < h; ++y) {
        const auto* src = samples_.data() + ((static_cast<std::size_t>(y0 + y) * info_.width) + x0) * bands;
        std::copy(src, src + w * bands, out.begin() + static_cast<std::ptrdiff_t>(y * w * bands));
    }
    return out;
}

GeoTiffRaster::GeoTiffRaster(const std::filesystem::path& path) : reader_(path) {
    if (reader_.info().type != raster::SampleType::uint8) {
        throw Error("imagery: " + path.string() + " must hold 8-bit samples");
    }
}

std::vector<std::uint8_t> GeoTiffRaster::read_window(int x0, int y0, int w, int h) const {
    return reader_.read_window_u8(x0, y0, w, h);
}

void check_source_compatible(const RasterSource& source, const geo::GridDef& grid) {
    const auto& info = source.info();
    if (info.bands < 3) {
        throw Error("imagery: raster has " + std::to_string(info.bands) + " band(s); RGB requires 3");
    }
    if (!info.crs_code.empty() && geo::normalize_crs(info.crs_code) != geo::normalize_crs(grid.crs_code)) {
        throw Error("imagery: raster CRS " + info.crs_code + " does not match grid CRS " + grid.crs_code);
    }
    const double expected_pixel = grid.cell_size / kRawSize;
    const auto& tf = info.transform;
    if (std::abs(tf.pixel_width - expected_pixel) > 1e-9 * expected_pixel ||
        std::abs(tf.pixel_height - expected_pixel) > 1e-9 * expected_pixel) {
        std::ostringstream ss;
        ss << "imagery: raster pixel size " << tf.pixel_width << "x" << tf.pixel_height << " m, expected "
           << expected_pixel << " m for " << kRawSize << "-pixel tiles";
        throw Error(ss.str());
    }
}

Chip extract_chip(const RasterSource& source, const geo::Tile& tile, const geo::GridDef& grid) {
    check_source_compatible(source, grid);
    const auto& info = source.info();
    const auto& tf = info.transform;
    const auto box = grid.cell_box(tile.row, tile.col);
    const double fx = (box.min_x - tf.origin_x) / tf.pixel_width;
    const double fy = (tf.origin_y - box.max_y) / tf.pixel_height;
    const double rx = std::round(fx), ry = std::round(fy);
    if (std::abs(fx - rx) > 1e-6 || std::abs(fy - ry) > 1e-6) {
        throw Error("imagery: tile '" + tile.tile_id + "' is not aligned to the raster pixel grid");
    }
    const int x0 = static_cast<int>(rx), y0 = static_cast<int>(ry);
    if (x0 < 0 || y0 < 0 || x0 + kRawSize > info.width || y0 + kRawSize > info.height) {
        throw Error("imagery: tile '" + tile.tile_id + "' extends outside the raster");
    }
    const auto window = source.read_window(x0, y0, kRawSize, kRawSize);
    const std::size_t bands = info.bands;
    Chip chip;
    chip.tile_id = tile.tile_id;
    chip.pixels_raw.resize(static_cast<std::size_t>(kRawSize) * kRawSize * kChannels);
    for (std::size_t p = 0; p < static_cast<std::size_t>(kRawSize) * kRawSize; ++p) {
        const auto* px = window.data() + p * bands;
        if (info.nodata) {
            const double nd = *info.nodata;
            if (px[0] == nd && px[1] == nd && px[2] == nd) {
                throw Error("imagery: tile '" + tile.tile_id + "' overlaps nodata pixels");
            }
        }
        for (int c = 0; c < kChannels; ++c) chip.pixels_raw[p * kChannels + c] = px[c];
    }
    return chip;
}

std::vector<double> resize_bilinear(std::span<const std::uint8_t> interleaved, int in_h, int in_w, int channels,
                                    int out_h, int out_w) {
    struct Tap {
        int i0, i1;
        double w1;
    };
    auto taps = [](int in, int out) {
        std::vector<Tap> t(out);
        const double scale = static_cast<double>(in) / out;
        for (int o = 0; o < out; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            int i0 = static_cast<int>(std::floor(src));
            if (i0 > in - 1) i0 = in - 1;
            const int i1 = std::min(i0 + 1, in - 1);
            t[o] = {i0, i1, src - i0};
        }
        return t;
    };
    const auto ty = taps(in_h, out_h);
    const auto tx = taps(in_w, out_w);
    std::vector<double> out(static_cast<std::size_t>(channels) * out_h * out_w);
    for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < out_h; ++y) {
            const auto& a = ty[y];
            for (int x = 0; x < out_w; ++x) {
                const auto& b = tx[x];
                auto at = [&](int yy, int xx) {
                    return static_cast<double>(interleaved[(static_cast<std::size_t>(yy) * in_w + xx) * channels + c]);
                };
                const double top = at(a.i0, b.i0) * (1 - b.w1) + at(a.i0, b.i1) * b.w1;
                const double bottom = at(a.i1, b.i0) * (1 - b.w1) + at(a.i1, b.i1) * b.w1;
                out[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] = top * (1 - a.w1) + bottom * a.w1;
            }
        }
    }
    return out;
}

Chip prepare_for_model(Chip chip, const NormalizationStats& stats) {
    chip.validate();
    const auto resized = resize_bilinear(chip.pixels_raw, kRawSize, kRawSize, kChannels, kModelSize, kModelSize);
    chip.pixels_model.resize(resized.size());
    const std::size_t plane = static_cast<std::size_t>(kModelSize) * kModelSize;
    for (int c = 0; c < kChannels; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            const double v = resized[c * plane + i] / 255.0;
            chip.pixels_model[c * plane + i] = static_cast<float>((v - stats.mean[c]) / stats.std[c]);
        }
    }
    return chip;
}

DihedralTransform DihedralTransform::compose(DihedralTransform a, DihedralTransform b) {
    // R^a F^f R^b F^g = R^(a ± b) F^(f xor g), since F R = R^-1 F.
    const int k = (a.rotations() + (a.flipped() ? 4 - b.rotations() : b.rotations())) & 3;
    const bool f = a.flipped() != b.flipped();
    return {k + (f ? 4 : 0)};
}

DihedralTransform DihedralTransform::inverse() const {
    if (flipped()) return *this;
    return {(4 - rotations()) & 3};
}

std::vector<int> dihedral_source_index(int n, DihedralTransform t) {
    if (t.code < 0 || t.code > 7) throw Error("dihedral transform code must be in 0..7");
    std::vector<int> idx(static_cast<std::size_t>(n) * n);
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<int> tmp(idx.size());
    if (t.flipped()) {
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) tmp[y * n + x] = idx[y * n + (n - 1 - x)];
        idx.swap(tmp);
    }
    // Counter-clockwise quarter turn: out(y, x) = in(x, n-1-y).
    for (int r = 0; r < t.rotations(); ++r) {
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) tmp[y * n + x] = idx[x * n + (n - 1 - y)];
        idx.swap(tmp);
    }
    return idx;
}

Chip apply_dihedral(const Chip& chip, DihedralTransform t) {
    if (t.code == 0) return chip;
    Chip out = chip;
    if (!chip.pixels_raw.empty()) {
        const auto idx = dihedral_source_index(kRawSize, t);
        for (std::size_t p = 0; p < idx.size(); ++p) {
            for (int c = 0; c < kChannels; ++c) {
                out.pixels_raw[p * kChannels + c] = chip.pixels_raw[static_cast<std::size_t>(idx[p]) * kChannels + c];
            }
        }
    }
    if (!chip.pixels_model.empty()) {
        const auto idx = dihedral_source_index(kModelSize, t);
        const std::size_t plane = idx.size();
        for (int c = 0; c < kChannels; ++c) {
            for (std::size_t p = 0; p < plane; ++p) out.pixels_model[c * plane + p] = chip.pixels_model[c * plane + idx[p]];
        }
    }
    return out;
}

namespace {

std::filesystem::path chip_path(const std::filesystem::path& dir, const std::string& tile_id, const char* ext) {
    if (tile_id.find('/') != std::string::npos || tile_id.find("..") != std::string::npos) {
        throw Error("chip cache: invalid tile_id '" + tile_id + "'");
    }
    return dir / (tile_id + ext);
}

}  // namespace

void save_chip(const std::filesystem::path& dir, const Chip& chip) {
    chip.validate();
    png::Image img{kRawSize, kRawSize, kChannels, chip.pixels_raw};
    png::write(chip_path(dir, chip.tile_id, ".png"), img);
    nlohmann::json side{{"tile_id", chip.tile_id},
                        {"acquisition_year", chip.acquisition_year ? nlohmann::json(*chip.acquisition_year)
                                                                   : nlohmann::json(nullptr)}};
    write_file_atomic(chip_path(dir, chip.tile_id, ".json"), side.dump() + "\n");
}

Chip load_chip(const std::filesystem::path& dir, const std::string& tile_id) {
    const auto img = png::read(chip_path(dir, tile_id, ".png"));
    if (img.width != kRawSize || img.height != kRawSize || img.channels != kChannels) {
        throw Error("chip cache: " + tile_id + ".png is not a 200x200 RGB image");
    }
    Chip chip;
    chip.tile_id = tile_id;
    chip.pixels_raw = img.pixels;
    const auto side_path = chip_path(dir, tile_id, ".json");
    if (std::filesystem::exists(side_path)) {
        const auto side = nlohmann::json::parse(read_text_file(side_path));
        if (side.contains("acquisition_year") && !side.at("acquisition_year").is_null()) {
            chip.acquisition_year = side.at("acquisition_year").get<int>();
        }
    }
    return chip;
}

bool has_cached_chip(const std::filesystem::path& dir, const std::string& tile_id) {
    return std::filesystem::exists(chip_path(dir, tile_id, ".png"));
}

}  // namespace popgrid::imagery
