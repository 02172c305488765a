#include "popgrid/geotiff.hpp"

#include "popgrid/common.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace popgrid::raster {

namespace {

constexpr std::uint16_t kImageWidth = 256;
constexpr std::uint16_t kImageLength = 257;
constexpr std::uint16_t kBitsPerSample = 258;
constexpr std::uint16_t kCompression = 259;
constexpr std::uint16_t kPhotometric = 262;
constexpr std::uint16_t kStripOffsets = 273;
constexpr std::uint16_t kSamplesPerPixel = 277;
constexpr std::uint16_t kRowsPerStrip = 278;
constexpr std::uint16_t kStripByteCounts = 279;
constexpr std::uint16_t kPlanarConfig = 284;
constexpr std::uint16_t kPredictor = 317;
constexpr std::uint16_t kTileWidth = 322;
constexpr std::uint16_t kTileLength = 323;
constexpr std::uint16_t kTileOffsets = 324;
constexpr std::uint16_t kTileByteCounts = 325;
constexpr std::uint16_t kExtraSamples = 338;
constexpr std::uint16_t kSampleFormat = 339;
constexpr std::uint16_t kModelPixelScale = 33550;
constexpr std::uint16_t kModelTiepoint = 33922;
constexpr std::uint16_t kGeoKeyDirectory = 34735;
constexpr std::uint16_t kGdalNodata = 42113;

constexpr std::uint16_t kGeoKeyProjectedCs = 3072;

std::size_t type_size(std::uint16_t type) {
    switch (type) {
        case 1: case 2: case 6: case 7: return 1;
        case 3: case 8: return 2;
        case 4: case 9: case 11: case 13: return 4;
        case 5: case 10: case 12: case 16: case 17: case 18: return 8;
        default: return 0;
    }
}

struct Endian {
    bool little = true;

    std::uint64_t get(const std::uint8_t* p, std::size_t n) const {
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = little ? n - 1 - i : i;
            v = (v << 8) | p[k];
        }
        return v;
    }
};

struct Entry {
    std::uint16_t tag = 0;
    std::uint16_t type = 0;
    std::uint64_t count = 0;
    std::vector<std::uint8_t> data;  // raw value bytes in file order
};

class FileReader {
public:
    explicit FileReader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw Error("geotiff: cannot open " + path.string());
        in_.seekg(0, std::ios::end);
        size_ = static_cast<std::uint64_t>(in_.tellg());
    }

    std::vector<std::uint8_t> read(std::uint64_t offset, std::uint64_t n) {
        if (offset > size_ || n > size_ - offset) {
            throw Error("geotiff: " + path_.string() + " is truncated (read past end of file)");
        }
        std::vector<std::uint8_t> buf(n);
        in_.seekg(static_cast<std::streamoff>(offset));
        in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
        if (!in_) throw Error("geotiff: read failed in " + path_.string());
        return buf;
    }

private:
    std::ifstream in_;
    std::filesystem::path path_;
    std::uint64_t size_ = 0;
};

std::vector<std::uint64_t> entry_uints(const Entry& e, const Endian& en) {
    const std::size_t sz = type_size(e.type);
    std::vector<std::uint64_t> out;
    out.reserve(e.count);
    for (std::uint64_t i = 0; i < e.count; ++i) out.push_back(en.get(e.data.data() + i * sz, sz));
    return out;
}

std::vector<double> entry_doubles(const Entry& e, const Endian& en) {
    std::vector<double> out;
    const std::size_t sz = type_size(e.type);
    for (std::uint64_t i = 0; i < e.count; ++i) {
        const std::uint8_t* p = e.data.data() + i * sz;
        switch (e.type) {
            case 11: out.push_back(std::bit_cast<float>(static_cast<std::uint32_t>(en.get(p, 4)))); break;
            case 12: out.push_back(std::bit_cast<double>(en.get(p, 8))); break;
            case 5: {
                const double num = static_cast<double>(en.get(p, 4));
                const double den = static_cast<double>(en.get(p + 4, 4));
                out.push_back(den == 0 ? 0.0 : num / den);
                break;
            }
            default: out.push_back(static_cast<double>(en.get(p, sz)));
        }
    }
    return out;
}

std::vector<std::uint8_t> lzw_decode(std::span<const std::uint8_t> in, std::size_t expected) {
    std::vector<std::uint8_t> out;
    out.reserve(expected);
    std::vector<std::uint16_t> prefix(4096);
    std::vector<std::uint8_t> suffix(4096), first(4096);
    std::vector<std::uint16_t> length(4096);
    for (int i = 0; i < 256; ++i) {
        suffix[i] = first[i] = static_cast<std::uint8_t>(i);
        length[i] = 1;
    }
    int width = 9;
    int next = 258;
    int old = -1;
    std::uint64_t bitpos = 0;
    const std::uint64_t total_bits = static_cast<std::uint64_t>(in.size()) * 8;
    std::vector<std::uint8_t> scratch;

    auto emit = [&](int code) {
        scratch.resize(length[code]);
        for (int c = code, i = length[code] - 1; i >= 0; --i) {
            scratch[i] = suffix[c];
            c = prefix[c];
        }
        out.insert(out.end(), scratch.begin(), scratch.end());
    };

    while (bitpos + width <= total_bits) {
        int code = 0;
        for (int b = 0; b < width; ++b, ++bitpos) {
            code = (code << 1) | ((in[bitpos >> 3] >> (7 - (bitpos & 7))) & 1);
        }
        if (code == 256) {
            width = 9;
            next = 258;
            old = -1;
            continue;
        }
        if (code == 257) break;
        if (old == -1) {
            if (code > 255) throw Error("geotiff: corrupt LZW stream");
            emit(code);
            old = code;
            continue;
        }
        if (code < next) {
            emit(code);
            if (next < 4096) {
                prefix[next] = static_cast<std::uint16_t>(old);
                suffix[next] = first[code];
                first[next] = first[old];
                length[next] = static_cast<std::uint16_t>(length[old] + 1);
                ++next;
            }
        } else if (code == next && next < 4096) {
            prefix[next] = static_cast<std::uint16_t>(old);
            suffix[next] = first[old];
            first[next] = first[old];
            length[next] = static_cast<std::uint16_t>(length[old] + 1);
            ++next;
            emit(code);
        } else {
            throw Error("geotiff: corrupt LZW stream");
        }
        old = code;
        if (next >= (1 << width) - 1 && width < 12) ++width;
        if (out.size() >= expected) break;
    }
    return out;
}

std::vector<std::uint8_t> inflate_all(std::span<const std::uint8_t> in, std::size_t expected) {
    std::vector<std::uint8_t> out(expected);
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw Error("geotiff: zlib init failed");
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = inflate(&zs, Z_FINISH);
    const auto produced = zs.total_out;
    inflateEnd(&zs);
    if (rc != Z_STREAM_END && rc != Z_OK && rc != Z_BUF_ERROR) throw Error("geotiff: corrupt deflate stream");
    out.resize(produced);
    return out;
}

std::vector<std::uint8_t> packbits_decode(std::span<const std::uint8_t> in, std::size_t expected) {
    std::vector<std::uint8_t> out;
    out.reserve(expected);
    std::size_t i = 0;
    while (i < in.size() && out.size() < expected) {
        const auto n = static_cast<std::int8_t>(in[i++]);
        if (n >= 0) {
            const std::size_t len = static_cast<std::size_t>(n) + 1;
            if (i + len > in.size()) throw Error("geotiff: corrupt PackBits stream");
            out.insert(out.end(), in.begin() + static_cast<std::ptrdiff_t>(i),
                       in.begin() + static_cast<std::ptrdiff_t>(i + len));
            i += len;
        } else if (n != -128) {
            if (i >= in.size()) throw Error("geotiff: corrupt PackBits stream");
            out.insert(out.end(), static_cast<std::size_t>(1 - n), in[i++]);
        }
    }
    return out;
}

}  // namespace

struct GeoTiffReader::Layout {
    Endian endian;
    int bytes_per_sample = 1;
    int samples = 1;
    int planar = 1;
    int compression = 1;
    int predictor = 1;
    int chunk_w = 0;
    int chunk_h = 0;
    int across = 1;
    int down = 1;
    std::vector<std::uint64_t> offsets;
    std::vector<std::uint64_t> counts;
};

GeoTiffReader::GeoTiffReader(const std::filesystem::path& path) : path_(path), layout_(std::make_unique<Layout>()) {
    FileReader file(path);
    const auto head = file.read(0, 8);
    auto& L = *layout_;
    if (head[0] == 'I' && head[1] == 'I') {
        L.endian.little = true;
    } else if (head[0] == 'M' && head[1] == 'M') {
        L.endian.little = false;
    } else {
        throw Error("geotiff: " + path.string() + " is not a TIFF file");
    }
    const auto version = L.endian.get(head.data() + 2, 2);
    const bool big = version == 43;
    if (version != 42 && !big) throw Error("geotiff: unsupported TIFF version in " + path.string());
    std::uint64_t ifd = 0;
    if (big) {
        const auto h2 = file.read(8, 8);
        ifd = L.endian.get(h2.data(), 8);
    } else {
        ifd = L.endian.get(head.data() + 4, 4);
    }

    const std::size_t count_size = big ? 8 : 2;
    const std::size_t entry_size = big ? 20 : 12;
    const std::size_t inline_size = big ? 8 : 4;
    const auto n_entries = L.endian.get(file.read(ifd, count_size).data(), count_size);
    const auto raw = file.read(ifd + count_size, n_entries * entry_size);
    std::map<std::uint16_t, Entry> entries;
    for (std::uint64_t i = 0; i < n_entries; ++i) {
        const std::uint8_t* p = raw.data() + i * entry_size;
        Entry e;
        e.tag = static_cast<std::uint16_t>(L.endian.get(p, 2));
        e.type = static_cast<std::uint16_t>(L.endian.get(p + 2, 2));
        e.count = L.endian.get(p + 4, big ? 8 : 4);
        const std::size_t sz = type_size(e.type);
        if (sz == 0) continue;
        const std::uint64_t nbytes = e.count * sz;
        const std::uint8_t* value = p + (big ? 12 : 8);
        if (nbytes <= inline_size) {
            e.data.assign(value, value + nbytes);
        } else {
            e.data = file.read(L.endian.get(value, inline_size), nbytes);
        }
        entries.emplace(e.tag, std::move(e));
    }

    auto need = [&](std::uint16_t tag) -> const Entry& {
        const auto it = entries.find(tag);
        if (it == entries.end()) throw Error("geotiff: missing tag " + std::to_string(tag) + " in " + path.string());
        return it->second;
    };
    auto uint_or = [&](std::uint16_t tag, std::uint64_t fallback) {
        const auto it = entries.find(tag);
        if (it == entries.end() || it->second.count == 0) return fallback;
        return entry_uints(it->second, L.endian).front();
    };

    info_.width = static_cast<int>(entry_uints(need(kImageWidth), L.endian).front());
    info_.height = static_cast<int>(entry_uints(need(kImageLength), L.endian).front());
    L.samples = static_cast<int>(uint_or(kSamplesPerPixel, 1));
    info_.bands = L.samples;
    const auto bps = entries.contains(kBitsPerSample) ? entry_uints(entries.at(kBitsPerSample), L.endian)
                                                      : std::vector<std::uint64_t>{1};
    for (auto b : bps) {
        if (b != bps.front()) throw Error("geotiff: mixed bits per sample are not supported");
    }
    const auto format = uint_or(kSampleFormat, 1);
    if (bps.front() == 8 && format == 1) {
        info_.type = SampleType::uint8;
        L.bytes_per_sample = 1;
    } else if (bps.front() == 32 && format == 3) {
        info_.type = SampleType::float32;
        L.bytes_per_sample = 4;
    } else {
        throw Error("geotiff: only 8-bit unsigned and 32-bit float samples are supported (" + path.string() + ")");
    }
    L.compression = static_cast<int>(uint_or(kCompression, 1));
    if (L.compression != 1 && L.compression != 5 && L.compression != 8 && L.compression != 32946 &&
        L.compression != 32773) {
        throw Error("geotiff: unsupported compression " + std::to_string(L.compression) + " in " + path.string());
    }
    L.predictor = static_cast<int>(uint_or(kPredictor, 1));
    if (L.predictor == 2 && L.bytes_per_sample != 1) throw Error("geotiff: predictor 2 only supported for 8-bit data");
    if (L.predictor == 3 && info_.type != SampleType::float32) throw Error("geotiff: predictor 3 requires float data");
    if (L.predictor < 1 || L.predictor > 3) throw Error("geotiff: unsupported predictor");
    L.planar = static_cast<int>(uint_or(kPlanarConfig, 1));

    if (entries.contains(kTileOffsets)) {
        L.chunk_w = static_cast<int>(entry_uints(need(kTileWidth), L.endian).front());
        L.chunk_h = static_cast<int>(entry_uints(need(kTileLength), L.endian).front());
        L.offsets = entry_uints(need(kTileOffsets), L.endian);
        L.counts = entry_uints(need(kTileByteCounts), L.endian);
    } else {
        L.chunk_w = info_.width;
        L.chunk_h = static_cast<int>(std::min<std::uint64_t>(uint_or(kRowsPerStrip, info_.height), info_.height));
        L.offsets = entry_uints(need(kStripOffsets), L.endian);
        L.counts = entry_uints(need(kStripByteCounts), L.endian);
    }
    if (L.chunk_w <= 0 || L.chunk_h <= 0) throw Error("geotiff: invalid chunk geometry");
    L.across = (info_.width + L.chunk_w - 1) / L.chunk_w;
    L.down = (info_.height + L.chunk_h - 1) / L.chunk_h;
    const std::size_t expected_chunks =
        static_cast<std::size_t>(L.across) * L.down * (L.planar == 2 ? static_cast<std::size_t>(L.samples) : 1);
    if (L.offsets.size() < expected_chunks || L.counts.size() < expected_chunks) {
        throw Error("geotiff: chunk table too short in " + path.string());
    }

    if (entries.contains(kModelPixelScale) && entries.contains(kModelTiepoint)) {
        const auto scale = entry_doubles(entries.at(kModelPixelScale), L.endian);
        const auto tie = entry_doubles(entries.at(kModelTiepoint), L.endian);
        if (scale.size() < 2 || tie.size() < 6) throw Error("geotiff: malformed georeferencing tags");
        info_.transform.pixel_width = scale[0];
        info_.transform.pixel_height = scale[1];
        info_.transform.origin_x = tie[3] - tie[0] * scale[0];
        info_.transform.origin_y = tie[4] + tie[1] * scale[1];
    }
    if (entries.contains(kGeoKeyDirectory)) {
        const auto keys = entry_uints(entries.at(kGeoKeyDirectory), L.endian);
        for (std::size_t i = 4; i + 3 < keys.size(); i += 4) {
            if (keys[i] == kGeoKeyProjectedCs && keys[i + 1] == 0) {
                info_.crs_code = "EPSG:" + std::to_string(keys[i + 3]);
            }
        }
    }
    if (entries.contains(kGdalNodata)) {
        const auto& e = entries.at(kGdalNodata);
        std::string text(e.data.begin(), e.data.end());
        text.erase(std::find(text.begin(), text.end(), '\0'), text.end());
        try {
            info_.nodata = std::stod(text);
        } catch (const std::exception&) {
            throw Error("geotiff: malformed GDAL_NODATA value '" + text + "'");
        }
    }
}

GeoTiffReader::~GeoTiffReader() = default;

std::shared_ptr<const std::vector<std::uint8_t>> GeoTiffReader::chunk(std::size_t index) const {
    {
        std::lock_guard lock(mutex_);
        const auto it = cache_.find(index);
        if (it != cache_.end()) {
            lru_.remove(index);
            lru_.push_front(index);
            return it->second;
        }
    }
    const auto& L = *layout_;
    const int spc = L.planar == 1 ? L.samples : 1;
    const std::size_t row_bytes = static_cast<std::size_t>(L.chunk_w) * spc * L.bytes_per_sample;
    const std::size_t full = row_bytes * L.chunk_h;

    std::vector<std::uint8_t> encoded;
    {
        std::lock_guard lock(mutex_);
        FileReader file(path_);
        encoded = file.read(L.offsets[index], L.counts[index]);
    }
    std::vector<std::uint8_t> data;
    switch (L.compression) {
        case 1: data = std::move(encoded); break;
        case 5: data = lzw_decode(encoded, full); break;
        case 8:
        case 32946: data = inflate_all(encoded, full); break;
        case 32773: data = packbits_decode(encoded, full); break;
        default: throw Error("geotiff: unsupported compression");
    }
    data.resize(full, 0);

    const std::size_t rows = L.chunk_h;
    if (L.predictor == 2) {
        for (std::size_t r = 0; r < rows; ++r) {
            std::uint8_t* row = data.data() + r * row_bytes;
            for (std::size_t i = spc; i < row_bytes; ++i) row[i] = static_cast<std::uint8_t>(row[i] + row[i - spc]);
        }
    } else if (L.predictor == 3) {
        // Floating-point predictor: byte-wise differencing over a byte-plane shuffled row, MSB plane first.
        const std::size_t wc = static_cast<std::size_t>(L.chunk_w) * spc;
        std::vector<std::uint8_t> tmp(row_bytes);
        for (std::size_t r = 0; r < rows; ++r) {
            std::uint8_t* row = data.data() + r * row_bytes;
            for (std::size_t i = spc; i < row_bytes; ++i) row[i] = static_cast<std::uint8_t>(row[i] + row[i - spc]);
            std::copy(row, row + row_bytes, tmp.begin());
            for (std::size_t s = 0; s < wc; ++s) {
                for (std::size_t b = 0; b < 4; ++b) {
                    const std::size_t plane = L.endian.little ? 3 - b : b;
                    row[s * 4 + b] = tmp[plane * wc + s];
                }
            }
        }
    }
    // Normalise multi-byte samples to host order.
    if (L.bytes_per_sample > 1 && L.endian.little != (std::endian::native == std::endian::little)) {
        for (std::size_t i = 0; i + 3 < data.size(); i += 4) {
            std::swap(data[i], data[i + 3]);
            std::swap(data[i + 1], data[i + 2]);
        }
    }

    auto ptr = std::make_shared<const std::vector<std::uint8_t>>(std::move(data));
    std::lock_guard lock(mutex_);
    cache_[index] = ptr;
    lru_.remove(index);
    lru_.push_front(index);
    while (lru_.size() > 64) {
        cache_.erase(lru_.back());
        lru_.pop_back();
    }
    return ptr;
}

std::vector<std::uint8_t> GeoTiffReader::read_window_raw(int x0, int y0, int w, int h) const {
    if (w <= 0 || h <= 0 || x0 < 0 || y0 < 0 || x0 + w > info_.width || y0 + h > info_.height) {
        std::ostringstream ss;
        ss << "geotiff: window [" << x0 << "," << y0 << " " << w << "x" << h << "] outside image " << info_.width
           << "x" << info_.height;
        throw Error(ss.str());
    }
    const auto& L = *layout_;
    const std::size_t bps = L.bytes_per_sample;
    const std::size_t pixel_bytes = bps * L.samples;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(w) * h * pixel_bytes);
    const int cx0 = x0 / L.chunk_w, cx1 = (x0 + w - 1) / L.chunk_w;
    const int cy0 = y0 / L.chunk_h, cy1 = (y0 + h - 1) / L.chunk_h;
    const int planes = L.planar == 1 ? 1 : L.samples;
    const std::size_t per_plane = static_cast<std::size_t>(L.across) * L.down;
    for (int plane = 0; plane < planes; ++plane) {
        for (int cy = cy0; cy <= cy1; ++cy) {
            for (int cx = cx0; cx <= cx1; ++cx) {
                const std::size_t index = plane * per_plane + static_cast<std::size_t>(cy) * L.across + cx;
                const auto data = chunk(index);
                const int gx0 = std::max(x0, cx * L.chunk_w), gx1 = std::min(x0 + w, (cx + 1) * L.chunk_w);
                const int gy0 = std::max(y0, cy * L.chunk_h), gy1 = std::min(y0 + h, (cy + 1) * L.chunk_h);
                for (int gy = gy0; gy < gy1; ++gy) {
                    const int ly = gy - cy * L.chunk_h;
                    for (int gx = gx0; gx < gx1; ++gx) {
                        const int lx = gx - cx * L.chunk_w;
                        std::uint8_t* dst = out.data() + (static_cast<std::size_t>(gy - y0) * w + (gx - x0)) * pixel_bytes;
                        if (L.planar == 1) {
                            const std::uint8_t* src =
                                data->data() + (static_cast<std::size_t>(ly) * L.chunk_w + lx) * pixel_bytes;
                            std::memcpy(dst, src, pixel_bytes);
                        } else {
                            const std::uint8_t* src = data->data() + (static_cast<std::size_t>(ly) * L.chunk_w + lx) * bps;
                            std::memcpy(dst + plane * bps, src, bps);
                        }
                    }
                }
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> GeoTiffReader::read_window_u8(int x0, int y0, int w, int h) const {
    if (info_.type != SampleType::uint8) throw Error("geotiff: " + path_.string() + " does not hold 8-bit samples");
    return read_window_raw(x0, y0, w, h);
}

std::vector<float> GeoTiffReader::read_window_f32(int x0, int y0, int w, int h) const {
    if (info_.type == SampleType::uint8) {
        const auto raw = read_window_raw(x0, y0, w, h);
        return std::vector<float>(raw.begin(), raw.end());
    }
    const auto raw = read_window_raw(x0, y0, w, h);
    std::vector<float> out(raw.size() / 4);
    std::memcpy(out.data(), raw.data(), raw.size());
    return out;
}

namespace {

class IfdBuilder {
public:
    void add(std::uint16_t tag, std::uint16_t type, std::uint32_t count, std::vector<std::uint8_t> data) {
        entries_.push_back({tag, type, count, std::move(data)});
    }
    void add_short(std::uint16_t tag, std::vector<std::uint16_t> values) {
        std::vector<std::uint8_t> d;
        for (auto v : values) append(d, v, 2);
        add(tag, 3, static_cast<std::uint32_t>(values.size()), std::move(d));
    }
    void add_long(std::uint16_t tag, std::vector<std::uint32_t> values) {
        std::vector<std::uint8_t> d;
        for (auto v : values) append(d, v, 4);
        add(tag, 4, static_cast<std::uint32_t>(values.size()), std::move(d));
    }
    void add_double(std::uint16_t tag, std::vector<double> values) {
        std::vector<std::uint8_t> d;
        for (auto v : values) append(d, std::bit_cast<std::uint64_t>(v), 8);
        add(tag, 12, static_cast<std::uint32_t>(values.size()), std::move(d));
    }
    void add_ascii(std::uint16_t tag, const std::string& text) {
        std::vector<std::uint8_t> d(text.begin(), text.end());
        d.push_back(0);
        const auto count = static_cast<std::uint32_t>(d.size());
        add(tag, 2, count, std::move(d));
    }

    static void append(std::vector<std::uint8_t>& out, std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
    }

    /// Serialises header + IFD + out-of-line values; image data follows at `data_offset()`.
    std::vector<std::uint8_t> finish(std::size_t data_offset_placeholder_tag, std::size_t strip_count,
                                     const std::vector<std::uint32_t>& strip_sizes) {
        std::sort(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) { return a.tag < b.tag; });
        const std::size_t ifd_size = 2 + entries_.size() * 12 + 4;
        std::size_t extra = 0;
        for (const auto& e : entries_) {
            if (e.data.size() > 4) extra += e.data.size() + (e.data.size() & 1);
        }
        const std::size_t data_offset = 8 + ifd_size + extra;
        // Fill in strip offsets now that the layout is known.
        for (auto& e : entries_) {
            if (e.tag == data_offset_placeholder_tag) {
                e.data.clear();
                std::uint64_t off = data_offset;
                for (std::size_t i = 0; i < strip_count; ++i) {
                    append(e.data, off, 4);
                    off += strip_sizes[i];
                }
            }
        }
        std::vector<std::uint8_t> out{'I', 'I', 42, 0};
        append(out, 8, 4);
        append(out, entries_.size(), 2);
        std::size_t cursor = 8 + ifd_size;
        std::vector<std::uint8_t> tail;
        for (const auto& e : entries_) {
            append(out, e.tag, 2);
            append(out, e.type, 2);
            append(out, e.count, 4);
            if (e.data.size() <= 4) {
                auto d = e.data;
                d.resize(4, 0);
                out.insert(out.end(), d.begin(), d.end());
            } else {
                append(out, cursor, 4);
                tail.insert(tail.end(), e.data.begin(), e.data.end());
                if (e.data.size() & 1) tail.push_back(0);
                cursor += e.data.size() + (e.data.size() & 1);
            }
        }
        append(out, 0, 4);
        out.insert(out.end(), tail.begin(), tail.end());
        return out;
    }

private:
    struct E {
        std::uint16_t tag, type;
        std::uint32_t count;
        std::vector<std::uint8_t> data;
    };
    std::vector<E> entries_;
};

std::vector<std::uint8_t> encode(const RasterInfo& info, std::span<const std::uint8_t> bytes, int bytes_per_sample) {
    if (info.width <= 0 || info.height <= 0 || info.bands <= 0) throw Error("geotiff: invalid raster shape");
    const std::size_t row_bytes = static_cast<std::size_t>(info.width) * info.bands * bytes_per_sample;
    if (bytes.size() != row_bytes * info.height) throw Error("geotiff: sample buffer does not match raster shape");
    const std::size_t total = bytes.size();
    if (total > 0xF0000000ULL) throw Error("geotiff: raster too large for classic TIFF");
    const std::uint32_t rows_per_strip =
        static_cast<std::uint32_t>(std::clamp<std::size_t>(65536 / row_bytes, 1, info.height));
    const std::size_t strips = (static_cast<std::size_t>(info.height) + rows_per_strip - 1) / rows_per_strip;
    std::vector<std::uint32_t> sizes(strips);
    for (std::size_t s = 0; s < strips; ++s) {
        const std::size_t rows = std::min<std::size_t>(rows_per_strip, info.height - s * rows_per_strip);
        sizes[s] = static_cast<std::uint32_t>(rows * row_bytes);
    }

    IfdBuilder ifd;
    ifd.add_long(kImageWidth, {static_cast<std::uint32_t>(info.width)});
    ifd.add_long(kImageLength, {static_cast<std::uint32_t>(info.height)});
    ifd.add_short(kBitsPerSample,
                  std::vector<std::uint16_t>(info.bands, static_cast<std::uint16_t>(bytes_per_sample * 8)));
    ifd.add_short(kCompression, {1});
    const bool rgb = bytes_per_sample == 1 && info.bands >= 3;
    ifd.add_short(kPhotometric, {static_cast<std::uint16_t>(rgb ? 2 : 1)});
    ifd.add_long(kStripOffsets, std::vector<std::uint32_t>(strips, 0));
    ifd.add_short(kSamplesPerPixel, {static_cast<std::uint16_t>(info.bands)});
    ifd.add_long(kRowsPerStrip, {rows_per_strip});
    ifd.add_long(kStripByteCounts, sizes);
    ifd.add_short(kPlanarConfig, {1});
    const int extra = info.bands - (rgb ? 3 : 1);
    if (extra > 0) ifd.add_short(kExtraSamples, std::vector<std::uint16_t>(extra, 0));
    ifd.add_short(kSampleFormat, std::vector<std::uint16_t>(info.bands, bytes_per_sample == 1 ? 1 : 3));
    ifd.add_double(kModelPixelScale, {info.transform.pixel_width, info.transform.pixel_height, 0.0});
    ifd.add_double(kModelTiepoint, {0, 0, 0, info.transform.origin_x, info.transform.origin_y, 0});
    std::vector<std::uint16_t> keys{1, 1, 0, 2, 1024, 0, 1, 1, 1025, 0, 1, 1};
    if (!info.crs_code.empty()) {
        const auto pos = info.crs_code.find(':');
        const auto code = std::stoul(info.crs_code.substr(pos == std::string::npos ? 0 : pos + 1));
        keys[3] = 3;
        keys.insert(keys.end(), {kGeoKeyProjectedCs, 0, 1, static_cast<std::uint16_t>(code)});
    }
    ifd.add_short(kGeoKeyDirectory, keys);
    if (info.nodata) {
        std::ostringstream ss;
        ss.precision(17);
        ss << *info.nodata;
        ifd.add_ascii(kGdalNodata, ss.str());
    }
    auto out = ifd.finish(kStripOffsets, strips, sizes);
    out.insert(out.end(), bytes.begin(), bytes.end());
    return out;
}

}  // namespace

std::vector<std::uint8_t> encode_geotiff(const RasterInfo& info, std::span<const std::uint8_t> samples) {
    if (info.type != SampleType::uint8) throw Error("geotiff: uint8 samples given for a float raster");
    return encode(info, samples, 1);
}

std::vector<std::uint8_t> encode_geotiff(const RasterInfo& info, std::span<const float> samples) {
    if (info.type != SampleType::float32) throw Error("geotiff: float samples given for a uint8 raster");
    std::vector<std::uint8_t> bytes(samples.size() * 4);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(samples[i]);
        for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>((bits >> (8 * b)) & 0xFF);
    }
    return encode(info, bytes, 4);
}

void write_geotiff(const std::filesystem::path& path, const RasterInfo& info, std::span<const std::uint8_t> samples) {
    write_file_atomic(path, encode_geotiff(info, samples));
}

void write_geotiff(const std::filesystem::path& path, const RasterInfo& info, std::span<const float> samples) {
    write_file_atomic(path, encode_geotiff(info, samples));
}

}  // namespace popgrid::raster
