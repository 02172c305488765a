#include "doctest.h"

#include "popgrid/common.hpp"
#include "popgrid/csv.hpp"
#include "popgrid/geotiff.hpp"
#include "popgrid/png_io.hpp"
#include "popgrid/runrecord.hpp"
#include "popgrid/timestamp.hpp"
#include "test_util.hpp"

#include <cstring>
#include <random>

using namespace popgrid;
namespace fs = std::filesystem;

namespace {

const fs::path kData = POPGRID_TEST_DATA;

int fixture_u8(int x, int y, int b) { return (3 * x + 5 * y + 70 * b) % 256; }
float fixture_f32(int x, int y, int b) { return static_cast<float>(x - 0.25 * y + 1000.0 * b); }

}  // namespace

TEST_CASE("GeoTIFF reader decodes third-party 8-bit layouts") {
    for (const char* name : {"u8_strip_none.tif", "u8_strip_lzw_pred2.tif", "u8_tiled_deflate.tif", "u8_planar_lzw.tif",
                             "u8_bigtiff_deflate.tif"}) {
        CAPTURE(name);
        raster::GeoTiffReader r(kData / "tiff" / name);
        const auto& info = r.info();
        CHECK(info.width == 70);
        CHECK(info.height == 45);
        CHECK(info.bands == 3);
        CHECK(info.type == raster::SampleType::uint8);
        CHECK(info.crs_code == "EPSG:32736");
        CHECK(info.transform.origin_x == 500000);
        CHECK(info.transform.origin_y == 8000000);
        CHECK(info.transform.pixel_width == 0.5);

        const auto all = r.read_window_u8(0, 0, 70, 45);
        int bad = 0;
        for (int y = 0; y < 45; ++y)
            for (int x = 0; x < 70; ++x)
                for (int b = 0; b < 3; ++b) bad += all[(static_cast<std::size_t>(y) * 70 + x) * 3 + b] != fixture_u8(x, y, b);
        CHECK(bad == 0);

        // A window crossing strip/tile boundaries.
        const auto win = r.read_window_u8(13, 9, 40, 20);
        bad = 0;
        for (int y = 0; y < 20; ++y)
            for (int x = 0; x < 40; ++x)
                for (int b = 0; b < 3; ++b) bad += win[(static_cast<std::size_t>(y) * 40 + x) * 3 + b] != fixture_u8(13 + x, 9 + y, b);
        CHECK(bad == 0);
        CHECK_THROWS_AS(r.read_window_u8(60, 0, 20, 5), Error);
    }
}

TEST_CASE("GeoTIFF reader decodes third-party float layouts") {
    for (const char* name : {"f32_strip_deflate_pred3.tif", "f32_tiled_lzw.tif"}) {
        CAPTURE(name);
        raster::GeoTiffReader r(kData / "tiff" / name);
        CHECK(r.info().type == raster::SampleType::float32);
        CHECK(r.info().bands == 2);
        const auto all = r.read_window_f32(0, 0, 70, 45);
        int bad = 0;
        for (int y = 0; y < 45; ++y)
            for (int x = 0; x < 70; ++x)
                for (int b = 0; b < 2; ++b) bad += all[(static_cast<std::size_t>(y) * 70 + x) * 2 + b] != fixture_f32(x, y, b);
        CHECK(bad == 0);
    }
}

TEST_CASE("GeoTIFF writer round-trips bit-exactly and deterministically") {
    const auto dir = testutil::scratch_dir("io_geotiff");
    std::mt19937_64 rng(1);
    raster::RasterInfo info;
    info.width = 123;
    info.height = 77;
    info.bands = 2;
    info.type = raster::SampleType::float32;
    info.transform = {400000.5, 9100000.25, 100, 100};
    info.crs_code = "EPSG:32737";
    info.nodata = -1;
    std::vector<float> values(static_cast<std::size_t>(info.width) * info.height * info.bands);
    std::normal_distribution<float> nd(10, 30);
    for (auto& v : values) v = nd(rng);
    values[5] = -1;
    raster::write_geotiff(dir / "a.tif", info, std::span<const float>(values));
    raster::write_geotiff(dir / "b.tif", info, std::span<const float>(values));
    CHECK(read_binary_file(dir / "a.tif") == read_binary_file(dir / "b.tif"));

    raster::GeoTiffReader r(dir / "a.tif");
    CHECK(r.info().width == info.width);
    CHECK(r.info().height == info.height);
    CHECK(r.info().bands == 2);
    CHECK(r.info().crs_code == "EPSG:32737");
    CHECK(r.info().transform.origin_x == info.transform.origin_x);
    CHECK(r.info().transform.origin_y == info.transform.origin_y);
    CHECK(r.info().transform.pixel_width == 100);
    REQUIRE(r.info().nodata);
    CHECK(*r.info().nodata == -1);
    const auto back = r.read_window_f32(0, 0, info.width, info.height);
    CHECK(std::memcmp(back.data(), values.data(), values.size() * sizeof(float)) == 0);

    raster::RasterInfo u8info = info;
    u8info.bands = 3;
    u8info.type = raster::SampleType::uint8;
    u8info.nodata.reset();
    std::vector<std::uint8_t> px(static_cast<std::size_t>(u8info.width) * u8info.height * 3);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(rng());
    raster::write_geotiff(dir / "c.tif", u8info, std::span<const std::uint8_t>(px));
    raster::GeoTiffReader r8(dir / "c.tif");
    CHECK(r8.read_window_u8(0, 0, u8info.width, u8info.height) == px);
    CHECK(!r8.info().nodata);

    CHECK_THROWS_AS(raster::GeoTiffReader(dir / "missing.tif"), Error);
    write_file_atomic(dir / "junk.tif", std::string("II*\0garbage", 11));
    CHECK_THROWS_AS(raster::GeoTiffReader(dir / "junk.tif"), Error);
}

TEST_CASE("PNG round-trips and decodes Pillow output") {
    for (int ch : {1, 3, 4}) {
        png::Image img{17, 9, ch, {}};
        for (int i = 0; i < 17 * 9 * ch; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 37));
        const auto back = png::decode(png::encode(img));
        CHECK(back.width == 17);
        CHECK(back.height == 9);
        CHECK(back.channels == ch);
        CHECK(back.pixels == img.pixels);
    }
    const auto rgb = png::read(kData / "pillow_rgb.png");
    REQUIRE(rgb.channels == 3);
    REQUIRE(rgb.width == 5);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) {
            const auto* p = &rgb.pixels[(static_cast<std::size_t>(y) * 5 + x) * 3];
            CHECK(p[0] == (x * 50) % 256);
            CHECK(p[1] == (y * 60) % 256);
            CHECK(p[2] == (x + y) * 10);
        }
    const auto gray = png::read(kData / "pillow_gray.png");
    CHECK(gray.channels == 1);
    CHECK(gray.pixels[6] == 52);
    CHECK_THROWS_AS(png::decode(std::vector<std::uint8_t>{1, 2, 3}), Error);
    CHECK_THROWS_AS(png::encode({2, 2, 2, std::vector<std::uint8_t>(8)}), Error);
}

TEST_CASE("CSV quoting, parsing and number formatting") {
    CHECK(csv::escape("plain") == "plain");
    CHECK(csv::escape("a,b") == "\"a,b\"");
    CHECK(csv::escape("say \"hi\"") == "\"say \"\"hi\"\"\"");
    const auto row = csv::join_row({"x", "a,b", "line\nbreak"});
    const auto t = csv::parse("h1,h2,h3\n" + row + "\n");
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0][1] == "a,b");
    CHECK(t.rows[0][2] == "line\nbreak");
    CHECK(t.column("h2") == 1);
    CHECK_THROWS_WITH_AS(t.column("nope"), doctest::Contains("nope"), Error);
    CHECK(csv::parse("a,b\r\n1,2\r\n").rows[0][1] == "2");

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    for (int i = 0; i < 1000; ++i) {
        const double v = u(rng) * std::pow(10.0, static_cast<int>(rng() % 20) - 10);
        CHECK(csv::parse_double(csv::format_double(v), "v") == v);
    }
    CHECK_THROWS_AS(csv::parse_double("1.5x", "field"), Error);
    CHECK_THROWS_AS(csv::parse_int("2.5", "field"), Error);
    CHECK(csv::parse_int("-42", "f") == -42);
}

TEST_CASE("hashing, seeding and timestamps") {
    CHECK(sha256_hex(std::string_view("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex(std::string_view("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    // Stream k of seed 0 is the (k+1)-th output of the SplitMix64 reference generator started at 0.
    CHECK(mix_seed(0, 0) == 0xE220A8397B1DCDAFULL);
    CHECK(mix_seed(0, 1) == 0x6E789E6AA1B965F4ULL);
    CHECK(mix_seed(7, 3) == mix_seed(7, 3));

    const auto t = parse_timestamp("2024-02-29T13:45:10.123Z");
    CHECK(format_timestamp(t) == "2024-02-29T13:45:10.123Z");
    CHECK_THROWS_AS(parse_timestamp("2023-02-29T00:00:00Z"), Error);
    CHECK(is_calendar_date("2020-02-29"));
    CHECK(!is_calendar_date("2021-02-29"));
    CHECK(!is_calendar_date("2021-2-01"));
}

TEST_CASE("run records stage outputs and clean up after failures") {
    const auto out = testutil::scratch_dir("io_runrecord");
    const nlohmann::json cfg = {{"seed", 1}};
    {
        RunRecord run("demo", out, cfg, "h1");
        run.seed("s", 9);
        run.note("k", "v");
        write_file_atomic(run.output("a.txt"), std::string_view("hello"));
        write_file_atomic(run.output("sub/b.txt"), std::string_view("world"));
        CHECK(!fs::exists(out / "a.txt"));
        const auto m = run.commit();
        CHECK(m["status"] == "ok");
    }
    CHECK(read_text_file(out / "a.txt") == "hello");
    CHECK(read_text_file(out / "sub/b.txt") == "world");
    const auto m = nlohmann::json::parse(read_text_file(out / "demo.run.json"));
    CHECK(m["seeds"]["s"] == 9);
    CHECK(m["config_sha256"] == "h1");
    CHECK(m["outputs"].size() == 2);
    CHECK(m["outputs"][0]["sha256"] == sha256_hex(std::string_view("hello")));
    CHECK(m["versions"].contains("eigen"));

    {
        RunRecord run("demo", out, cfg, "h2");
        write_file_atomic(run.output("a.txt"), std::string_view("half-written"));
        run.fail("boom");
    }
    CHECK(read_text_file(out / "a.txt") == "hello");
    const auto failed = nlohmann::json::parse(read_text_file(out / "demo.failed.run.json"));
    CHECK(failed["status"] == "failed");
    CHECK(failed["error"] == "boom");
    for (const auto& e : fs::directory_iterator(out)) CHECK(e.path().filename().string().rfind(".partial", 0) != 0);

    {
        RunRecord run("demo", out, cfg, "h3");
        run.output("never.txt");
        CHECK_THROWS_AS(run.commit(), Error);
    }
    CHECK(!fs::exists(out / "never.txt"));
}
