#include "doctest.h"

#include "popgrid/common.hpp"
#include "popgrid/geogrid.hpp"
#include "popgrid/geogrid_io.hpp"

#include <algorithm>
#include <random>
#include <set>

using namespace popgrid;
using namespace popgrid::geo;

namespace {

GridDef small_grid(int rows = 3, int cols = 4) {
    GridDef g;
    g.origin_x = 500000;
    g.origin_y = 8000000;
    g.n_rows = rows;
    g.n_cols = cols;
    g.crs_code = "EPSG:32736";
    g.district_id = "D";
    return g;
}

MicrocensusRecord rec(double x, double y, int size, std::string psu = "p1") {
    return {x, y, size, std::move(psu), "2019-05-01"};
}

Tile labelled(const GridDef& g, int r, int c, double pop, std::string region = "R") {
    auto t = make_tile(g, r, c);
    t.population = pop;
    t.status = TileStatus::surveyed;
    t.region_key = std::move(region);
    return t;
}

CurationDecision decide(const std::string& id, Decision d, int ms) {
    return {id, d, "ann", Timestamp{std::chrono::milliseconds(1700000000000LL + ms)}, std::nullopt};
}

}  // namespace

TEST_CASE("cell boxes are half-open, disjoint and tile the extent") {
    const auto g = small_grid();
    const auto ext = g.extent();
    CHECK(ext.min_x == 500000);
    CHECK(ext.max_x == 500400);
    CHECK(ext.max_y == 8000000);
    CHECK(ext.min_y == 7999700);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ux(ext.min_x, ext.max_x), uy(ext.min_y, ext.max_y);
    for (int i = 0; i < 2000; ++i) {
        const double x = ux(rng), y = uy(rng);
        int hits = 0;
        for (int r = 0; r < g.n_rows; ++r)
            for (int c = 0; c < g.n_cols; ++c) hits += g.cell_box(r, c).contains(x, y);
        CHECK(hits == 1);
        const auto cell = g.locate(x, y);
        REQUIRE(cell);
        CHECK(g.cell_box(cell->row, cell->col).contains(x, y));
    }
    // Row 0 is north: its box touches origin_y from below.
    CHECK(g.cell_box(0, 0).max_y == g.origin_y);
    CHECK(!g.locate(ext.max_x, 7999850));
    CHECK(!g.locate(500050, ext.max_y));
    CHECK(g.locate(500050, ext.min_y)->row == 2);
}

TEST_CASE("aggregation sums households per cell and reports out-of-extent records") {
    const auto g = small_grid();
    SUBCASE("three records in one cell") {
        const std::vector<MicrocensusRecord> r{rec(500010, 7999990, 4), rec(500020, 7999950, 2), rec(500099, 7999901, 5)};
        const auto a = aggregate_microcensus(r, g);
        REQUIRE(a.tiles.size() == 1);
        CHECK(*a.tiles[0].population == 11);
        CHECK(a.tiles[0].status == TileStatus::surveyed);
        CHECK(a.tiles[0].tile_id == "D:0:0");
    }
    SUBCASE("a record on a shared vertical edge goes to the right-hand cell") {
        const std::vector<MicrocensusRecord> r{rec(500100, 7999950, 3)};
        const auto a = aggregate_microcensus(r, g);
        REQUIRE(a.tiles.size() == 1);
        CHECK(a.tiles[0].col == 1);
        CHECK(a.tiles[0].row == 0);
    }
    SUBCASE("a record on a shared horizontal edge goes to the cell whose closed lower edge it lies on") {
        const std::vector<MicrocensusRecord> r{rec(500050, 7999900, 3)};
        const auto a = aggregate_microcensus(r, g);
        REQUIRE(a.tiles.size() == 1);
        CHECK(a.tiles[0].row == 0);
    }
    SUBCASE("empty input") {
        const auto a = aggregate_microcensus({}, g);
        CHECK(a.tiles.empty());
        CHECK(a.rejects.empty());
    }
    SUBCASE("outside the extent is reported, not dropped") {
        const std::vector<MicrocensusRecord> r{rec(500010, 7999990, 4), rec(499999, 7999990, 2), rec(500400, 7999990, 1)};
        const auto a = aggregate_microcensus(r, g);
        CHECK(a.accepted == 1);
        REQUIRE(a.rejects.size() == 2);
        CHECK(a.rejects[0].index == 1);
        CHECK(a.rejects[1].index == 2);
        CHECK(!a.rejects[0].reason.empty());
    }
    SUBCASE("mismatched CRS is rejected") {
        const std::vector<MicrocensusRecord> r{rec(500010, 7999990, 4)};
        CHECK_THROWS_AS(aggregate_microcensus(r, g, std::string_view("EPSG:32737")), Error);
        CHECK_NOTHROW(aggregate_microcensus(r, g, std::string_view("epsg:32736")));
    }
}

TEST_CASE("aggregation conserves persons and ignores record order") {
    const auto g = small_grid(6, 7);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> ux(g.origin_x - 50, g.origin_x + 750), uy(g.origin_y - 650, g.origin_y + 50);
    std::uniform_int_distribution<int> size(0, 9);
    std::vector<MicrocensusRecord> records;
    for (int i = 0; i < 500; ++i) records.push_back(rec(ux(rng), uy(rng), size(rng)));

    const auto a = aggregate_microcensus(records, g);
    double accepted_sum = 0;
    std::set<std::size_t> rejected;
    for (const auto& r : a.rejects) rejected.insert(r.index);
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!rejected.count(i)) accepted_sum += records[i].household_size;
    }
    double tile_sum = 0;
    for (const auto& t : a.tiles) tile_sum += *t.population;
    CHECK(tile_sum == accepted_sum);
    CHECK(a.accepted + a.rejects.size() == records.size());

    // Brute-force per-cell oracle.
    for (const auto& t : a.tiles) {
        double expect = 0;
        const auto box = g.cell_box(t.row, t.col);
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (box.contains(records[i].x, records[i].y)) expect += records[i].household_size;
        }
        CHECK(*t.population == expect);
    }

    auto shuffled = records;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto b = aggregate_microcensus(shuffled, g);
    REQUIRE(b.tiles.size() == a.tiles.size());
    for (std::size_t i = 0; i < a.tiles.size(); ++i) {
        CHECK(b.tiles[i].tile_id == a.tiles[i].tile_id);
        CHECK(*b.tiles[i].population == *a.tiles[i].population);
    }
}

TEST_CASE("grid and CRS validation") {
    CHECK(normalize_crs("epsg:32736") == "EPSG:32736");
    CHECK(normalize_crs("urn:ogc:def:crs:EPSG::32736") == "EPSG:32736");
    CHECK_THROWS_AS(normalize_crs("EPSG:4326"), Error);
    CHECK_THROWS_AS(normalize_crs("wgs84"), Error);
    auto g = small_grid();
    CHECK_NOTHROW(g.validate());
    g.cell_size = 0;
    CHECK_THROWS_AS(g.validate(), Error);
    g = small_grid();
    g.n_rows = 0;
    CHECK_THROWS_AS(g.validate(), Error);
}

TEST_CASE("curation: statuses, last write wins, idempotence, unknown ids") {
    const auto g = small_grid();
    std::vector<Tile> tiles{labelled(g, 0, 0, 5), labelled(g, 0, 1, 7), make_tile(g, 2, 3)};
    const std::vector<CurationDecision> log{decide("D:0:0", Decision::exclude, 0), decide("D:0:1", Decision::curate, 1),
                                            decide("D:0:0", Decision::curate, 5), decide("D:2:3", Decision::zero, 2)};
    const auto out = apply_curation(tiles, log);
    CHECK(out[0].status == TileStatus::curated);
    CHECK(*out[0].population == 5);
    CHECK(out[1].status == TileStatus::curated);
    CHECK(out[2].status == TileStatus::zero);
    CHECK(*out[2].population == 0);

    // Later timestamp wins even when listed first.
    const std::vector<CurationDecision> reordered{decide("D:0:0", Decision::exclude, 9), decide("D:0:0", Decision::curate, 5)};
    CHECK(apply_curation(tiles, reordered)[0].status == TileStatus::excluded);

    const auto again = apply_curation(out, log);
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(again[i].status == out[i].status);
        CHECK(again[i].population == out[i].population);
    }
    CHECK(apply_curation(tiles, {}).size() == tiles.size());
    CHECK_THROWS_WITH_AS(apply_curation(tiles, std::vector<CurationDecision>{decide("D:9:9", Decision::curate, 0)}),
                         doctest::Contains("D:9:9"), Error);

    Tile unl = make_tile(g, 1, 1);
    CHECK_THROWS_AS(apply_decision(unl, Decision::curate), Error);
    Tile sur = labelled(g, 1, 2, 3);
    CHECK_THROWS_AS(apply_decision(sur, Decision::zero), Error);
}

TEST_CASE("474 surveyed tiles with 275 exclusions leave 199 curated") {
    GridDef g = small_grid(30, 30);
    std::vector<Tile> tiles;
    std::vector<CurationDecision> log;
    for (int i = 0; i < 474; ++i) {
        tiles.push_back(labelled(g, i / 30, i % 30, 1 + i % 7));
        log.push_back(decide(tiles.back().tile_id, i < 275 ? Decision::exclude : Decision::curate, i));
    }
    const auto out = apply_curation(tiles, log);
    CHECK(std::count_if(out.begin(), out.end(), [](const Tile& t) { return t.status == TileStatus::curated; }) == 199);
}

TEST_CASE("hilbert index is a bijection with unit steps") {
    for (std::uint32_t side : {2u, 4u, 8u, 16u}) {
        std::vector<std::pair<int, int>> by_index(side * side, {-1, -1});
        for (std::uint32_t y = 0; y < side; ++y) {
            for (std::uint32_t x = 0; x < side; ++x) {
                const auto d = hilbert_index(side, x, y);
                REQUIRE(d < side * side);
                CHECK(by_index[d].first == -1);
                by_index[d] = {static_cast<int>(x), static_cast<int>(y)};
            }
        }
        for (std::size_t d = 1; d < by_index.size(); ++d) {
            const int step = std::abs(by_index[d].first - by_index[d - 1].first) + std::abs(by_index[d].second - by_index[d - 1].second);
            CHECK(step == 1);
        }
    }
}

TEST_CASE("spatial folds partition tiles per region") {
    const auto g = small_grid(10, 10);
    SUBCASE("8 tiles, 2 regions, 4 folds: one tile per region in each fold") {
        std::vector<Tile> tiles;
        for (int i = 0; i < 4; ++i) tiles.push_back(labelled(g, 0, i, 1, "W"));
        for (int i = 0; i < 4; ++i) tiles.push_back(labelled(g, 5, 5 + i, 1, "E"));
        const auto f = make_spatial_folds(tiles, 4);
        CHECK(f.assignment.size() == 8);
        for (int k = 0; k < 4; ++k) {
            const auto m = f.members(k);
            REQUIRE(m.size() == 2);
            std::set<std::string> regions;
            for (const auto& id : m) {
                for (const auto& t : tiles)
                    if (t.tile_id == id) regions.insert(t.region_key);
            }
            CHECK(regions.size() == 2);
        }
    }
    SUBCASE("tiles on a line split into contiguous halves") {
        for (int n : {4, 6, 10}) {
            std::vector<Tile> tiles;
            for (int c = 0; c < n; ++c) tiles.push_back(labelled(g, 0, c, 1));
            const auto f = make_spatial_folds(tiles, 2);
            // Brute-force oracle: every fold is a run of consecutive columns with sizes n/2.
            std::vector<int> fold_of_col(n);
            for (int c = 0; c < n; ++c) fold_of_col[c] = f.fold_of(tiles[c].tile_id);
            int changes = 0;
            for (int c = 1; c < n; ++c) changes += fold_of_col[c] != fold_of_col[c - 1];
            CHECK(changes == 1);
            CHECK(std::count(fold_of_col.begin(), fold_of_col.end(), fold_of_col[0]) == n / 2);
        }
    }
    SUBCASE("random tiles: every labelled tile in exactly one fold, balanced counts") {
        std::vector<Tile> tiles;
        for (int r = 0; r < 10; ++r)
            for (int c = 0; c < 10; ++c) {
                if ((r * 7 + c * 3) % 5 == 0) continue;
                tiles.push_back(labelled(g, r, c, r + c, c < 5 ? "W" : "E"));
            }
        tiles.push_back(make_tile(g, 0, 0));  // unlabelled tiles are ignored
        const auto f = make_spatial_folds(tiles, 4);
        CHECK(f.assignment.size() == tiles.size() - 1);
        std::size_t total = 0;
        for (int k = 0; k < 4; ++k) total += f.members(k).size();
        CHECK(total == f.assignment.size());
    }
    SUBCASE("errors") {
        std::vector<Tile> tiles{labelled(g, 0, 0, 1), labelled(g, 0, 1, 1), labelled(g, 0, 2, 1)};
        CHECK_THROWS_AS(make_spatial_folds(tiles, 1), Error);
        CHECK_THROWS_WITH_AS(make_spatial_folds(tiles, 4), doctest::Contains("n_folds"), Error);
    }
}

TEST_CASE("manifest, microcensus and fold files round-trip") {
    const auto g = small_grid();
    std::vector<Tile> tiles{labelled(g, 0, 0, 5.5), make_tile(g, 1, 2)};
    tiles[1].status = TileStatus::zero;
    tiles[1].population = 0;
    const auto dir = std::filesystem::temp_directory_path() / "popgrid_geogrid_test";
    std::filesystem::create_directories(dir);
    save_tile_manifest(dir / "t.jsonl", tiles);
    const auto back = load_tile_manifest(dir / "t.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].tile_id == "D:0:0");
    CHECK(*back[0].population == 5.5);
    CHECK(back[1].status == TileStatus::zero);

    save_grid(dir / "g.json", g);
    CHECK(load_grid(dir / "g.json").same_geometry(g));

    const auto mc = parse_microcensus_csv("x,y,household_size,psu_id,survey_date\n500010,7999990,4,p1,2019-05-01\n");
    REQUIRE(mc.records.size() == 1);
    CHECK(mc.records[0].household_size == 4);
    CHECK(parse_microcensus_csv(format_microcensus_csv(mc.records)).records[0].psu_id == "p1");
    CHECK_THROWS_AS(parse_microcensus_csv("x,y,household_size,psu_id,survey_date\n1,2,-3,p,2019-05-01\n"), Error);
    CHECK_THROWS_AS(parse_microcensus_csv("x,y,household_size,psu_id,survey_date\n1,2,3,p,2019-13-45\n"), Error);

    const auto gj = parse_microcensus_geojson(R"({"type":"FeatureCollection",
      "crs":{"type":"name","properties":{"name":"urn:ogc:def:crs:EPSG::32736"}},
      "features":[{"type":"Feature","geometry":{"type":"Point","coordinates":[500010,7999990]},
      "properties":{"household_size":3,"psu_id":"q","survey_date":"2019-06-02"}}]})");
    REQUIRE(gj.records.size() == 1);
    CHECK(gj.records[0].x == 500010);
    REQUIRE(gj.crs);

    FoldSpec f;
    f.n_folds = 2;
    f.assignment = {{"D:0:0", 0}, {"D:0:1", 1}};
    const auto f2 = parse_folds(format_folds(f));
    CHECK(f2.assignment == f.assignment);
    CHECK(f2.n_folds == 2);
    std::filesystem::remove_all(dir);
}
