#include "doctest.h"
#include "test_util.hpp"

#include "popgrid/curation.hpp"
#include "popgrid/geogrid_io.hpp"
#include "popgrid/png_io.hpp"
#include "popgrid/synth.hpp"

#include <httplib.h>

#include <atomic>
#include <fstream>
#include <thread>

using namespace popgrid;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

geo::GridDef grid_of(int rows, int cols) {
    geo::GridDef g;
    g.origin_x = 400000;
    g.origin_y = 8000000;
    g.n_rows = rows;
    g.n_cols = cols;
    g.crs_code = "EPSG:32736";
    g.district_id = "Q";
    return g;
}

/// 4x5 synthetic district: 18 surveyed tiles plus 2 unlabelled cells that the reference raster
/// marks as empty.
curation::StateSeed session_seed() {
    synth::Config cfg;
    cfg.n_rows = 4;
    cfg.n_cols = 5;
    cfg.seed = 17;
    auto data = synth::make_dataset(cfg);
    curation::StateSeed seed;
    seed.grid = data.grid;
    seed.tiles = data.tiles;
    seed.reference = mapgen::PopulationRaster::empty(data.grid);
    for (auto& v : seed.reference->values) v = 7.0;
    for (std::size_t i : {std::size_t{6}, std::size_t{13}}) {
        seed.tiles[i].population.reset();
        seed.tiles[i].status = geo::TileStatus::unlabelled;
        seed.reference->at(seed.tiles[i].row, seed.tiles[i].col) = 0.0;
    }
    for (std::size_t i = 0; i < data.chips.size(); ++i) {
        png::Image img{imagery::kRawSize, imagery::kRawSize, 3, data.chips[i].pixels_raw};
        seed.chip_png[data.tiles[i].tile_id] = png::encode(img);
    }
    seed.survey = data.households;
    return seed;
}

curation::ApiResponse call(curation::CurationStore& store, const std::string& method, const std::string& path,
                           const json& body = nullptr, std::map<std::string, std::string> query = {}) {
    return curation::handle(store, {method, path, std::move(query), body.is_null() ? std::string{} : body.dump()});
}

json decide_body(const std::string& decision, const std::string& who = "ana") {
    return {{"decision", decision}, {"annotator", who}};
}

std::map<std::string, std::string> statuses(const std::vector<geo::Tile>& tiles) {
    std::map<std::string, std::string> out;
    for (const auto& t : tiles) {
        out[t.tile_id] = std::string(geo::to_string(t.status)) + "/" + (t.population ? std::to_string(*t.population) : "-");
    }
    return out;
}

}  // namespace

TEST_CASE("zero candidates: quotas, determinism, errors") {
    auto grid = grid_of(10, 10);
    auto ref = mapgen::PopulationRaster::empty(grid);
    std::vector<geo::Tile> known;
    for (int r = 0; r < 10; ++r) {
        for (int c = 0; c < 10; ++c) {
            ref.at(r, c) = (r + c) % 3 == 0 ? 0.0 : 12.0;
            auto t = geo::make_tile(grid, r, c);
            t.region_key = c < 5 ? "BOA" : "MGD";
            known.push_back(t);
        }
    }
    const auto a = curation::sample_zero_candidates(ref, grid, {{"BOA", 10}, {"MGD", 5}}, 9, known);
    REQUIRE(a.size() == 15);
    int boa = 0;
    std::set<std::string> ids;
    for (const auto& t : a) {
        boa += t.region_key == "BOA" ? 1 : 0;
        CHECK(ref.at(t.row, t.col) == 0.0);
        CHECK(t.status == geo::TileStatus::unlabelled);
        ids.insert(t.tile_id);
    }
    CHECK(boa == 10);
    CHECK(ids.size() == 15);
    const auto b = curation::sample_zero_candidates(ref, grid, {{"BOA", 10}, {"MGD", 5}}, 9, known);
    CHECK(statuses(a) == statuses(b));
    const auto c = curation::sample_zero_candidates(ref, grid, {{"BOA", 10}, {"MGD", 5}}, 10, known);
    CHECK(statuses(a) != statuses(c));

    // Labelled tiles are never proposed even where the reference is zero.
    for (auto& t : known) {
        if (t.region_key == "MGD") t.population = 3.0, t.status = geo::TileStatus::surveyed;
    }
    CHECK_THROWS_WITH_AS(curation::sample_zero_candidates(ref, grid, {{"MGD", 1}}, 1, known),
                         doctest::Contains("only 0 eligible"), Error);
    CHECK_THROWS_WITH_AS(curation::sample_zero_candidates(ref, grid, {{"BOA", 18}}, 1, known),
                         doctest::Contains("only 17 eligible"), Error);

    for (auto& v : ref.values) v = 1.0;
    CHECK_THROWS_WITH_AS(curation::sample_zero_candidates(ref, grid, {{"BOA", 1}}, 1, known),
                         doctest::Contains("no zero cells"), Error);
    CHECK_THROWS_AS(curation::sample_zero_candidates(ref, grid_of(10, 11), {{"BOA", 1}}, 1), Error);
}

TEST_CASE("zero candidates are a uniform sample") {
    // 6 eligible cells, 2 drawn: each cell should appear with probability 1/3.
    const auto grid = grid_of(2, 3);
    auto ref = mapgen::PopulationRaster::empty(grid);
    for (auto& v : ref.values) v = 0.0;
    std::map<std::string, int> hits;
    std::map<std::pair<std::string, std::string>, int> pairs;
    constexpr int kTrials = 6000;
    for (int s = 0; s < kTrials; ++s) {
        const auto out = curation::sample_zero_candidates(ref, grid, {{"Q", 2}}, static_cast<std::uint64_t>(s));
        REQUIRE(out.size() == 2);
        for (const auto& t : out) ++hits[t.tile_id];
        ++pairs[{out[0].tile_id, out[1].tile_id}];
    }
    CHECK(hits.size() == 6);
    for (const auto& [id, n] : hits) CHECK(std::abs(n / double(kTrials) - 1.0 / 3) < 0.03);
    CHECK(pairs.size() == 15);  // all C(6,2) subsets occur
    for (const auto& [p, n] : pairs) CHECK(std::abs(n / double(kTrials) - 1.0 / 15) < 0.02);
}

TEST_CASE("scripted curation session and restart replay") {
    const auto dir = testutil::scratch_dir("curation_session");
    curation::initialise_state(dir, session_seed());
    std::map<std::string, std::string> before_restart;
    {
        curation::CurationStore store(dir);
        auto progress = json::parse(call(store, "GET", "/api/progress").body);
        CHECK(progress["total"] == 20);
        CHECK(progress["surveyed"] == 18);
        CHECK(progress["unlabelled"] == 2);

        const auto prop = call(store, "POST", "/api/zero-candidates", {{"quotas", {{"SYN-W", 1}, {"SYN-E", 1}}}, {"seed", 3}});
        REQUIRE(prop.status == 200);
        const auto proposals = json::parse(prop.body)["proposals"];
        REQUIRE(proposals.size() == 2);
        CHECK(json::parse(call(store, "GET", "/api/progress").body)["pending_proposals"] == 2);

        const auto list = json::parse(call(store, "GET", "/api/tiles", nullptr, {{"status", "surveyed"}, {"page_size", "100"}}).body);
        REQUIRE(list["total"] == 18);
        int n = 0;
        for (const auto& t : list["tiles"]) {
            const auto id = t["tile_id"].get<std::string>();
            const auto res = call(store, "POST", "/api/tiles/" + id + "/decision", decide_body(n < 10 ? "exclude" : "curate"));
            CHECK(res.status == 200);
            ++n;
        }
        for (const auto& p : proposals) {
            const auto id = p["tile_id"].get<std::string>();
            const auto res = call(store, "POST", "/api/tiles/" + id + "/decision", decide_body("zero"));
            REQUIRE(res.status == 200);
            CHECK(json::parse(res.body)["population"] == 0.0);
        }
        progress = json::parse(call(store, "GET", "/api/progress").body);
        CHECK(progress["excluded"] == 10);
        CHECK(progress["curated"] == 8);
        CHECK(progress["zero"] == 2);
        CHECK(progress["surveyed"] == 0);
        CHECK(progress["unlabelled"] == 0);
        CHECK(progress["pending_proposals"] == 0);
        CHECK(progress["total"] == 20);
        before_restart = statuses(store.tiles());
        CHECK(statuses(store.replay_from_disk()) == before_restart);
    }
    curation::CurationStore again(dir);
    CHECK(statuses(again.tiles()) == before_restart);
    CHECK(again.decisions().size() == 20);

    // Replaying the raw log against the raw manifest, without the service, agrees too.
    std::vector<geo::CurationDecision> log;
    std::ifstream in(dir / curation::layout::decisions);
    for (std::string line; std::getline(in, line);) log.push_back(json::parse(line).get<geo::CurationDecision>());
    auto base = geo::load_tile_manifest(dir / curation::layout::tiles);
    const auto replayed = geo::apply_curation(base, log);
    CHECK(statuses(replayed) == before_restart);
}

TEST_CASE("decisions: read-your-writes, last write wins, audit trail, errors") {
    const auto dir = testutil::scratch_dir("curation_rules");
    const auto seed = session_seed();
    curation::initialise_state(dir, seed);
    curation::CurationStore store(dir);
    const auto id = seed.tiles[0].tile_id;
    const auto unlabelled = seed.tiles[6].tile_id;

    CHECK(call(store, "POST", "/api/tiles/" + id + "/decision", decide_body("exclude")).status == 200);
    CHECK(json::parse(call(store, "GET", "/api/tiles/" + id).body)["status"] == "excluded");
    CHECK(call(store, "POST", "/api/tiles/" + id + "/decision", {{"decision", "curate"}, {"annotator", "bo"}, {"note", "GPS ok"}}).status == 200);
    const auto detail = json::parse(call(store, "GET", "/api/tiles/" + id).body);
    CHECK(detail["status"] == "curated");
    REQUIRE(detail["decisions"].size() == 2);
    CHECK(detail["decisions"][1]["note"] == "GPS ok");
    CHECK(parse_timestamp(detail["decisions"][0]["timestamp"].get<std::string>()) <
          parse_timestamp(detail["decisions"][1]["timestamp"].get<std::string>()));
    CHECK(!detail["survey_points"].empty());
    for (const auto& p : detail["survey_points"]) {
        CHECK(p["px"].get<double>() >= 0);
        CHECK(p["px"].get<double>() < 200);
        CHECK(p["py"].get<double>() >= 0);
        CHECK(p["py"].get<double>() < 200);
    }

    CHECK(call(store, "POST", "/api/tiles/nope/decision", decide_body("exclude")).status == 404);
    CHECK(call(store, "GET", "/api/tiles/nope").status == 404);
    CHECK(call(store, "POST", "/api/tiles/" + unlabelled + "/decision", decide_body("curate")).status == 409);
    CHECK(call(store, "POST", "/api/tiles/" + id + "/decision", decide_body("zero")).status == 409);
    CHECK(call(store, "POST", "/api/tiles/" + id + "/decision", decide_body("maybe")).status == 400);
    CHECK(call(store, "POST", "/api/tiles/" + id + "/decision", decide_body("exclude", "")).status == 400);
    CHECK(call(store, "POST", "/api/tiles/" + id + "/decision", {{"decision", "exclude"}, {"annotator", "a"}, {"colour", 1}}).status == 400);
    CHECK(curation::handle(store, {"POST", "/api/tiles/" + id + "/decision", {}, "{not json"}).status == 400);
    CHECK(call(store, "DELETE", "/api/tiles/" + id).status == 405);
    CHECK(call(store, "GET", "/api/tiles", nullptr, {{"status", "weird"}}).status == 400);
    CHECK(call(store, "GET", "/api/tiles", nullptr, {{"page", "0"}}).status == 400);
    CHECK(store.decisions().size() == 2);

    // GET never mutates: the log and snapshot bytes are unchanged by reads.
    const auto log_before = read_text_file(dir / curation::layout::decisions);
    const auto snap_before = read_text_file(dir / curation::layout::snapshot);
    call(store, "GET", "/api/tiles");
    call(store, "GET", "/api/tiles/" + id);
    call(store, "GET", "/api/progress");
    call(store, "GET", "/api/decisions");
    CHECK(call(store, "GET", "/api/tiles/" + id + "/image.png").status == 200);
    const auto ref = call(store, "GET", "/api/tiles/" + id + "/image.png", nullptr, {{"layer", "reference"}});
    REQUIRE(ref.status == 200);
    const auto thumb = png::decode(std::span(reinterpret_cast<const std::uint8_t*>(ref.body.data()), ref.body.size()));
    CHECK(thumb.width == 200);
    CHECK(read_text_file(dir / curation::layout::decisions) == log_before);
    CHECK(read_text_file(dir / curation::layout::snapshot) == snap_before);

    // Paging.
    const auto p2 = json::parse(call(store, "GET", "/api/tiles", nullptr, {{"page", "2"}, {"page_size", "7"}}).body);
    CHECK(p2["total"] == 20);
    CHECK(p2["tiles"].size() == 7);
    const auto p3 = json::parse(call(store, "GET", "/api/tiles", nullptr, {{"page", "3"}, {"page_size", "7"}}).body);
    CHECK(p3["tiles"].size() == 6);

    // Counts always add up to the total.
    const auto progress = json::parse(call(store, "GET", "/api/progress").body);
    int sum = 0;
    for (const char* k : {"unlabelled", "surveyed", "curated", "excluded", "zero"}) sum += progress[k].get<int>();
    CHECK(sum == progress["total"].get<int>());
}

TEST_CASE("corrupt state refuses to start") {
    const auto seed = session_seed();
    auto fresh = [&](const std::string& name) {
        const auto dir = testutil::scratch_dir(name);
        curation::initialise_state(dir, seed);
        return dir;
    };
    auto append = [](const fs::path& p, const std::string& text) {
        std::ofstream out(p, std::ios::app);
        out << text;
    };
    const auto id = seed.tiles[0].tile_id;
    const std::string good = R"({"tile_id":")" + id + R"(","decision":"exclude","annotator":"a","timestamp":"2026-01-01T00:00:00.000Z"})";

    {
        const auto dir = fresh("corrupt_partial");
        append(dir / curation::layout::decisions, good.substr(0, 30));
        CHECK_THROWS_WITH_AS(curation::CurationStore{dir}, doctest::Contains("incomplete"), curation::CorruptState);
    }
    {
        const auto dir = fresh("corrupt_garbage");
        append(dir / curation::layout::decisions, "garbage\n");
        CHECK_THROWS_AS(curation::CurationStore{dir}, curation::CorruptState);
    }
    {
        const auto dir = fresh("corrupt_unknown");
        auto line = good;
        line.replace(line.find(id), id.size(), "ghost");
        append(dir / curation::layout::decisions, line + "\n");
        CHECK_THROWS_WITH_AS(curation::CurationStore{dir}, doctest::Contains("ghost"), curation::CorruptState);
    }
    {
        const auto dir = fresh("corrupt_snapshot");
        { curation::CurationStore s(dir); s.decide(id, geo::Decision::exclude, "a"); }
        auto snap = json::parse(read_text_file(dir / curation::layout::snapshot));
        snap["tiles"][0]["status"] = "curated";
        write_file_atomic(dir / curation::layout::snapshot, snap.dump());
        CHECK_THROWS_WITH_AS(curation::CurationStore{dir}, doctest::Contains("disagrees"), curation::CorruptState);
    }
    {
        const auto dir = fresh("corrupt_truncated_log");
        { curation::CurationStore s(dir); s.decide(id, geo::Decision::exclude, "a"); }
        write_file_atomic(dir / curation::layout::decisions, std::string_view{});
        CHECK_THROWS_WITH_AS(curation::CurationStore{dir}, doctest::Contains("truncated"), curation::CorruptState);
    }
    {
        // A snapshot that lags the log (crash after the append) is rebuilt, not rejected.
        const auto dir = fresh("lagging_snapshot");
        append(dir / curation::layout::decisions, good + "\n");
        curation::CurationStore s(dir);
        CHECK(s.tile(id).status == geo::TileStatus::excluded);
    }
    {
        const auto dir = fresh("corrupt_missing");
        fs::remove(dir / curation::layout::tiles);
        CHECK_THROWS_WITH_AS(curation::CurationStore{dir}, doctest::Contains("tiles.jsonl"), curation::CorruptState);
    }
    {
        const auto dir = fresh("no_overwrite");
        { curation::CurationStore s(dir); s.decide(id, geo::Decision::exclude, "a"); }
        CHECK_THROWS_AS(curation::initialise_state(dir, seed), Error);
    }
}

TEST_CASE("HTTP service with concurrent readers") {
    const auto dir = testutil::scratch_dir("curation_http");
    const auto seed = session_seed();
    curation::initialise_state(dir, seed);
    curation::CurationStore store(dir);
    curation::HttpServer server(store);
    const int port = server.start("127.0.0.1", 0);
    REQUIRE(port > 0);

    std::atomic<bool> done{false};
    std::atomic<int> read_failures{0}, reads{0};
    std::vector<std::thread> readers;
    for (int r = 0; r < 3; ++r) {
        readers.emplace_back([&] {
            httplib::Client cli("127.0.0.1", port);
            while (!done) {
                const auto res = cli.Get("/api/progress");
                if (!res || res->status != 200) {
                    ++read_failures;
                    continue;
                }
                const auto p = json::parse(res->body);
                int sum = 0;
                for (const char* k : {"unlabelled", "surveyed", "curated", "excluded", "zero"}) sum += p[k].get<int>();
                if (sum != 20) ++read_failures;
                ++reads;
            }
        });
    }
    httplib::Client cli("127.0.0.1", port);
    for (int i = 0; i < 10; ++i) {
        const auto& t = seed.tiles[i == 6 ? 19 : i];
        const auto res = cli.Post("/api/tiles/" + t.tile_id + "/decision", decide_body("exclude").dump(), "application/json");
        REQUIRE(res);
        CHECK(res->status == 200);
        CHECK(json::parse(res->body)["status"] == "excluded");
    }
    done = true;
    for (auto& t : readers) t.join();
    CHECK(read_failures == 0);
    CHECK(reads > 0);

    const auto img = cli.Get("/api/tiles/" + seed.tiles[1].tile_id + "/image.png");
    REQUIRE(img);
    CHECK(img->status == 200);
    CHECK(img->get_header_value("Content-Type") == "image/png");
    const auto missing = cli.Get("/api/tiles/zzz");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    server.stop();
    CHECK(json::parse(call(store, "GET", "/api/progress").body)["excluded"] == 10);
}
