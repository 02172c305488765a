#pragma once

#include "popgrid/common.hpp"
#include "popgrid/geogrid.hpp"
#include "popgrid/mapgen.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

namespace popgrid::curation {

class NotFound : public Error {
public:
    using Error::Error;
};
/// A well-formed request the current state does not allow (e.g. curating an unlabelled tile).
class Conflict : public Error {
public:
    using Error::Error;
};
class BadRequest : public Error {
public:
    using Error::Error;
};
/// The state directory cannot be trusted; the service refuses to start.
class CorruptState : public Error {
public:
    using Error::Error;
};

/// Uniform seeded sample, without replacement, of cells whose reference value is exactly 0, per
/// region quota. A cell's region is the region_key of the matching tile in `known`, or the grid's
/// district id. Cells of known tiles that carry a label or a non-unlabelled status, and ids in
/// `skip`, are not eligible. Returned tiles are unlabelled proposals in region, then raster order.
std::vector<geo::Tile> sample_zero_candidates(const mapgen::PopulationRaster& reference, const geo::GridDef& grid,
                                              const std::map<std::string, int>& quotas, std::uint64_t seed,
                                              std::span<const geo::Tile> known = {},
                                              const std::set<std::string>& skip = {});

/// Household location inside a tile, in chip pixel coordinates (0.5 m pixels, origin top-left).
struct SurveyPoint {
    double px = 0;
    double py = 0;
    int household_size = 0;
    std::string psu_id;
};

struct Progress {
    std::map<geo::TileStatus, std::size_t> by_status;
    std::size_t total = 0;
    std::size_t pending_proposals = 0;  ///< unlabelled tiles proposed as zero and not yet decided

    nlohmann::json to_json() const;
};

/// File names inside a state directory.
namespace layout {
inline constexpr const char* grid = "grid.json";
inline constexpr const char* tiles = "tiles.jsonl";
inline constexpr const char* chips = "chips";
inline constexpr const char* reference = "reference.tif";
inline constexpr const char* survey = "survey.csv";
inline constexpr const char* decisions = "decisions.jsonl";
inline constexpr const char* proposals = "proposals.jsonl";
inline constexpr const char* snapshot = "snapshot.json";
}  // namespace layout

struct StateSeed {
    geo::GridDef grid;
    std::vector<geo::Tile> tiles;
    std::map<std::string, std::vector<std::uint8_t>> chip_png;  ///< tile_id -> encoded PNG
    std::optional<mapgen::PopulationRaster> reference;
    std::vector<geo::MicrocensusRecord> survey;
};

/// Creates a fresh state directory. Refuses to overwrite one that already holds a decision log.
void initialise_state(const std::filesystem::path& dir, const StateSeed& seed);

/// The service state: base tiles plus the append-only decision log. Readers share a lock; every
/// write is serialised, appended and fsync'ed before the in-memory state changes.
class CurationStore {
public:
    /// Loads and cross-checks the state directory; throws CorruptState with a diagnostic.
    explicit CurationStore(std::filesystem::path dir);

    const std::filesystem::path& dir() const { return dir_; }
    const geo::GridDef& grid() const { return grid_; }

    std::vector<geo::Tile> tiles(std::optional<geo::TileStatus> status = {}, const std::string& region = {}) const;
    geo::Tile tile(const std::string& id) const;
    bool proposed(const std::string& id) const;
    std::vector<SurveyPoint> survey_points(const std::string& id) const;
    std::vector<geo::CurationDecision> decisions(const std::string& id = {}) const;
    Progress progress() const;

    /// Validates, logs and applies one decision; returns the updated tile.
    geo::Tile decide(const std::string& id, geo::Decision decision, const std::string& annotator,
                     std::optional<std::string> note = {});
    /// Samples zero-population proposals from the reference raster and records them.
    std::vector<geo::Tile> propose_zero(const std::map<std::string, int>& quotas, std::uint64_t seed);

    std::optional<std::vector<std::uint8_t>> chip_png(const std::string& id) const;
    /// 5x5-cell neighbourhood of the reference raster around the tile, grey by value, tile outlined.
    std::vector<std::uint8_t> reference_png(const std::string& id) const;

    /// Statuses recomputed from the base tiles and the on-disk log, independent of memory state.
    std::vector<geo::Tile> replay_from_disk() const;

private:
    std::size_t index_of(const std::string& id) const;
    void write_snapshot() const;

    std::filesystem::path dir_;
    geo::GridDef grid_;
    std::vector<geo::Tile> base_;
    std::vector<geo::Tile> current_;
    std::map<std::string, std::size_t> index_;
    std::set<std::string> proposed_;
    std::vector<geo::CurationDecision> log_;
    std::optional<mapgen::PopulationRaster> reference_;
    std::map<std::string, std::vector<SurveyPoint>> survey_;
    Timestamp last_timestamp_{};
    mutable std::shared_mutex mutex_;
};

// ---- HTTP surface ---------------------------------------------------------------------------

struct ApiRequest {
    std::string method;
    std::string path;
    std::map<std::string, std::string> query;
    std::string body;
};

struct ApiResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

/// Routes one request. Transport-independent so the API can be exercised without sockets.
ApiResponse handle(CurationStore& store, const ApiRequest& request);

/// httplib server bound to `host`; port 0 picks a free port.
class HttpServer {
public:
    explicit HttpServer(CurationStore& store);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    /// Starts listening on a background thread and returns the bound port.
    int start(const std::string& host, int port);
    /// Blocks until stop() is called from another thread or a signal handler.
    void listen(const std::string& host, int port);
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace popgrid::curation
