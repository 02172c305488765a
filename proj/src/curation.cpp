#include "popgrid/curation.hpp"

#include "popgrid/geogrid_io.hpp"
#include "popgrid/png_io.hpp"

#include <spdlog/spdlog.h>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <mutex>
#include <random>
#include <sstream>

namespace popgrid::curation {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<geo::Tile> sample_zero_candidates(const mapgen::PopulationRaster& reference, const geo::GridDef& grid,
                                              const std::map<std::string, int>& quotas, std::uint64_t seed,
                                              std::span<const geo::Tile> known, const std::set<std::string>& skip) {
    grid.validate();
    if (!reference.grid.same_geometry(grid)) {
        throw Error("sample_zero_candidates: the reference raster is not aligned to the analysis grid");
    }
    std::map<std::string, const geo::Tile*> by_id;
    for (const auto& t : known) by_id[t.tile_id] = &t;

    std::map<std::string, std::vector<geo::Tile>> pool;
    std::size_t zero_cells = 0;
    for (int r = 0; r < grid.n_rows; ++r) {
        for (int c = 0; c < grid.n_cols; ++c) {
            const double v = reference.at(r, c);
            if (std::isnan(v) || v != 0.0) continue;
            ++zero_cells;
            auto tile = geo::make_tile(grid, r, c);
            if (skip.contains(tile.tile_id)) continue;
            if (const auto it = by_id.find(tile.tile_id); it != by_id.end()) {
                if (it->second->labelled() || it->second->status != geo::TileStatus::unlabelled) continue;
                tile.region_key = it->second->region_key;
            }
            pool[tile.region_key].push_back(std::move(tile));
        }
    }
    if (zero_cells == 0) throw Error("sample_zero_candidates: the reference raster has no zero cells");

    std::vector<geo::Tile> out;
    std::mt19937_64 rng(seed);
    for (const auto& [region, quota] : quotas) {
        if (quota < 0) throw Error("sample_zero_candidates: negative quota for region '" + region + "'");
        auto& cells = pool[region];
        if (static_cast<std::size_t>(quota) > cells.size()) {
            throw Error("sample_zero_candidates: region '" + region + "' asks for " + std::to_string(quota) +
                        " zero tiles but only " + std::to_string(cells.size()) + " eligible zero cells are available");
        }
        // Partial Fisher-Yates: the first `quota` positions become a uniform sample.
        for (int i = 0; i < quota; ++i) {
            std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), cells.size() - 1);
            std::swap(cells[static_cast<std::size_t>(i)], cells[pick(rng)]);
        }
        std::vector<geo::Tile> chosen(cells.begin(), cells.begin() + quota);
        std::sort(chosen.begin(), chosen.end(),
                  [](const geo::Tile& a, const geo::Tile& b) { return std::pair(a.row, a.col) < std::pair(b.row, b.col); });
        for (auto& t : chosen) out.push_back(std::move(t));
    }
    return out;
}

json Progress::to_json() const {
    json j = json::object();
    for (auto s : {geo::TileStatus::unlabelled, geo::TileStatus::surveyed, geo::TileStatus::curated,
                   geo::TileStatus::excluded, geo::TileStatus::zero}) {
        const auto it = by_status.find(s);
        j[std::string(geo::to_string(s))] = it == by_status.end() ? 0 : it->second;
    }
    j["total"] = total;
    j["pending_proposals"] = pending_proposals;
    return j;
}

// ---- state directory ------------------------------------------------------------------------

namespace {

void append_line_durable(const fs::path& path, const std::string& line) {
    const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
    if (fd < 0) throw Error("cannot open " + path.string() + ": " + std::strerror(errno));
    const std::string data = line + "\n";
    std::size_t done = 0;
    while (done < data.size()) {
        const auto n = ::write(fd, data.data() + done, data.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            const std::string why = std::strerror(errno);
            ::close(fd);
            throw Error("cannot append to " + path.string() + ": " + why);
        }
        done += static_cast<std::size_t>(n);
    }
    const bool synced = ::fsync(fd) == 0;
    ::close(fd);
    if (!synced) throw Error("fsync failed for " + path.string());
}

/// Parses a JSON-lines file; a final line without its newline means an interrupted write.
std::vector<json> read_jsonl(const fs::path& path) {
    std::vector<json> out;
    if (!fs::exists(path)) return out;
    const auto text = read_text_file(path);
    if (!text.empty() && text.back() != '\n') {
        throw CorruptState(path.string() + ": the last line is incomplete (interrupted write?); inspect and remove it");
    }
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const std::exception& e) {
            throw CorruptState(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

json tile_status_json(const geo::Tile& t) {
    return {{"tile_id", t.tile_id},
            {"status", geo::to_string(t.status)},
            {"population", t.population ? json(*t.population) : json(nullptr)}};
}

std::string proposal_line(const geo::Tile& t, std::uint64_t seed) {
    return json{{"tile", t}, {"seed", seed}, {"timestamp", format_timestamp(now_utc())}}.dump();
}

}  // namespace

void initialise_state(const fs::path& dir, const StateSeed& seed) {
    if (fs::exists(dir / layout::decisions) && fs::file_size(dir / layout::decisions) > 0) {
        throw Error(dir.string() + " already holds a decision log; refusing to overwrite it");
    }
    seed.grid.validate();
    fs::create_directories(dir / layout::chips);
    geo::save_grid(dir / layout::grid, seed.grid);
    geo::save_tile_manifest(dir / layout::tiles, seed.tiles);
    for (const auto& [id, bytes] : seed.chip_png) write_file_atomic(dir / layout::chips / (id + ".png"), bytes);
    if (seed.reference) mapgen::export_geotiff(*seed.reference, dir / layout::reference);
    if (!seed.survey.empty()) write_file_atomic(dir / layout::survey, geo::format_microcensus_csv(seed.survey));
    for (const char* f : {layout::decisions, layout::proposals, layout::snapshot}) fs::remove(dir / f);
    write_file_atomic(dir / layout::decisions, std::string_view{});
}

CurationStore::CurationStore(fs::path dir) : dir_(std::move(dir)) {
    auto need = [&](const char* name) {
        if (!fs::exists(dir_ / name)) throw CorruptState(dir_.string() + ": missing " + name);
    };
    need(layout::grid);
    need(layout::tiles);
    need(layout::chips);
    try {
        grid_ = geo::load_grid(dir_ / layout::grid);
        base_ = geo::load_tile_manifest(dir_ / layout::tiles);
    } catch (const CorruptState&) {
        throw;
    } catch (const std::exception& e) {
        throw CorruptState(std::string("state manifest: ") + e.what());
    }
    for (std::size_t i = 0; i < base_.size(); ++i) index_[base_[i].tile_id] = i;

    for (const auto& j : read_jsonl(dir_ / layout::proposals)) {
        geo::Tile t;
        try {
            t = j.at("tile").get<geo::Tile>();
        } catch (const std::exception& e) {
            throw CorruptState(std::string(layout::proposals) + ": " + e.what());
        }
        if (t.row < 0 || t.row >= grid_.n_rows || t.col < 0 || t.col >= grid_.n_cols ||
            t.tile_id != geo::make_tile_id(grid_.district_id, t.row, t.col)) {
            throw CorruptState(std::string(layout::proposals) + ": tile '" + t.tile_id + "' is not a cell of the grid");
        }
        if (!index_.contains(t.tile_id)) {
            index_[t.tile_id] = base_.size();
            base_.push_back(t);
        }
        proposed_.insert(t.tile_id);
    }

    for (const auto& j : read_jsonl(dir_ / layout::decisions)) {
        try {
            log_.push_back(j.get<geo::CurationDecision>());
        } catch (const std::exception& e) {
            throw CorruptState(std::string(layout::decisions) + ": entry " + std::to_string(log_.size() + 1) + ": " + e.what());
        }
        last_timestamp_ = std::max(last_timestamp_, log_.back().timestamp);
    }
    try {
        current_ = geo::apply_curation(base_, log_);
    } catch (const std::exception& e) {
        throw CorruptState(std::string("replaying the decision log failed: ") + e.what());
    }

    // The snapshot is derived; it may lag the log by a crash, but never lead or disagree.
    if (fs::exists(dir_ / layout::snapshot)) {
        json snap;
        try {
            snap = json::parse(read_text_file(dir_ / layout::snapshot));
        } catch (const std::exception& e) {
            throw CorruptState(std::string(layout::snapshot) + ": " + e.what());
        }
        const auto n = snap.value("n_decisions", std::size_t{0});
        if (n > log_.size()) {
            throw CorruptState("snapshot covers " + std::to_string(n) + " decisions but the log holds only " +
                               std::to_string(log_.size()) + "; the log was truncated");
        }
        if (n == log_.size()) {
            std::map<std::string, json> expected;
            for (const auto& t : current_) expected[t.tile_id] = tile_status_json(t);
            for (const auto& s : snap.value("tiles", json::array())) {
                const auto id = s.value("tile_id", std::string{});
                const auto it = expected.find(id);
                if (it == expected.end() || it->second != s) {
                    throw CorruptState("snapshot disagrees with the decision log for tile '" + id + "'");
                }
            }
        } else {
            spdlog::warn("snapshot lags the decision log ({} of {} decisions); rebuilding it", n, log_.size());
        }
    }

    if (fs::exists(dir_ / layout::reference)) {
        try {
            reference_ = mapgen::import_geotiff(dir_ / layout::reference, grid_);
        } catch (const std::exception& e) {
            throw CorruptState(std::string(layout::reference) + ": " + e.what());
        }
    }
    if (fs::exists(dir_ / layout::survey)) {
        geo::MicrocensusInput input;
        try {
            input = geo::parse_microcensus_csv(read_text_file(dir_ / layout::survey));
        } catch (const std::exception& e) {
            throw CorruptState(std::string(layout::survey) + ": " + e.what());
        }
        const double px_per_m = imagery::kRawSize / grid_.cell_size;
        for (const auto& rec : input.records) {
            const auto cell = grid_.locate(rec.x, rec.y);
            if (!cell) continue;
            const auto box = grid_.cell_box(cell->row, cell->col);
            survey_[geo::make_tile_id(grid_.district_id, cell->row, cell->col)].push_back(
                {(rec.x - box.min_x) * px_per_m, (box.max_y - rec.y) * px_per_m, rec.household_size, rec.psu_id});
        }
    }
    std::size_t missing = 0;
    for (const auto& t : base_) missing += fs::exists(dir_ / layout::chips / (t.tile_id + ".png")) ? 0 : 1;
    if (missing > 0) spdlog::warn("{} of {} tiles have no cached chip", missing, base_.size());
    write_snapshot();
    spdlog::info("curation state loaded: {} tiles, {} decisions", base_.size(), log_.size());
}

std::size_t CurationStore::index_of(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw NotFound("unknown tile '" + id + "'");
    return it->second;
}

void CurationStore::write_snapshot() const {
    json tiles = json::array();
    for (const auto& t : current_) tiles.push_back(tile_status_json(t));
    write_file_atomic(dir_ / layout::snapshot, json{{"n_decisions", log_.size()}, {"tiles", tiles}}.dump() + "\n");
}

std::vector<geo::Tile> CurationStore::tiles(std::optional<geo::TileStatus> status, const std::string& region) const {
    std::shared_lock lock(mutex_);
    std::vector<geo::Tile> out;
    for (const auto& t : current_) {
        if (status && t.status != *status) continue;
        if (!region.empty() && t.region_key != region) continue;
        out.push_back(t);
    }
    return out;
}

geo::Tile CurationStore::tile(const std::string& id) const {
    std::shared_lock lock(mutex_);
    return current_[index_of(id)];
}

bool CurationStore::proposed(const std::string& id) const {
    std::shared_lock lock(mutex_);
    return proposed_.contains(id);
}

std::vector<SurveyPoint> CurationStore::survey_points(const std::string& id) const {
    std::shared_lock lock(mutex_);
    index_of(id);
    const auto it = survey_.find(id);
    return it == survey_.end() ? std::vector<SurveyPoint>{} : it->second;
}

std::vector<geo::CurationDecision> CurationStore::decisions(const std::string& id) const {
    std::shared_lock lock(mutex_);
    if (id.empty()) return log_;
    index_of(id);
    std::vector<geo::CurationDecision> out;
    for (const auto& d : log_) {
        if (d.tile_id == id) out.push_back(d);
    }
    return out;
}

Progress CurationStore::progress() const {
    std::shared_lock lock(mutex_);
    Progress p;
    p.total = current_.size();
    for (const auto& t : current_) {
        ++p.by_status[t.status];
        if (t.status == geo::TileStatus::unlabelled && proposed_.contains(t.tile_id)) ++p.pending_proposals;
    }
    return p;
}

geo::Tile CurationStore::decide(const std::string& id, geo::Decision decision, const std::string& annotator,
                                std::optional<std::string> note) {
    if (annotator.empty()) throw BadRequest("annotator must not be empty");
    std::unique_lock lock(mutex_);
    const auto i = index_of(id);
    geo::Tile updated = current_[i];
    try {
        geo::apply_decision(updated, decision);
    } catch (const Error& e) {
        throw Conflict(e.what());
    }
    geo::CurationDecision d;
    d.tile_id = id;
    d.decision = decision;
    d.annotator = annotator;
    d.note = std::move(note);
    // Strictly increasing timestamps keep last-write-wins identical to log order.
    d.timestamp = std::max(now_utc(), last_timestamp_ + std::chrono::milliseconds(1));
    append_line_durable(dir_ / layout::decisions, json(d).dump());
    log_.push_back(d);
    last_timestamp_ = d.timestamp;
    current_[i] = updated;
    write_snapshot();
    spdlog::info("{} -> {} by {}", id, geo::to_string(decision), annotator);
    return updated;
}

std::vector<geo::Tile> CurationStore::propose_zero(const std::map<std::string, int>& quotas, std::uint64_t seed) {
    std::unique_lock lock(mutex_);
    if (!reference_) throw Conflict("no reference raster in the state directory; zero candidates cannot be sampled");
    std::vector<geo::Tile> out;
    try {
        out = sample_zero_candidates(*reference_, grid_, quotas, seed, current_, proposed_);
    } catch (const Error& e) {
        throw Conflict(e.what());
    }
    for (const auto& t : out) {
        append_line_durable(dir_ / layout::proposals, proposal_line(t, seed));
        if (!index_.contains(t.tile_id)) {
            index_[t.tile_id] = base_.size();
            base_.push_back(t);
            current_.push_back(t);
        }
        proposed_.insert(t.tile_id);
    }
    write_snapshot();
    return out;
}

std::optional<std::vector<std::uint8_t>> CurationStore::chip_png(const std::string& id) const {
    {
        std::shared_lock lock(mutex_);
        index_of(id);
    }
    const auto path = dir_ / layout::chips / (id + ".png");
    if (!fs::exists(path)) return std::nullopt;
    return read_binary_file(path);
}

std::vector<std::uint8_t> CurationStore::reference_png(const std::string& id) const {
    std::shared_lock lock(mutex_);
    const auto& t = current_[index_of(id)];
    if (!reference_) throw NotFound("no reference raster in the state directory");
    constexpr int kCells = 5, kPx = 40;
    double vmax = 0;
    for (int dr = -2; dr <= 2; ++dr) {
        for (int dc = -2; dc <= 2; ++dc) {
            const int r = t.row + dr, c = t.col + dc;
            if (r >= 0 && r < grid_.n_rows && c >= 0 && c < grid_.n_cols && reference_->valid(r * grid_.n_cols + c)) {
                vmax = std::max(vmax, reference_->at(r, c));
            }
        }
    }
    png::Image img;
    img.width = img.height = kCells * kPx;
    img.channels = 3;
    img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 0);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const int r = t.row + y / kPx - 2, c = t.col + x / kPx - 2;
            std::uint8_t rgb[3] = {40, 0, 0};  // outside the grid or nodata
            if (r >= 0 && r < grid_.n_rows && c >= 0 && c < grid_.n_cols && reference_->valid(r * grid_.n_cols + c)) {
                const auto g = static_cast<std::uint8_t>(vmax > 0 ? std::lround(255.0 * reference_->at(r, c) / vmax) : 0);
                rgb[0] = rgb[1] = rgb[2] = g;
            }
            const bool centre = y / kPx == 2 && x / kPx == 2;
            const bool edge = y % kPx < 2 || y % kPx >= kPx - 2 || x % kPx < 2 || x % kPx >= kPx - 2;
            if (centre && edge) {
                rgb[0] = 255;
                rgb[1] = 200;
                rgb[2] = 0;
            }
            std::copy(rgb, rgb + 3, img.pixels.begin() + (static_cast<std::ptrdiff_t>(y) * img.width + x) * 3);
        }
    }
    return png::encode(img);
}

std::vector<geo::Tile> CurationStore::replay_from_disk() const {
    std::vector<geo::CurationDecision> log;
    for (const auto& j : read_jsonl(dir_ / layout::decisions)) log.push_back(j.get<geo::CurationDecision>());
    std::shared_lock lock(mutex_);
    return geo::apply_curation(base_, log);
}

}  // namespace popgrid::curation
