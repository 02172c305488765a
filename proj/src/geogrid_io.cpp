#include "popgrid/geogrid_io.hpp"

#include "popgrid/common.hpp"
#include "popgrid/csv.hpp"

#include <set>
#include <sstream>

namespace popgrid::geo {

using nlohmann::json;

void to_json(json& j, const GridDef& g) {
    j = json{{"origin_x", g.origin_x}, {"origin_y", g.origin_y}, {"cell_size", g.cell_size},
             {"n_rows", g.n_rows},     {"n_cols", g.n_cols},     {"crs_code", g.crs_code},
             {"district_id", g.district_id}};
}

void from_json(const json& j, GridDef& g) {
    static const std::set<std::string> known{"origin_x", "origin_y", "cell_size", "n_rows",
                                             "n_cols",   "crs_code", "district_id"};
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw Error("grid: unknown key '" + key + "'");
    }
    g.origin_x = j.at("origin_x").get<double>();
    g.origin_y = j.at("origin_y").get<double>();
    g.cell_size = j.value("cell_size", 100.0);
    g.n_rows = j.at("n_rows").get<int>();
    g.n_cols = j.at("n_cols").get<int>();
    g.crs_code = j.at("crs_code").get<std::string>();
    g.district_id = j.at("district_id").get<std::string>();
}

void to_json(json& j, const Tile& t) {
    j = json{{"tile_id", t.tile_id},
             {"district_id", t.district_id},
             {"row", t.row},
             {"col", t.col},
             {"population", t.population ? json(*t.population) : json(nullptr)},
             {"status", std::string(to_string(t.status))},
             {"region_key", t.region_key}};
}

void from_json(const json& j, Tile& t) {
    t.tile_id = j.at("tile_id").get<std::string>();
    t.row = j.at("row").get<int>();
    t.col = j.at("col").get<int>();
    if (j.contains("district_id")) {
        t.district_id = j.at("district_id").get<std::string>();
    } else {
        t.district_id = t.tile_id.substr(0, t.tile_id.find(':'));
    }
    const auto& pop = j.at("population");
    if (pop.is_null()) {
        t.population.reset();
    } else {
        t.population = pop.get<double>();
    }
    t.status = parse_tile_status(j.at("status").get<std::string>());
    t.region_key = j.value("region_key", t.district_id);
    t.validate();
}

void to_json(json& j, const CurationDecision& d) {
    j = json{{"tile_id", d.tile_id},
             {"decision", std::string(to_string(d.decision))},
             {"annotator", d.annotator},
             {"timestamp", format_timestamp(d.timestamp)}};
    if (d.note) j["note"] = *d.note;
}

void from_json(const json& j, CurationDecision& d) {
    d.tile_id = j.at("tile_id").get<std::string>();
    d.decision = parse_decision(j.at("decision").get<std::string>());
    d.annotator = j.at("annotator").get<std::string>();
    d.timestamp = parse_timestamp(j.at("timestamp").get<std::string>());
    if (j.contains("note") && !j.at("note").is_null()) {
        d.note = j.at("note").get<std::string>();
    } else {
        d.note.reset();
    }
}

GridDef load_grid(const std::filesystem::path& path) {
    GridDef g = json::parse(read_text_file(path)).get<GridDef>();
    g.validate();
    return g;
}

void save_grid(const std::filesystem::path& path, const GridDef& grid) {
    write_file_atomic(path, json(grid).dump(2) + "\n");
}

std::vector<Tile> load_tile_manifest(const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::vector<Tile> tiles;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            Tile t = json::parse(line).get<Tile>();
            if (!seen.insert(t.tile_id).second) throw Error("duplicate tile_id '" + t.tile_id + "'");
            tiles.push_back(std::move(t));
        } catch (const std::exception& e) {
            throw Error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return tiles;
}

std::string format_tile_manifest(const std::vector<Tile>& tiles) {
    std::string out;
    for (const auto& t : tiles) out += json(t).dump() + "\n";
    return out;
}

void save_tile_manifest(const std::filesystem::path& path, const std::vector<Tile>& tiles) {
    write_file_atomic(path, format_tile_manifest(tiles));
}

namespace {

MicrocensusRecord make_record(double x, double y, long long size, std::string psu, std::string date,
                              const std::string& where) {
    if (size < 0) throw Error(where + ": household_size must be >= 0");
    if (!is_calendar_date(date)) throw Error(where + ": survey_date '" + date + "' is not YYYY-MM-DD");
    return MicrocensusRecord{x, y, static_cast<int>(size), std::move(psu), std::move(date)};
}

}  // namespace

MicrocensusInput parse_microcensus_csv(std::string_view text) {
    const auto table = csv::parse(text);
    const auto cx = table.column("x");
    const auto cy = table.column("y");
    const auto cs = table.column("household_size");
    const auto cp = table.column("psu_id");
    const auto cd = table.column("survey_date");
    MicrocensusInput in;
    in.records.reserve(table.rows.size());
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& r = table.rows[i];
        const std::string where = "microcensus row " + std::to_string(i + 1);
        in.records.push_back(make_record(csv::parse_double(r[cx], where), csv::parse_double(r[cy], where),
                                         csv::parse_int(r[cs], where), r[cp], r[cd], where));
    }
    return in;
}

MicrocensusInput parse_microcensus_geojson(std::string_view text) {
    const json doc = json::parse(text);
    if (doc.value("type", "") != "FeatureCollection") throw Error("geojson: expected a FeatureCollection");
    MicrocensusInput in;
    if (doc.contains("crs")) in.crs = doc.at("crs").at("properties").at("name").get<std::string>();
    std::size_t i = 0;
    for (const auto& f : doc.at("features")) {
        const std::string where = "feature " + std::to_string(i++);
        const auto& geom = f.at("geometry");
        if (geom.at("type").get<std::string>() != "Point") throw Error(where + ": geometry must be a Point");
        const auto& coords = geom.at("coordinates");
        const auto& p = f.at("properties");
        std::string psu = p.at("psu_id").is_string() ? p.at("psu_id").get<std::string>() : p.at("psu_id").dump();
        in.records.push_back(make_record(coords.at(0).get<double>(), coords.at(1).get<double>(),
                                         p.at("household_size").get<long long>(), std::move(psu),
                                         p.at("survey_date").get<std::string>(), where));
    }
    return in;
}

MicrocensusInput load_microcensus(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    const auto text = read_text_file(path);
    try {
        if (ext == ".csv") return parse_microcensus_csv(text);
        if (ext == ".geojson" || ext == ".json") return parse_microcensus_geojson(text);
    } catch (const std::exception& e) {
        throw Error(path.string() + ": " + e.what());
    }
    throw Error("microcensus: unsupported file type '" + ext + "' (use .csv or .geojson)");
}

std::string format_microcensus_csv(const std::vector<MicrocensusRecord>& records) {
    std::string out = "x,y,household_size,psu_id,survey_date\n";
    for (const auto& r : records) {
        out += csv::join_row({csv::format_double(r.x), csv::format_double(r.y), std::to_string(r.household_size),
                              r.psu_id, r.survey_date}) +
               "\n";
    }
    return out;
}

FoldSpec parse_folds(std::string_view text) {
    FoldSpec spec;
    std::set<std::string> seen;
    std::string duplicate;
    // Default nlohmann parsing silently keeps the last duplicate key; inspect keys while parsing.
    json::parser_callback_t cb = [&](int depth, json::parse_event_t event, json& parsed) {
        if (event == json::parse_event_t::key && depth == 1) {
            const auto key = parsed.get<std::string>();
            if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
        }
        return true;
    };
    const json doc = json::parse(text, cb);
    if (!duplicate.empty()) {
        throw LeakageError("fold file lists tile '" + duplicate + "' more than once");
    }
    if (!doc.is_object()) throw Error("fold file: expected a JSON object tile_id -> fold");
    int max_fold = -1;
    for (const auto& [id, value] : doc.items()) {
        if (!value.is_number_integer() || value.get<int>() < 0) {
            throw Error("fold file: fold for '" + id + "' must be a non-negative integer");
        }
        spec.assignment[id] = value.get<int>();
        max_fold = std::max(max_fold, value.get<int>());
    }
    spec.n_folds = max_fold + 1;
    return spec;
}

FoldSpec load_folds(const std::filesystem::path& path) {
    return parse_folds(read_text_file(path));
}

std::string format_folds(const FoldSpec& folds) {
    json j = json::object();
    for (const auto& [id, f] : folds.assignment) j[id] = f;
    return j.dump(2) + "\n";
}

}  // namespace popgrid::geo
