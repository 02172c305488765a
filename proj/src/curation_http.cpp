#include "popgrid/curation.hpp"

#include "popgrid/geogrid_io.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <thread>

namespace popgrid::curation {

using nlohmann::json;

namespace {

ApiResponse json_response(int status, const json& body) { return {status, "application/json", body.dump()}; }

ApiResponse error_response(int status, const std::string& message) {
    return json_response(status, {{"error", message}});
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= path.size()) {
        const auto end = path.find('/', start);
        const auto piece = path.substr(start, end == std::string::npos ? std::string::npos : end - start);
        if (!piece.empty()) parts.push_back(piece);
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return parts;
}

int query_int(const ApiRequest& req, const std::string& key, int fallback, int lo, int hi) {
    const auto it = req.query.find(key);
    if (it == req.query.end() || it->second.empty()) return fallback;
    int v = 0;
    try {
        std::size_t used = 0;
        v = std::stoi(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
        throw BadRequest("query parameter '" + key + "' must be an integer");
    }
    if (v < lo || v > hi) {
        throw BadRequest("query parameter '" + key + "' must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    return v;
}

json tile_summary(const CurationStore& store, const geo::Tile& t) {
    json j = t;
    j["proposed"] = store.proposed(t.tile_id);
    return j;
}

json parse_body(const ApiRequest& req) {
    try {
        auto j = json::parse(req.body);
        if (!j.is_object()) throw BadRequest("request body must be a JSON object");
        return j;
    } catch (const json::exception& e) {
        throw BadRequest(std::string("request body is not valid JSON: ") + e.what());
    }
}

void reject_unknown_keys(const json& body, std::initializer_list<const char*> allowed) {
    for (const auto& [k, v] : body.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }) == allowed.end()) {
            throw BadRequest("unknown field '" + k + "'");
        }
    }
}

ApiResponse list_tiles(CurationStore& store, const ApiRequest& req) {
    std::optional<geo::TileStatus> status;
    if (const auto it = req.query.find("status"); it != req.query.end() && !it->second.empty()) {
        try {
            status = geo::parse_tile_status(it->second);
        } catch (const Error& e) {
            throw BadRequest(e.what());
        }
    }
    const auto region_it = req.query.find("region");
    const auto tiles = store.tiles(status, region_it == req.query.end() ? std::string{} : region_it->second);
    const int page = query_int(req, "page", 1, 1, 1 << 30);
    const int page_size = query_int(req, "page_size", 50, 1, 1000);
    json items = json::array();
    const std::size_t first = static_cast<std::size_t>(page - 1) * page_size;
    for (std::size_t i = first; i < tiles.size() && i < first + page_size; ++i) items.push_back(tile_summary(store, tiles[i]));
    return json_response(200, {{"total", tiles.size()}, {"page", page}, {"page_size", page_size}, {"tiles", items}});
}

ApiResponse tile_detail(CurationStore& store, const std::string& id) {
    const auto t = store.tile(id);
    json j = tile_summary(store, t);
    json points = json::array();
    for (const auto& p : store.survey_points(id)) {
        points.push_back({{"px", p.px}, {"py", p.py}, {"household_size", p.household_size}, {"psu_id", p.psu_id}});
    }
    j["survey_points"] = points;
    j["decisions"] = store.decisions(id);
    j["image_url"] = "/api/tiles/" + id + "/image.png";
    j["reference_url"] = "/api/tiles/" + id + "/image.png?layer=reference";
    return json_response(200, j);
}

ApiResponse post_decision(CurationStore& store, const std::string& id, const ApiRequest& req) {
    const auto body = parse_body(req);
    reject_unknown_keys(body, {"decision", "annotator", "note"});
    if (!body.contains("decision") || !body["decision"].is_string()) throw BadRequest("'decision' is required");
    if (!body.contains("annotator") || !body["annotator"].is_string()) throw BadRequest("'annotator' is required");
    geo::Decision decision;
    try {
        decision = geo::parse_decision(body["decision"].get<std::string>());
    } catch (const Error& e) {
        throw BadRequest(e.what());
    }
    std::optional<std::string> note;
    if (body.contains("note") && !body["note"].is_null()) {
        if (!body["note"].is_string()) throw BadRequest("'note' must be a string");
        note = body["note"].get<std::string>();
    }
    const auto t = store.decide(id, decision, body["annotator"].get<std::string>(), note);
    return json_response(200, tile_summary(store, t));
}

ApiResponse post_zero_candidates(CurationStore& store, const ApiRequest& req) {
    const auto body = parse_body(req);
    reject_unknown_keys(body, {"quotas", "seed"});
    if (!body.contains("quotas") || !body["quotas"].is_object()) throw BadRequest("'quotas' must be an object region -> count");
    std::map<std::string, int> quotas;
    for (const auto& [region, n] : body["quotas"].items()) {
        if (!n.is_number_integer() || n.get<int>() < 0) throw BadRequest("quota for '" + region + "' must be a non-negative integer");
        quotas[region] = n.get<int>();
    }
    std::uint64_t seed = 0;
    if (body.contains("seed")) {
        if (!body["seed"].is_number_unsigned()) throw BadRequest("'seed' must be a non-negative integer");
        seed = body["seed"].get<std::uint64_t>();
    }
    json out = json::array();
    for (const auto& t : store.propose_zero(quotas, seed)) out.push_back(tile_summary(store, t));
    return json_response(200, {{"proposals", out}});
}

ApiResponse route(CurationStore& store, const ApiRequest& req) {
    const auto parts = split_path(req.path);
    if (parts.empty() || parts[0] != "api") return error_response(404, "no such endpoint");
    const bool get = req.method == "GET", post = req.method == "POST";
    auto method_not_allowed = [] { return error_response(405, "method not allowed"); };

    if (parts.size() == 2 && parts[1] == "health") return get ? json_response(200, {{"ok", true}}) : method_not_allowed();
    if (parts.size() == 2 && parts[1] == "progress") return get ? json_response(200, store.progress().to_json()) : method_not_allowed();
    if (parts.size() == 2 && parts[1] == "decisions") {
        return get ? json_response(200, {{"decisions", store.decisions()}}) : method_not_allowed();
    }
    if (parts.size() == 2 && parts[1] == "zero-candidates") return post ? post_zero_candidates(store, req) : method_not_allowed();
    if (parts.size() >= 2 && parts[1] == "tiles") {
        if (parts.size() == 2) return get ? list_tiles(store, req) : method_not_allowed();
        const auto& id = parts[2];
        if (parts.size() == 3) return get ? tile_detail(store, id) : method_not_allowed();
        if (parts.size() == 4 && parts[3] == "decision") return post ? post_decision(store, id, req) : method_not_allowed();
        if (parts.size() == 4 && parts[3] == "image.png") {
            if (!get) return method_not_allowed();
            const auto layer = req.query.contains("layer") ? req.query.at("layer") : std::string("chip");
            if (layer == "reference") {
                const auto bytes = store.reference_png(id);
                return {200, "image/png", std::string(bytes.begin(), bytes.end())};
            }
            if (layer != "chip") throw BadRequest("layer must be 'chip' or 'reference'");
            const auto bytes = store.chip_png(id);
            if (!bytes) return error_response(404, "no cached chip for tile '" + id + "'");
            return {200, "image/png", std::string(bytes->begin(), bytes->end())};
        }
    }
    return error_response(404, "no such endpoint");
}

}  // namespace

ApiResponse handle(CurationStore& store, const ApiRequest& request) {
    try {
        return route(store, request);
    } catch (const BadRequest& e) {
        return error_response(400, e.what());
    } catch (const NotFound& e) {
        return error_response(404, e.what());
    } catch (const Conflict& e) {
        return error_response(409, e.what());
    } catch (const std::exception& e) {
        spdlog::error("{} {}: {}", request.method, request.path, e.what());
        return error_response(500, e.what());
    }
}

struct HttpServer::Impl {
    CurationStore& store;
    httplib::Server server;
    std::thread thread;

    explicit Impl(CurationStore& s) : store(s) {
        auto forward = [this](const httplib::Request& req, httplib::Response& res) {
            ApiRequest api{req.method, req.path, {}, req.body};
            for (const auto& [k, v] : req.params) api.query[k] = v;
            const auto out = handle(store, api);
            res.status = out.status;
            res.set_content(out.body, out.content_type);
        };
        server.Get(".*", forward);
        server.Post(".*", forward);
        server.Put(".*", forward);
        server.Delete(".*", forward);
    }
};

HttpServer::HttpServer(CurationStore& store) : impl_(std::make_unique<Impl>(store)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
    const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

void HttpServer::listen(const std::string& host, int port) {
    if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
    spdlog::info("curation service listening on http://{}:{}", host, port);
    impl_->server.listen_after_bind();
}

void HttpServer::stop() {
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace popgrid::curation
