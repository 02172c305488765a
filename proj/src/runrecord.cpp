#include "popgrid/runrecord.hpp"

#include "popgrid/common.hpp"

#include <Eigen/Core>
#include <spdlog/spdlog.h>
#include <spdlog/version.h>

#include <unistd.h>

#include <algorithm>

namespace popgrid {

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef POPGRID_VERSION
#define POPGRID_VERSION "0.0.0"
#endif

std::string_view version() { return POPGRID_VERSION; }

RunRecord::RunRecord(std::string command, fs::path output_dir, json config, std::string config_hash)
    : command_(std::move(command)),
      output_dir_(std::move(output_dir)),
      config_(std::move(config)),
      config_hash_(std::move(config_hash)),
      started_(now_utc()) {
    if (output_dir_.empty()) throw Error("no output directory configured (paths.output or --output)");
    fs::create_directories(output_dir_);
    staging_ = output_dir_ / (".partial-" + command_ + "-" + std::to_string(::getpid()));
    fs::remove_all(staging_);
    fs::create_directories(staging_);
}

RunRecord::~RunRecord() {
    if (committed_) return;
    std::error_code ec;
    fs::remove_all(staging_, ec);
    try {
        write_file_atomic(output_dir_ / (command_ + ".failed.run.json"), manifest("failed").dump(2) + "\n");
    } catch (const std::exception& e) {
        spdlog::error("could not record the failed run: {}", e.what());
    }
}

fs::path RunRecord::output(const std::string& relative) {
    const auto p = staging_ / relative;
    fs::create_directories(p.parent_path());
    if (std::find(outputs_.begin(), outputs_.end(), relative) == outputs_.end()) outputs_.push_back(relative);
    return p;
}

void RunRecord::input(const fs::path& path) {
    if (std::find(inputs_.begin(), inputs_.end(), path) == inputs_.end()) inputs_.push_back(path);
}

void RunRecord::seed(const std::string& name, std::uint64_t value) { seeds_[name] = value; }

void RunRecord::note(const std::string& key, json value) { notes_[key] = std::move(value); }

json RunRecord::manifest(const std::string& status) const {
    auto digest = [](const fs::path& p) -> json {
        std::error_code ec;
        if (fs::is_regular_file(p, ec)) return sha256_file(p);
        if (fs::is_directory(p, ec)) return "directory";
        return nullptr;
    };
    json inputs = json::array();
    for (const auto& p : inputs_) inputs.push_back({{"path", p.string()}, {"sha256", digest(p)}});
    json outputs = json::array();
    for (const auto& rel : outputs_) {
        const auto where = committed_ || status == "ok" ? output_dir_ / rel : staging_ / rel;
        outputs.push_back({{"path", (output_dir_ / rel).string()}, {"sha256", status == "ok" ? digest(where) : json(nullptr)}});
    }
    json m = {{"command", command_},
              {"status", status},
              {"started", format_timestamp(started_)},
              {"finished", format_timestamp(now_utc())},
              {"config_sha256", config_hash_},
              {"config", config_},
              {"inputs", inputs},
              {"outputs", status == "ok" ? outputs : json::array()},
              {"seeds", seeds_},
              {"notes", notes_},
              {"versions",
               {{"popgrid", std::string(version())},
                {"compiler", __VERSION__},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"spdlog", std::to_string(SPDLOG_VER_MAJOR) + "." + std::to_string(SPDLOG_VER_MINOR) + "." +
                               std::to_string(SPDLOG_VER_PATCH)},
                {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}}};
    if (!error_.empty()) m["error"] = error_;
    return m;
}

json RunRecord::commit() {
    for (const auto& rel : outputs_) {
        const auto from = staging_ / rel;
        if (!fs::exists(from)) throw Error("declared output " + rel + " was not produced");
        const auto to = output_dir_ / rel;
        fs::create_directories(to.parent_path());
        if (fs::is_directory(to)) fs::remove_all(to);
        fs::rename(from, to);
    }
    fs::remove_all(staging_);
    committed_ = true;
    auto m = manifest("ok");
    write_file_atomic(output_dir_ / (command_ + ".run.json"), m.dump(2) + "\n");
    fs::remove(output_dir_ / (command_ + ".failed.run.json"));
    return m;
}

}  // namespace popgrid
