#pragma once

#include "popgrid/timestamp.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace popgrid {

std::string_view version();

/// Bookkeeping for one command invocation. Outputs are written into a staging directory inside
/// the output directory and moved into place by commit(); a record destroyed without commit()
/// removes the staging directory and writes `<command>.failed.run.json` instead.
class RunRecord {
public:
    RunRecord(std::string command, std::filesystem::path output_dir, nlohmann::json config, std::string config_hash);
    ~RunRecord();
    RunRecord(const RunRecord&) = delete;
    RunRecord& operator=(const RunRecord&) = delete;

    /// Staging path for an output given relative to the output directory; parents are created.
    std::filesystem::path output(const std::string& relative);
    /// Final location of an output once committed.
    std::filesystem::path final_path(const std::string& relative) const { return output_dir_ / relative; }
    void input(const std::filesystem::path& path);
    void seed(const std::string& name, std::uint64_t value);
    void note(const std::string& key, nlohmann::json value);
    void fail(const std::string& message) { error_ = message; }

    /// Moves staged outputs into the output directory and writes `<command>.run.json`.
    nlohmann::json commit();

    const std::filesystem::path& output_dir() const { return output_dir_; }

private:
    nlohmann::json manifest(const std::string& status) const;

    std::string command_;
    std::filesystem::path output_dir_;
    std::filesystem::path staging_;
    nlohmann::json config_;
    std::string config_hash_;
    std::vector<std::string> outputs_;
    std::vector<std::filesystem::path> inputs_;
    std::map<std::string, std::uint64_t> seeds_;
    nlohmann::json notes_ = nlohmann::json::object();
    Timestamp started_;
    std::string error_;
    bool committed_ = false;
};

}  // namespace popgrid
