#pragma once

#include "popgrid/config.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace popgrid::cli {

struct CompareOptions {
    std::filesystem::path ours;    ///< default: <output>/population.tif
    std::filesystem::path theirs;  ///< default: paths.reference
};

struct ServeOptions {
    std::filesystem::path state_dir;  ///< default: paths.state_dir
    bool init = false;                ///< build the state directory from the config first
    bool dry_run = false;             ///< load and validate the state, then exit
};

void cmd_synth(const config::RunConfig& cfg);
void cmd_grid(const config::RunConfig& cfg);
void cmd_extract(const config::RunConfig& cfg);
void cmd_pretext(const config::RunConfig& cfg);
void cmd_finetune(const config::RunConfig& cfg);
void cmd_train(const config::RunConfig& cfg);
void cmd_cv(const config::RunConfig& cfg);
void cmd_predict_map(const config::RunConfig& cfg);
void cmd_compare(const config::RunConfig& cfg, const CompareOptions& opts);
void cmd_explain(const config::RunConfig& cfg);
void cmd_serve(const config::RunConfig& cfg, const ServeOptions& opts);

}  // namespace popgrid::cli
