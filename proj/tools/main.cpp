#include "commands.hpp"

#include "popgrid/common.hpp"
#include "popgrid/runrecord.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <functional>
#include <optional>

namespace fs = std::filesystem;
using namespace popgrid;

int main(int argc, char** argv) {
    CLI::App app{"Gridded population estimation from imagery and household surveys", "popgrid"};
    app.set_version_flag("--version", std::string(version()));
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::vector<std::string> overrides;
    std::string output;
    std::optional<std::uint64_t> seed;
    int verbose = 0;
    bool quiet = false;
    app.add_option("-c,--config", config_path, "YAML run configuration")->check(CLI::ExistingFile);
    app.add_option("--set", overrides, "override a config value, e.g. --set forest.num_estimators=50")
        ->allow_extra_args(false);
    app.add_option("--output", output, "output directory (paths.output)");
    app.add_option("--seed", seed, "top-level seed");
    app.add_flag("-v,--verbose", verbose, "more logging (repeatable)");
    app.add_flag("-q,--quiet", quiet, "only warnings and errors");

    std::function<void(const config::RunConfig&)> action;
    auto simple = [&](const char* name, const char* help, void (*fn)(const config::RunConfig&)) {
        return app.add_subcommand(name, help)->callback([&action, fn] { action = fn; });
    };
    simple("synth", "write a synthetic mosaic, survey and reference layer", cli::cmd_synth);
    simple("grid", "aggregate the survey onto the grid and apply curation decisions", cli::cmd_grid);
    simple("extract", "cache image chips and write encoder features", cli::cmd_extract);
    simple("pretext", "self-supervised pretraining of the encoder on unlabelled chips", cli::cmd_pretext);
    simple("finetune", "fine-tune the encoder with a regression head", cli::cmd_finetune);

    std::optional<bool> grid_search;
    auto* train = simple("train", "fit the random forest population model", cli::cmd_train);
    train->add_flag("--grid-search,!--no-grid-search", grid_search, "search the forest hyperparameter grid");

    simple("cv", "spatial cross-validation of a pipeline", cli::cmd_cv);
    simple("predict-map", "predict every grid cell and write the population raster", cli::cmd_predict_map);

    cli::CompareOptions compare_opts;
    auto* compare = app.add_subcommand("compare", "compare the map with a reference product and census total");
    compare->add_option("--ours", compare_opts.ours, "our raster (default <output>/population.tif)");
    compare->add_option("--theirs", compare_opts.theirs, "reference raster (default paths.reference)");
    compare->callback([&] { action = [&](const config::RunConfig& c) { cli::cmd_compare(c, compare_opts); }; });

    std::vector<std::string> explain_tiles;
    auto* explain = simple("explain", "activation maps and a t-SNE embedding of tile representations", cli::cmd_explain);
    explain->add_option("--tiles", explain_tiles, "tile ids to explain");

    cli::ServeOptions serve_opts;
    std::optional<int> port;
    auto* serve = app.add_subcommand("serve", "run the curation HTTP API");
    serve->add_option("--state-dir", serve_opts.state_dir, "curation state directory (default paths.state_dir)");
    serve->add_flag("--init", serve_opts.init, "initialise the state directory from the config first");
    serve->add_flag("--dry-run", serve_opts.dry_run, "load and validate the state, then exit");
    serve->add_option("--port", port, "listen port (serve.port)");
    serve->callback([&] { action = [&](const config::RunConfig& c) { cli::cmd_serve(c, serve_opts); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }
    spdlog::set_default_logger(spdlog::stderr_color_mt("popgrid"));
    spdlog::set_level(quiet ? spdlog::level::warn : verbose >= 1 ? spdlog::level::debug : spdlog::level::info);

    if (!output.empty()) overrides.push_back("paths.output=" + fs::absolute(output).string());
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    if (grid_search) overrides.push_back(std::string("forest.grid_search=") + (*grid_search ? "true" : "false"));
    if (port) overrides.push_back("serve.port=" + std::to_string(*port));
    if (!explain_tiles.empty()) {
        std::string list = "explain.tiles=[";
        for (std::size_t i = 0; i < explain_tiles.size(); ++i) list += (i ? ", '" : "'") + explain_tiles[i] + "'";
        overrides.push_back(list + "]");
    }

    config::RunConfig cfg;
    try {
        cfg = config_path.empty() ? config::default_config(overrides, fs::current_path())
                                  : config::load_config(config_path, overrides);
    } catch (const config::ConfigError& e) {
        spdlog::error("{}", e.what());
        return 2;
    }
    try {
        action(cfg);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
