#include "commands.hpp"

#include "popgrid/common.hpp"
#include "popgrid/csv.hpp"
#include "popgrid/curation.hpp"
#include "popgrid/evalx.hpp"
#include "popgrid/explain.hpp"
#include "popgrid/finetune.hpp"
#include "popgrid/geogrid_io.hpp"
#include "popgrid/geotiff.hpp"
#include "popgrid/mapgen.hpp"
#include "popgrid/pipelines.hpp"
#include "popgrid/png_io.hpp"
#include "popgrid/pretext.hpp"
#include "popgrid/regress.hpp"
#include "popgrid/runrecord.hpp"
#include "popgrid/synth.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <csignal>
#include <fstream>
#include <set>
#include <sstream>

namespace popgrid::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

RunRecord open_run(const std::string& command, const config::RunConfig& cfg) {
    return RunRecord(command, cfg.paths.output, cfg.to_json(), cfg.hash());
}

const fs::path& need(const fs::path& p, const char* key) {
    if (p.empty()) throw Error(std::string("paths.") + key + " is not configured");
    if (!fs::exists(p)) throw Error(std::string("paths.") + key + " = " + p.string() + " does not exist");
    return p;
}

const geo::GridDef& need_grid(const config::RunConfig& cfg) {
    if (!cfg.grid) throw Error("this command needs a 'grid' section in the config");
    return *cfg.grid;
}

std::vector<geo::Tile> load_tiles(const config::RunConfig& cfg, RunRecord& run) {
    run.input(need(cfg.paths.tiles, "tiles"));
    auto tiles = geo::load_tile_manifest(cfg.paths.tiles);
    if (tiles.empty()) throw Error(cfg.paths.tiles.string() + " holds no tiles");
    return tiles;
}

/// Labelled tiles used for training and evaluation. Once any curation decision has been applied,
/// only curated and zero tiles count; before that every surveyed tile does.
std::vector<geo::Tile> training_tiles(const std::vector<geo::Tile>& tiles) {
    const bool curated = std::any_of(tiles.begin(), tiles.end(), [](const geo::Tile& t) {
        return t.status == geo::TileStatus::curated || t.status == geo::TileStatus::zero;
    });
    std::vector<geo::Tile> out;
    for (const auto& t : tiles) {
        if (!t.labelled()) continue;
        if (curated ? (t.status == geo::TileStatus::curated || t.status == geo::TileStatus::zero)
                    : t.status == geo::TileStatus::surveyed) {
            out.push_back(t);
        }
    }
    spdlog::info("{} labelled tiles used ({})", out.size(), curated ? "curated + zero" : "surveyed");
    if (out.empty()) throw Error("no usable labelled tiles in the manifest");
    return out;
}

/// Chips from the cache, extracting missing ones from the imagery mosaic (and caching them).
std::vector<imagery::Chip> load_chips(const config::RunConfig& cfg, const std::vector<geo::Tile>& tiles, RunRecord& run) {
    std::unique_ptr<imagery::GeoTiffRaster> mosaic;
    std::vector<imagery::Chip> chips;
    chips.reserve(tiles.size());
    std::size_t extracted = 0;
    for (const auto& t : tiles) {
        if (!cfg.paths.chips.empty() && imagery::has_cached_chip(cfg.paths.chips, t.tile_id)) {
            chips.push_back(imagery::load_chip(cfg.paths.chips, t.tile_id));
            continue;
        }
        if (!mosaic) {
            run.input(need(cfg.paths.imagery, "imagery"));
            mosaic = std::make_unique<imagery::GeoTiffRaster>(cfg.paths.imagery);
        }
        chips.push_back(imagery::extract_chip(*mosaic, t, need_grid(cfg)));
        if (!cfg.paths.chips.empty()) imagery::save_chip(cfg.paths.chips, chips.back());
        ++extracted;
    }
    if (!cfg.paths.chips.empty()) run.input(cfg.paths.chips);
    spdlog::info("{} chips ready ({} extracted from imagery)", chips.size(), extracted);
    return chips;
}

struct LoadedEncoder {
    enc::Encoder encoder;
    enc::Pretraining pretraining = enc::Pretraining::scratch;
    std::uint64_t seed = 0;
};

LoadedEncoder load_encoder(const config::RunConfig& cfg, RunRecord& run) {
    if (!cfg.paths.encoder.empty()) {
        run.input(need(cfg.paths.encoder, "encoder"));
        const auto m = enc::load_manifest(cfg.paths.encoder);
        return {enc::load_encoder(cfg.paths.encoder), m.pretraining, m.seed};
    }
    if (cfg.encoder.pretraining != enc::Pretraining::scratch) {
        throw Error("encoder.pretraining is '" + std::string(enc::to_string(cfg.encoder.pretraining)) +
                    "' but no paths.encoder checkpoint is configured");
    }
    spdlog::info("no encoder checkpoint configured; building a scratch encoder from the architecture");
    auto e = enc::Encoder::from_architecture(cfg.encoder.architecture, cfg.seed);
    e.set_fingerprint(sha256_hex(enc::encode_weights(enc::snapshot_weights(e))));
    run.seed("encoder_init", cfg.seed);
    return {std::move(e), enc::Pretraining::scratch, cfg.seed};
}

geo::FoldSpec load_or_make_folds(const config::RunConfig& cfg, const std::vector<geo::Tile>& tiles, RunRecord& run) {
    if (!cfg.paths.folds.empty() && fs::exists(cfg.paths.folds)) {
        run.input(cfg.paths.folds);
        return geo::load_folds(cfg.paths.folds);
    }
    auto folds = geo::make_spatial_folds(tiles, cfg.cv.n_folds);
    write_file_atomic(run.output("folds.json"), geo::format_folds(folds));
    return folds;
}

evalx::ForestOptions forest_options(const config::RunConfig& cfg) {
    evalx::ForestOptions o;
    if (!cfg.forest.grid_search) o.config = cfg.forest.fixed;
    o.inner_folds = cfg.forest.inner_folds;
    o.seed = cfg.forest.fixed.seed;
    return o;
}

rf::Labels labels_of(const std::vector<geo::Tile>& tiles) {
    rf::Labels out;
    for (const auto& t : tiles) out[t.tile_id] = *t.population;
    return out;
}

void write_text(const fs::path& p, const std::string& text) { write_file_atomic(p, text); }

/// Signed float32 layer (ours - theirs); the population exporter only accepts counts >= 0.
void write_difference(const mapgen::PopulationRaster& diff, const fs::path& path) {
    constexpr float kNoDiff = -3.0e38f;
    raster::RasterInfo info;
    info.width = diff.grid.n_cols;
    info.height = diff.grid.n_rows;
    info.type = raster::SampleType::float32;
    info.transform = {diff.grid.origin_x, diff.grid.origin_y, diff.grid.cell_size, diff.grid.cell_size};
    info.crs_code = diff.grid.crs_code;
    info.nodata = kNoDiff;
    std::vector<float> samples(diff.values.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        samples[i] = std::isnan(diff.values[i]) ? kNoDiff : static_cast<float>(diff.values[i]);
    }
    raster::write_geotiff(path, info, std::span<const float>(samples));
}

}  // namespace

// ---- synth ----------------------------------------------------------------------------------

void cmd_synth(const config::RunConfig& cfg) {
    auto run = open_run("synth", cfg);
    run.seed("synth", cfg.synth.seed);
    const auto data = synth::make_dataset(cfg.synth);
    const auto mosaic = synth::make_mosaic(data);

    raster::write_geotiff(run.output("mosaic.tif"), mosaic.info(), mosaic.samples());
    write_text(run.output("survey.csv"), geo::format_microcensus_csv(data.households));
    geo::save_grid(run.output("grid.json"), data.grid);
    geo::save_tile_manifest(run.output("tiles.jsonl"), data.tiles);

    // Reference layer: the true counts, so zero cells are exactly the empty tiles.
    auto reference = mapgen::PopulationRaster::empty(data.grid);
    double total = 0;
    for (const auto& t : data.tiles) {
        reference.at(t.row, t.col) = *t.population;
        total += *t.population;
    }
    reference.provenance = "synthetic truth";
    mapgen::export_geotiff(reference, run.output("reference.tif"));
    write_text(run.output("census.json"), json{{data.grid.district_id, std::max(total, 1.0)}}.dump(2) + "\n");

    config::RunConfig out = cfg;
    const auto root = fs::absolute(cfg.paths.output);
    out.grid = data.grid;
    out.paths = {};
    out.paths.imagery = root / "mosaic.tif";
    out.paths.microcensus = root / "survey.csv";
    out.paths.tiles = root / "tiles.jsonl";
    out.paths.chips = root / "run" / "chips";
    out.paths.output = root / "run";
    out.paths.reference = root / "reference.tif";
    out.paths.census = root / "census.json";
    out.paths.state_dir = root / "state";
    write_text(run.output("popgrid.yaml"), config::format_config(out, root));
    run.note("tiles", data.tiles.size());
    run.commit();
    spdlog::info("synthetic dataset with {} tiles written to {}", data.tiles.size(), cfg.paths.output.string());
}

// ---- grid -----------------------------------------------------------------------------------

void cmd_grid(const config::RunConfig& cfg) {
    auto run = open_run("grid", cfg);
    const auto& grid = need_grid(cfg);
    run.input(need(cfg.paths.microcensus, "microcensus"));
    const auto input = geo::load_microcensus(cfg.paths.microcensus);
    auto agg = geo::aggregate_microcensus(input.records, grid, input.crs);
    spdlog::info("{} of {} records aggregated into {} tiles; {} rejected", agg.accepted, input.records.size(),
                 agg.tiles.size(), agg.rejects.size());

    auto tiles = std::move(agg.tiles);
    if (!cfg.paths.decisions.empty()) {
        run.input(need(cfg.paths.decisions, "decisions"));
        std::vector<geo::CurationDecision> log;
        std::istringstream in(read_text_file(cfg.paths.decisions));
        for (std::string line; std::getline(in, line);) {
            if (line.find_first_not_of(" \t\r") != std::string::npos) log.push_back(json::parse(line).get<geo::CurationDecision>());
        }
        tiles = geo::apply_curation(std::move(tiles), log);
        spdlog::info("{} curation decisions applied", log.size());
    }
    geo::save_tile_manifest(run.output("tiles.jsonl"), tiles);

    std::string rejects = "index,x,y,reason\n";
    for (const auto& r : agg.rejects) {
        rejects += csv::join_row({std::to_string(r.index), csv::format_double(r.x), csv::format_double(r.y), r.reason}) + "\n";
    }
    write_text(run.output("rejects.csv"), rejects);

    try {
        const auto usable = training_tiles(tiles);
        write_text(run.output("folds.json"), geo::format_folds(geo::make_spatial_folds(usable, cfg.cv.n_folds)));
    } catch (const Error& e) {
        spdlog::warn("no fold file written: {}", e.what());
    }
    run.note("accepted_records", agg.accepted);
    run.note("rejected_records", agg.rejects.size());
    run.commit();
}

// ---- extract --------------------------------------------------------------------------------

void cmd_extract(const config::RunConfig& cfg) {
    auto run = open_run("extract", cfg);
    const auto tiles = load_tiles(cfg, run);
    const auto chips = load_chips(cfg, tiles, run);
    auto loaded = load_encoder(cfg, run);
    const auto reps = enc::extract(loaded.encoder, chips);
    write_text(run.output("features.csv"), rf::format_feature_table(rf::table_from_representations(reps)));
    run.note("encoder_fingerprint", loaded.encoder.fingerprint());
    run.note("repr_dim", loaded.encoder.repr_dim());
    run.commit();
}

// ---- pretext --------------------------------------------------------------------------------

void cmd_pretext(const config::RunConfig& cfg) {
    auto run = open_run("pretext", cfg);
    const auto tiles = load_tiles(cfg, run);
    const auto chips = load_chips(cfg, tiles, run);
    auto loaded = load_encoder(cfg, run);
    run.seed("pretext", cfg.pretext.seed);
    const auto log = pretext::run_pretext(loaded.encoder, chips, cfg.pretext);
    write_text(run.output("pretext_log.csv"), log.to_csv());
    const auto tag = cfg.pretext.method == pretext::Method::barlow_twins ? enc::Pretraining::barlow_twins
                                                                          : enc::Pretraining::deepcluster;
    const auto dir = run.output("encoder_pretext.json").parent_path();
    run.output("encoder_pretext.pgwb");
    enc::save_checkpoint(loaded.encoder, dir, "encoder_pretext", tag, cfg.pretext.seed, "pretext_log.csv");
    run.note("final_loss", log.rows.empty() ? json(nullptr) : json(log.rows.back().loss));
    run.commit();
}

// ---- finetune -------------------------------------------------------------------------------

void cmd_finetune(const config::RunConfig& cfg) {
    auto run = open_run("finetune", cfg);
    const auto tiles = training_tiles(load_tiles(cfg, run));
    const auto chips = load_chips(cfg, tiles, run);
    auto loaded = load_encoder(cfg, run);
    std::vector<enc::LabelledChip> data;
    for (std::size_t i = 0; i < tiles.size(); ++i) data.push_back({chips[i], *tiles[i].population});

    run.seed("finetune", cfg.finetune.seed);
    auto result = enc::finetune(std::move(loaded.encoder), data, cfg.finetune);
    write_text(run.output("training_log.csv"), result.log.to_csv());
    const auto dir = run.output("encoder_finetuned.json").parent_path();
    run.output("encoder_finetuned.pgwb");
    enc::save_checkpoint(result.encoder, dir, "encoder_finetuned", loaded.pretraining, cfg.finetune.seed, "training_log.csv");

    // Head predictions with MC-dropout spread on the held-out split.
    std::vector<imagery::Chip> val_chips;
    std::map<std::string, double> truth;
    for (const auto& d : data) {
        if (std::find(result.val_ids.begin(), result.val_ids.end(), d.chip.tile_id) != result.val_ids.end()) {
            val_chips.push_back(d.chip);
            truth[d.chip.tile_id] = d.population;
        }
    }
    run.seed("mc_dropout", cfg.seed);
    const auto mc = enc::predict_mc_dropout(result.encoder, val_chips, cfg.uncertainty.mc_passes, cfg.uncertainty.dropout, cfg.seed);
    std::string csv_text = "tile_id,y,y_hat,y_hat_std\n";
    for (std::size_t i = 0; i < val_chips.size(); ++i) {
        csv_text += csv::join_row({val_chips[i].tile_id, csv::format_double(truth[val_chips[i].tile_id]),
                                   csv::format_double(mc[i].mean), csv::format_double(mc[i].std)}) +
                    "\n";
    }
    write_text(run.output("validation_predictions.csv"), csv_text);
    run.note("best_epoch", result.best_epoch);
    run.note("best_val_loss", result.best_val_loss);
    run.commit();
}

// ---- train ----------------------------------------------------------------------------------

void cmd_train(const config::RunConfig& cfg) {
    auto run = open_run("train", cfg);
    const auto tiles = training_tiles(load_tiles(cfg, run));
    rf::FeatureTable table;
    std::string encoder_fp;
    if (!cfg.paths.features.empty()) {
        run.input(need(cfg.paths.features, "features"));
        table = rf::load_feature_table(cfg.paths.features);
    } else {
        const auto chips = load_chips(cfg, tiles, run);
        auto loaded = load_encoder(cfg, run);
        table = rf::table_from_representations(enc::extract(loaded.encoder, chips));
        encoder_fp = loaded.encoder.fingerprint();
    }
    const auto labels = labels_of(tiles);

    rf::RFConfig chosen = cfg.forest.fixed;
    if (cfg.forest.grid_search) {
        const auto folds = load_or_make_folds(cfg, tiles, run);
        const auto search = rf::grid_search(table, labels, folds, cfg.forest.fixed.seed);
        write_text(run.output("grid_scores.csv"), search.to_csv());
        chosen = search.best;
        run.note("grid_points", search.scores.size());
    }
    run.seed("forest", chosen.seed);
    auto model = rf::fit(table, labels, chosen);
    model.encoder_fingerprint = encoder_fp;
    const auto dir = run.output("model.json").parent_path();
    run.output("model.pgrf");
    rf::save_model(model, dir, "model");

    std::string imp = "feature,importance\n";
    for (std::size_t i = 0; i < model.feature_names.size(); ++i) {
        imp += csv::join_row({model.feature_names[i], csv::format_double(model.forest.importances()[i])}) + "\n";
    }
    write_text(run.output("importances.csv"), imp);
    run.note("rf_config", {{"num_estimators", chosen.num_estimators},
                           {"min_samples_split", chosen.min_samples_split},
                           {"min_samples_leaf", chosen.min_samples_leaf}});
    run.commit();
}

// ---- cv -------------------------------------------------------------------------------------

void cmd_cv(const config::RunConfig& cfg) {
    auto run = open_run("cv", cfg);
    const auto tiles = training_tiles(load_tiles(cfg, run));
    const auto folds = load_or_make_folds(cfg, tiles, run);

    std::vector<imagery::Chip> chips;
    std::optional<rf::FeatureTable> table;
    std::optional<LoadedEncoder> base;
    evalx::PipelineFactory factory;
    const auto opts = forest_options(cfg);
    switch (cfg.cv.pipeline) {
        case config::CvPipeline::null:
            factory = [](int) { return std::make_unique<evalx::NullPipeline>(); };
            break;
        case config::CvPipeline::feature_forest:
            run.input(need(cfg.paths.features, "features"));
            table = rf::load_feature_table(cfg.paths.features);
            factory = [&](int) { return std::make_unique<evalx::FeatureForestPipeline>(*table, opts); };
            break;
        case config::CvPipeline::encoder_forest: {
            chips = load_chips(cfg, tiles, run);
            base = load_encoder(cfg, run);
            std::optional<enc::FinetuneConfig> ft;
            if (cfg.cv.finetune) ft = cfg.finetune;
            factory = [&, ft](int) { return std::make_unique<evalx::EncoderForestPipeline>(base->encoder, ft, opts); };
            break;
        }
    }
    run.seed("forest", opts.seed);
    run.seed("finetune", cfg.finetune.seed);
    const auto result = evalx::crossvalidate(factory, tiles, chips, folds);
    const auto baseline = evalx::crossvalidate([](int) { return std::make_unique<evalx::NullPipeline>(); }, tiles, chips, folds);

    write_text(run.output("predictions.csv"), result.predictions.to_csv());
    json metrics = result.metrics.to_json();
    metrics["pipeline"] = config::to_string(cfg.cv.pipeline);
    metrics["n_folds"] = folds.n_folds;
    metrics["null_baseline"] = baseline.metrics.to_json();
    write_text(run.output("metrics.json"), metrics.dump(2) + "\n");
    run.note("r2", result.metrics.r2);
    run.commit();
    spdlog::info("pooled R2 {:.3f}, MeAE {:.3f} (null MeAE {:.3f})", result.metrics.r2, result.metrics.meae, baseline.metrics.meae);
}

// ---- predict-map ----------------------------------------------------------------------------

void cmd_predict_map(const config::RunConfig& cfg) {
    auto run = open_run("predict-map", cfg);
    const auto& grid = need_grid(cfg);
    run.input(need(cfg.paths.model, "model"));
    auto model = rf::load_model(cfg.paths.model);
    std::optional<enc::Encoder> encoder;
    if (model.kind == rf::ModelKind::random_forest) {
        auto loaded = load_encoder(cfg, run);
        if (!model.encoder_fingerprint.empty() && model.encoder_fingerprint != loaded.encoder.fingerprint()) {
            throw Error("the model was trained on features from encoder " + model.encoder_fingerprint +
                        " but the configured encoder is " + loaded.encoder.fingerprint());
        }
        encoder = std::move(loaded.encoder);
    }
    evalx::TrainedPredictor predictor(std::move(encoder), std::move(model));
    run.input(need(cfg.paths.imagery, "imagery"));
    const imagery::GeoTiffRaster mosaic(cfg.paths.imagery);
    mapgen::MapOptions opts;
    opts.rows_per_block = cfg.map.rows_per_block;
    opts.with_uncertainty = cfg.map.uncertainty;
    opts.provenance = predictor.fingerprint();
    const auto res = mapgen::generate_map(predictor, grid, mosaic, opts);
    mapgen::export_geotiff(res.raster, run.output("population.tif"));
    write_text(run.output("map_predictions.csv"), res.predictions_csv());
    write_text(run.output("map_report.json"), res.report.to_json().dump(2) + "\n");
    run.note("total", res.raster.total());
    run.note("n_nodata", res.report.n_nodata);
    run.commit();
}

// ---- compare --------------------------------------------------------------------------------

void cmd_compare(const config::RunConfig& cfg, const CompareOptions& o) {
    auto run = open_run("compare", cfg);
    const auto ours_path = o.ours.empty() ? cfg.paths.output / "population.tif" : o.ours;
    const auto theirs_path = o.theirs.empty() ? cfg.paths.reference : o.theirs;
    run.input(need(ours_path, "output/population.tif"));
    run.input(need(theirs_path, "reference"));
    const auto ours = mapgen::import_geotiff(ours_path, cfg.grid);
    const auto theirs = mapgen::import_geotiff(theirs_path, cfg.grid);
    const auto cmp = mapgen::compare_products(ours, theirs);
    json out = cmp.to_json();
    out["ours"] = ours_path.string();
    out["theirs"] = theirs_path.string();
    out["ours_total"] = ours.total();
    out["theirs_total"] = theirs.total();
    if (!cfg.paths.census.empty()) {
        run.input(need(cfg.paths.census, "census"));
        const auto totals = mapgen::load_census_totals(cfg.paths.census);
        const auto district = cfg.grid ? cfg.grid->district_id : std::string{};
        if (const auto it = totals.find(district); it != totals.end()) {
            out["census"] = {{"district_id", district},
                             {"projected_total", it->second},
                             {"estimate_total", ours.total()},
                             {"relative_error", mapgen::census_check(ours, it->second)}};
        } else {
            spdlog::warn("census file has no total for district '{}'", district);
        }
    }
    write_text(run.output("comparison.json"), out.dump(2) + "\n");
    write_difference(cmp.difference, run.output("difference.tif"));
    run.commit();
    spdlog::info("Spearman {:.3f}, Pearson {:.3f} over {} cells", cmp.spearman, cmp.pearson, cmp.n_cells);
}

// ---- explain --------------------------------------------------------------------------------

void cmd_explain(const config::RunConfig& cfg) {
    auto run = open_run("explain", cfg);
    const auto tiles = training_tiles(load_tiles(cfg, run));
    auto loaded = load_encoder(cfg, run);
    if (!loaded.encoder.has_head()) {
        throw Error("explain needs a fine-tuned encoder with a regression head (set paths.encoder to the finetune output)");
    }
    const auto chips = load_chips(cfg, tiles, run);

    std::set<std::string> wanted(cfg.explain.tiles.begin(), cfg.explain.tiles.end());
    std::size_t made = 0;
    json index = json::array();
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const bool pick = wanted.empty() ? made < static_cast<std::size_t>(cfg.explain.max_tiles) : wanted.erase(tiles[i].tile_id) > 0;
        if (!pick) continue;
        const auto map = explain::regression_activation_map(loaded.encoder, chips[i]);
        const auto dir = run.output("ram/" + map.tile_id + ".ram.png").parent_path();
        run.output("ram/" + map.tile_id + ".ram.json");
        explain::save_activation_map(dir, chips[i], map);
        index.push_back({{"tile_id", map.tile_id}, {"prediction", map.prediction}, {"population", *tiles[i].population}});
        ++made;
    }
    if (!wanted.empty()) throw Error("explain.tiles names tiles that are not usable labelled tiles: " + *wanted.begin());
    write_text(run.output("ram_index.json"), index.dump(2) + "\n");

    const auto reps = enc::extract(loaded.encoder, chips);
    run.seed("tsne", cfg.explain.tsne.seed);
    const auto points = explain::project_embeddings(reps, cfg.explain.tsne);
    std::map<std::string, explain::PointAttributes> attrs;
    for (const auto& t : tiles) attrs[t.tile_id] = {t.population, t.region_key};
    write_text(run.output("embedding.csv"), explain::embedding_csv(points, attrs));
    run.commit();
}

// ---- serve ----------------------------------------------------------------------------------

namespace {
curation::HttpServer* g_server = nullptr;
extern "C" void stop_server(int) {
    if (g_server) g_server->stop();
}
}  // namespace

void cmd_serve(const config::RunConfig& cfg, const ServeOptions& o) {
    const auto dir = o.state_dir.empty() ? cfg.paths.state_dir : o.state_dir;
    if (dir.empty()) throw Error("no state directory (--state-dir or paths.state_dir)");
    if (o.init) {
        curation::StateSeed seed;
        seed.grid = need_grid(cfg);
        RunRecord scratch("serve-init", dir, cfg.to_json(), cfg.hash());
        seed.tiles = load_tiles(cfg, scratch);
        for (const auto& chip : load_chips(cfg, seed.tiles, scratch)) {
            seed.chip_png[chip.tile_id] = png::encode({imagery::kRawSize, imagery::kRawSize, 3, chip.pixels_raw});
        }
        if (!cfg.paths.reference.empty()) {
            scratch.input(need(cfg.paths.reference, "reference"));
            seed.reference = mapgen::import_geotiff(cfg.paths.reference, seed.grid);
        }
        if (!cfg.paths.microcensus.empty()) {
            scratch.input(need(cfg.paths.microcensus, "microcensus"));
            seed.survey = geo::load_microcensus(cfg.paths.microcensus).records;
        }
        curation::initialise_state(dir, seed);
        scratch.commit();
        spdlog::info("initialised curation state in {}", dir.string());
    }
    curation::CurationStore store(dir);
    if (o.dry_run) return;
    curation::HttpServer server(store);
    g_server = &server;
    std::signal(SIGINT, stop_server);
    std::signal(SIGTERM, stop_server);
    server.listen(cfg.serve.host, cfg.serve.port);
    g_server = nullptr;
}

}  // namespace popgrid::cli
