#include "popgrid/pipelines.hpp"

#include "popgrid/common.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace popgrid::evalx {

rf::Labels labels_of(std::span<const Sample> samples) {
    rf::Labels labels;
    for (const auto& s : samples) {
        if (!s.tile->labelled()) throw Error("training tile '" + s.tile->tile_id + "' has no population label");
        labels[s.tile->tile_id] = *s.tile->population;
    }
    return labels;
}

rf::PopulationModel fit_forest(const rf::FeatureTable& table, std::span<const Sample> train, const ForestOptions& opts,
                               std::optional<rf::GridSearchResult>* search) {
    const auto labels = labels_of(train);
    if (opts.config) return rf::fit(table, labels, *opts.config);

    if (train.size() < static_cast<std::size_t>(2 * opts.inner_folds)) {
        spdlog::warn("only {} training tiles; skipping the hyperparameter search", train.size());
        return rf::fit(table, labels, rf::RFConfig{.seed = opts.seed});
    }
    std::vector<geo::Tile> tiles;
    tiles.reserve(train.size());
    for (const auto& s : train) tiles.push_back(*s.tile);
    geo::FoldSpec inner;
    try {
        inner = geo::make_spatial_folds(tiles, opts.inner_folds);
    } catch (const Error& e) {
        spdlog::warn("cannot build inner folds ({}); using default forest settings", e.what());
        return rf::fit(table, labels, rf::RFConfig{.seed = opts.seed});
    }
    auto result = rf::grid_search(table, labels, inner, opts.seed);
    spdlog::info("inner search picked {} trees, split {}, leaf {}", result.best.num_estimators,
                 result.best.min_samples_split, result.best.min_samples_leaf);
    auto model = rf::fit(table, labels, result.best);
    if (search) *search = std::move(result);
    return model;
}

namespace {

std::vector<PointPrediction> forest_predict(const rf::PopulationModel& model, const rf::FeatureTable& table,
                                            std::span<const Sample> queries) {
    std::vector<PointPrediction> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
        const auto it = table.rows.find(q.tile->tile_id);
        if (it == table.rows.end()) throw Error("no features for tile '" + q.tile->tile_id + "'");
        const auto p = rf::predict_one(model, it->second);
        out.push_back({p.mean, p.std});
    }
    return out;
}

std::string forest_label(const rf::PopulationModel& model, const ForestOptions& opts) {
    if (model.rf_config) {
        const auto& c = *model.rf_config;
        return fmt::format("rf[{} trees, split {}, leaf {}]", c.num_estimators, c.min_samples_split, c.min_samples_leaf);
    }
    return opts.config ? "rf[fixed]" : "rf[inner search]";
}

}  // namespace

void NullPipeline::fit(std::span<const Sample> train) { model_ = rf::fit_null(labels_of(train)); }

std::vector<PointPrediction> NullPipeline::predict(std::span<const Sample> queries) {
    if (!model_.fitted) throw Error("null pipeline used before fit");
    return std::vector<PointPrediction>(queries.size(), PointPrediction{model_.training_mean, 0.0});
}

FeatureForestPipeline::FeatureForestPipeline(const rf::FeatureTable& table, ForestOptions opts)
    : table_(table), opts_(opts) {
    table_.validate();
}

void FeatureForestPipeline::fit(std::span<const Sample> train) { model_ = fit_forest(table_, train, opts_, &search_); }

std::vector<PointPrediction> FeatureForestPipeline::predict(std::span<const Sample> queries) {
    if (!model_.fitted) throw Error("forest pipeline used before fit");
    return forest_predict(model_, table_, queries);
}

std::string FeatureForestPipeline::describe() const { return table_.source + " features + " + forest_label(model_, opts_); }

EncoderForestPipeline::EncoderForestPipeline(const enc::Encoder& base, std::optional<enc::FinetuneConfig> finetune,
                                             ForestOptions opts)
    : encoder_(base), finetune_(std::move(finetune)), opts_(opts) {
    if (finetune_) finetune_->validate();
}

rf::FeatureTable EncoderForestPipeline::represent(std::span<const Sample> samples) {
    std::vector<imagery::Chip> chips;
    chips.reserve(samples.size());
    for (const auto& s : samples) {
        if (!s.chip) throw Error("tile '" + s.tile->tile_id + "' has no image chip");
        chips.push_back(*s.chip);
    }
    return rf::table_from_representations(enc::extract(encoder_, chips));
}

void EncoderForestPipeline::fit(std::span<const Sample> train) {
    if (finetune_) {
        std::vector<enc::LabelledChip> data;
        data.reserve(train.size());
        for (const auto& s : train) {
            if (!s.chip) throw Error("tile '" + s.tile->tile_id + "' has no image chip");
            if (!s.tile->labelled()) throw Error("training tile '" + s.tile->tile_id + "' has no population label");
            data.push_back({*s.chip, *s.tile->population});
        }
        auto result = enc::finetune(encoder_, data, *finetune_);
        spdlog::info("fine-tuning kept epoch {} (val loss {:.4g})", result.best_epoch, result.best_val_loss);
        encoder_ = std::move(result.encoder);
    }
    const auto table = represent(train);
    model_ = fit_forest(table, train, opts_, &search_);
}

std::vector<PointPrediction> EncoderForestPipeline::predict(std::span<const Sample> queries) {
    if (!model_.fitted) throw Error("encoder pipeline used before fit");
    return forest_predict(model_, represent(queries), queries);
}

std::string EncoderForestPipeline::describe() const {
    return std::string(finetune_ ? "fine-tuned " : "frozen ") + "encoder + " + forest_label(model_, opts_);
}

TrainedPredictor::TrainedPredictor(std::optional<enc::Encoder> encoder, rf::PopulationModel model)
    : encoder_(std::move(encoder)), model_(std::move(model)) {
    if (!model_.fitted) throw Error("predictor needs a fitted population model");
    if (model_.kind == rf::ModelKind::random_forest) {
        if (!encoder_) throw Error("a forest model needs the encoder that produced its features");
        if (model_.forest.n_features() != static_cast<std::size_t>(encoder_->repr_dim())) {
            throw Error("model expects " + std::to_string(model_.forest.n_features()) + " features but the encoder emits " +
                        std::to_string(encoder_->repr_dim()));
        }
    }
}

void TrainedPredictor::fit(std::span<const Sample>) { throw Error("a trained predictor cannot be refit"); }

std::vector<PointPrediction> TrainedPredictor::predict(std::span<const Sample> queries) {
    std::vector<PointPrediction> out;
    out.reserve(queries.size());
    if (model_.kind == rf::ModelKind::null) {
        out.assign(queries.size(), {model_.training_mean, 0.0});
        return out;
    }
    std::vector<imagery::Chip> chips;
    chips.reserve(queries.size());
    for (const auto& q : queries) {
        if (!q.chip) throw Error("tile '" + q.tile->tile_id + "' has no image chip");
        chips.push_back(*q.chip);
    }
    for (const auto& rep : enc::extract(*encoder_, chips)) {
        const auto p = rf::predict_one(model_, rep.vector);
        out.push_back({p.mean, p.std});
    }
    return out;
}

std::string TrainedPredictor::describe() const {
    return model_.kind == rf::ModelKind::null ? "null model" : "encoder + " + forest_label(model_, ForestOptions{});
}

std::string TrainedPredictor::fingerprint() const {
    std::string fp = "model:" + model_.training_fingerprint;
    if (encoder_) fp += ";encoder:" + encoder_->fingerprint();
    return fp;
}

}  // namespace popgrid::evalx
