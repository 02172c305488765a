#pragma once

#include "popgrid/encoder.hpp"
#include "popgrid/evalx.hpp"
#include "popgrid/finetune.hpp"
#include "popgrid/regress.hpp"

#include <optional>

namespace popgrid::evalx {

/// Predicts the mean training label everywhere.
class NullPipeline : public Pipeline {
public:
    void fit(std::span<const Sample> train) override;
    std::vector<PointPrediction> predict(std::span<const Sample> queries) override;
    std::string describe() const override { return "null"; }

private:
    rf::PopulationModel model_;
};

struct ForestOptions {
    /// Fixed hyperparameters; when absent the default grid is searched with inner spatial folds
    /// built from the training tiles only.
    std::optional<rf::RFConfig> config;
    int inner_folds = 3;
    std::uint64_t seed = 0;
};

/// Random forest on a precomputed feature table (covariates, footprints or frozen representations).
class FeatureForestPipeline : public Pipeline {
public:
    FeatureForestPipeline(const rf::FeatureTable& table, ForestOptions opts);
    void fit(std::span<const Sample> train) override;
    std::vector<PointPrediction> predict(std::span<const Sample> queries) override;
    std::string describe() const override;

    const rf::PopulationModel& model() const { return model_; }
    const std::optional<rf::GridSearchResult>& search() const { return search_; }

private:
    const rf::FeatureTable& table_;
    ForestOptions opts_;
    rf::PopulationModel model_;
    std::optional<rf::GridSearchResult> search_;
};

/// Optionally fine-tunes a copy of the encoder on the training chips, extracts representations
/// and fits a random forest on them.
class EncoderForestPipeline : public Pipeline {
public:
    EncoderForestPipeline(const enc::Encoder& base, std::optional<enc::FinetuneConfig> finetune, ForestOptions opts);
    void fit(std::span<const Sample> train) override;
    std::vector<PointPrediction> predict(std::span<const Sample> queries) override;
    std::string describe() const override;

    const enc::Encoder& encoder() const { return encoder_; }

private:
    rf::FeatureTable represent(std::span<const Sample> samples);

    enc::Encoder encoder_;
    std::optional<enc::FinetuneConfig> finetune_;
    ForestOptions opts_;
    rf::PopulationModel model_;
    std::optional<rf::GridSearchResult> search_;
};

/// A fitted model ready for prediction: encoder representations (when the model is a forest)
/// followed by the population model. fit() is rejected.
class TrainedPredictor : public Pipeline {
public:
    TrainedPredictor(std::optional<enc::Encoder> encoder, rf::PopulationModel model);
    void fit(std::span<const Sample> train) override;
    std::vector<PointPrediction> predict(std::span<const Sample> queries) override;
    std::string describe() const override;

    /// Model and encoder fingerprints, for provenance records.
    std::string fingerprint() const;

private:
    std::optional<enc::Encoder> encoder_;
    rf::PopulationModel model_;
};

/// Random forest on the rows of `table` belonging to `train`, with fixed or inner-CV-selected hyperparameters.
rf::PopulationModel fit_forest(const rf::FeatureTable& table, std::span<const Sample> train, const ForestOptions& opts,
                               std::optional<rf::GridSearchResult>* search = nullptr);

rf::Labels labels_of(std::span<const Sample> samples);

}  // namespace popgrid::evalx
