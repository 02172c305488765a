#pragma once

#include "popgrid/geogrid.hpp"
#include "popgrid/imagery.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace popgrid::evalx {

struct PredictionEntry {
    std::string tile_id;
    double y = 0;
    double y_hat = 0;
    std::string region_key;
    int fold = -1;
    double y_hat_std = 0;  ///< optional spread reported by the pipeline (0 when unavailable)
};

struct PredictionSet {
    std::vector<PredictionEntry> entries;

    /// y >= 0, y_hat >= 0, finite, unique tile ids.
    void validate() const;
    std::string to_csv() const;
};

PredictionSet parse_prediction_csv(std::string_view text);

/// Fractions, not percentages: meape = 0.5 means 50 %.
struct MetricsReport {
    double r2 = 0;
    double meape = 0;
    double meae = 0;
    double iqr_abs_err = 0;
    double aggpe = 0;
    std::size_t n = 0;
    std::size_t excluded_from_meape = 0;
    bool r2_undefined = false;      ///< every observed value identical (or n < 2)
    bool meape_undefined = false;   ///< no entry with y > 0
    bool aggpe_undefined = false;   ///< every region sums to zero
    std::vector<std::string> aggpe_excluded_regions;

    nlohmann::json to_json() const;
};

MetricsReport compute_metrics(const PredictionSet& p);

/// One labelled tile handed to a pipeline; the chip pointer may be null when no imagery is loaded.
struct Sample {
    const geo::Tile* tile = nullptr;
    const imagery::Chip* chip = nullptr;
};

struct PointPrediction {
    double mean = 0;
    double std = 0;
};

class Pipeline {
public:
    virtual ~Pipeline() = default;
    /// Trains on samples whose tiles carry population labels.
    virtual void fit(std::span<const Sample> train) = 0;
    virtual std::vector<PointPrediction> predict(std::span<const Sample> queries) = 0;
    virtual std::string describe() const = 0;
};

/// Builds a fresh, untrained pipeline for the given outer fold.
using PipelineFactory = std::function<std::unique_ptr<Pipeline>(int fold)>;

struct CvResult {
    PredictionSet predictions;
    MetricsReport metrics;
};

/// Pooled k-fold evaluation over the labelled tiles. For fold f a new pipeline is fit on the tiles
/// outside f and predicts the tiles in f. Throws LeakageError when any tile would be both trained
/// on and predicted within a fold (duplicate tile ids included), and Error when a labelled tile
/// has no fold or a fold leaves nothing to train on.
CvResult crossvalidate(const PipelineFactory& factory, std::span<const geo::Tile> tiles,
                       std::span<const imagery::Chip> chips, const geo::FoldSpec& folds);

}  // namespace popgrid::evalx
