#pragma once

#include "popgrid/encoder.hpp"
#include "popgrid/geogrid.hpp"

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace popgrid::rf {

struct RFConfig {
    int num_estimators = 100;
    int min_samples_split = 2;
    int min_samples_leaf = 1;
    std::uint64_t seed = 0;

    void validate() const;
    auto operator<=>(const RFConfig&) const = default;
};

/// Feature rows keyed (and therefore ordered) by tile_id.
struct FeatureTable {
    std::vector<std::string> feature_names;
    std::map<std::string, std::vector<double>> rows;
    std::string source = "representation";  ///< representation | public | footprint | public+footprint

    void validate() const;
    std::size_t width() const { return feature_names.size(); }
};

FeatureTable table_from_representations(std::span<const enc::Representation> reps);
/// CSV with a tile_id column followed by named feature columns.
FeatureTable parse_feature_table(std::string_view text, std::string source = "representation");
FeatureTable load_feature_table(const std::filesystem::path& path, std::string source = "representation");
std::string format_feature_table(const FeatureTable& table);

/// Regression tree grown with the squared-error criterion; thresholds sit at midpoints.
struct Tree {
    struct Node {
        int feature = -1;  ///< -1 marks a leaf
        double threshold = 0;
        int left = -1;
        int right = -1;
        double value = 0;
    };
    std::vector<Node> nodes;

    double predict(std::span<const double> x) const;
};

class Forest {
public:
    /// Tree t is grown on a bootstrap sample drawn from mix_seed(seed, t), so the first k trees
    /// of a larger forest equal a k-tree forest with the same seed.
    void fit(const std::vector<std::vector<double>>& X, std::span<const double> y, const RFConfig& cfg);
    std::vector<double> tree_predictions(std::span<const double> x) const;
    double predict(std::span<const double> x) const;
    /// Mean impurity decrease per feature, normalised to sum to 1 (all zero when no split exists).
    const std::vector<double>& importances() const { return importances_; }
    std::size_t size() const { return trees_.size(); }
    std::size_t n_features() const { return n_features_; }
    const std::vector<Tree>& trees() const { return trees_; }
    /// Keeps the first k trees (importances are left as fitted).
    void truncate(std::size_t k);

    std::vector<std::uint8_t> serialize() const;
    static Forest deserialize(std::span<const std::uint8_t> bytes);

private:
    std::vector<Tree> trees_;
    std::vector<double> importances_;
    std::size_t n_features_ = 0;
};

enum class ModelKind { random_forest, null };

struct PopulationModel {
    ModelKind kind = ModelKind::null;
    std::optional<RFConfig> rf_config;
    double training_mean = 0;
    std::string feature_source;
    std::vector<std::string> feature_names;
    std::string training_fingerprint;
    std::string encoder_fingerprint;  ///< encoder that produced the features, when known
    bool fitted = false;
    Forest forest;
};

using Labels = std::map<std::string, double>;

/// Fits a forest on the rows of `table` that carry a label. Every label needs a feature row.
PopulationModel fit(const FeatureTable& table, const Labels& labels, const RFConfig& cfg);
PopulationModel fit_null(const Labels& labels);

struct Prediction {
    double mean = 0;
    double std = 0;
};

/// Forest average (clamped at 0) and unbiased spread of the individual tree predictions.
std::map<std::string, Prediction> predict_with_uncertainty(const PopulationModel& model, const FeatureTable& table);
Prediction predict_one(const PopulationModel& model, std::span<const double> features);
std::map<std::string, std::vector<double>> per_tree_predictions(const PopulationModel& model, const FeatureTable& table);

struct ScoreRow {
    RFConfig config;
    double meae = 0;
};

struct GridSearchResult {
    RFConfig best;
    std::vector<ScoreRow> scores;  ///< one row per configuration, in lexicographic order
    std::string to_csv() const;
};

/// The 20-point grid: num_estimators 100..500 step 100, min_samples_split {2, 5}, min_samples_leaf {1, 2}.
std::vector<RFConfig> default_grid(std::uint64_t seed = 0);

/// Scores each configuration by pooled cross-validated median absolute error over `folds`
/// (restricted to the labelled tiles in `labels`); ties go to the lexicographically smallest config.
GridSearchResult grid_search(const FeatureTable& table, const Labels& labels, const geo::FoldSpec& folds,
                             std::uint64_t seed = 0, std::span<const RFConfig> grid = {});

/// <stem>.pgrf (forest, absent for null models) + <stem>.json (metadata).
void save_model(const PopulationModel& model, const std::filesystem::path& dir, const std::string& stem);
PopulationModel load_model(const std::filesystem::path& json_path);

}  // namespace popgrid::rf
