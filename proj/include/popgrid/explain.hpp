#pragma once

#include "popgrid/encoder.hpp"
#include "popgrid/png_io.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace popgrid::explain {

struct ActivationMap {
    std::string tile_id;
    int height = 0;  ///< final feature-map resolution
    int width = 0;
    std::vector<double> heat;  ///< height x width, row-major, before upsampling
    double bias = 0;
    double prediction = 0;  ///< linear head output, not clamped

    double mean_heat() const;
    /// Bilinear (half-pixel centre) resize of the heat map, for display only.
    std::vector<double> upsampled(int size = imagery::kModelSize) const;
    nlohmann::json to_json() const;
};

/// heat(u, v) = sum_c w_c F_c(u, v) for a feature map F (C x H x W) and head weights w.
ActivationMap activation_map_from_features(const nn::Tensor& features, const enc::LinearHead& head);

/// Runs the encoder on the chip and maps its final features through the linear regression head.
/// Throws when the encoder has no linear head.
ActivationMap regression_activation_map(enc::Encoder& encoder, const imagery::Chip& chip);

/// The chip at model resolution blended with the min-max normalised heat in a blue-to-red ramp.
png::Image overlay(const imagery::Chip& chip, const ActivationMap& map, double alpha = 0.5);

/// Writes <dir>/<tile_id>.ram.png and <dir>/<tile_id>.ram.json.
void save_activation_map(const std::filesystem::path& dir, const imagery::Chip& chip, const ActivationMap& map);

struct TsneConfig {
    double perplexity = 30.0;  ///< capped at (n - 1) / 3
    int iterations = 1000;
    double learning_rate = 0.0;  ///< 0 = n / (4 * early_exaggeration)
    double early_exaggeration = 12.0;
    int exaggeration_iterations = 250;
    std::uint64_t seed = 0;
};

struct EmbeddedPoint {
    std::string tile_id;
    double x = 0;
    double y = 0;
};

/// Exact t-SNE (O(n^2) per iteration). Identical input vectors share their initial position and
/// therefore stay together. Output order matches the input.
std::vector<EmbeddedPoint> project_embeddings(std::span<const enc::Representation> reps, const TsneConfig& cfg = {});

struct PointAttributes {
    std::optional<double> population;
    std::string region_key;
};

/// tile_id,x,y,population,region_key; attributes are looked up by tile id (blank when unknown).
std::string embedding_csv(std::span<const EmbeddedPoint> points,
                          const std::map<std::string, PointAttributes>& attributes = {});

}  // namespace popgrid::explain
