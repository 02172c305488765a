#pragma once

#include "popgrid/common.hpp"
#include "popgrid/encoder.hpp"
#include "popgrid/explain.hpp"
#include "popgrid/finetune.hpp"
#include "popgrid/geogrid.hpp"
#include "popgrid/pretext.hpp"
#include "popgrid/regress.hpp"
#include "popgrid/synth.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace popgrid::config {

/// Raised for unknown keys, wrong types and invalid values; the message names the key path.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Every path is resolved against the config file's directory; empty means "not configured".
struct Paths {
    std::filesystem::path imagery;      ///< RGB GeoTIFF mosaic
    std::filesystem::path microcensus;  ///< CSV or GeoJSON household records
    std::filesystem::path decisions;    ///< curation decision log applied by `grid`
    std::filesystem::path tiles;        ///< tile manifest (JSON lines)
    std::filesystem::path folds;
    std::filesystem::path chips;        ///< chip cache directory
    std::filesystem::path encoder;      ///< encoder manifest read by extract/finetune/train/cv/...
    std::filesystem::path features;     ///< feature table CSV
    std::filesystem::path model;        ///< population model JSON
    std::filesystem::path output;       ///< directory for command outputs
    std::filesystem::path reference;    ///< reference population raster for compare / zero sampling
    std::filesystem::path census;       ///< {district: projected total}
    std::filesystem::path state_dir;    ///< curation service state
};

struct EncoderSection {
    nlohmann::json architecture = "tiny-cnn";
    enc::Pretraining pretraining = enc::Pretraining::scratch;
};

struct ForestSection {
    bool grid_search = true;
    rf::RFConfig fixed;  ///< used when grid_search is false
    int inner_folds = 3;
};

enum class CvPipeline { encoder_forest, feature_forest, null };
std::string_view to_string(CvPipeline p);

struct CvSection {
    int n_folds = 4;
    CvPipeline pipeline = CvPipeline::encoder_forest;
    bool finetune = true;  ///< fine-tune inside each fold (encoder-forest only)
};

struct MapSection {
    int rows_per_block = 4;
    bool uncertainty = true;
};

struct UncertaintySection {
    int mc_passes = 30;
    double dropout = 0.1;
};

struct ExplainSection {
    std::vector<std::string> tiles;  ///< RAM targets; empty = first `max_tiles` labelled tiles
    int max_tiles = 8;
    explain::TsneConfig tsne;
};

struct ServeSection {
    std::string host = "127.0.0.1";
    int port = 8080;
};

struct RunConfig {
    std::uint64_t seed = 7;
    Paths paths;
    std::optional<geo::GridDef> grid;
    EncoderSection encoder;
    enc::FinetuneConfig finetune;
    pretext::PretextConfig pretext;
    ForestSection forest;
    CvSection cv;
    MapSection map;
    UncertaintySection uncertainty;
    ExplainSection explain;
    synth::Config synth;
    ServeSection serve;

    /// Canonical form used for the config hash in run manifests.
    nlohmann::json to_json() const;
    std::string hash() const;
};

/// Parses YAML text. `overrides` are "dotted.key=value" strings applied before validation, with the
/// value read as a YAML scalar or flow collection. Unknown keys anywhere are errors.
RunConfig parse_config(std::string_view yaml_text, const std::filesystem::path& base_dir = {},
                       std::span<const std::string> overrides = {});
RunConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {});

/// Config with defaults only, plus the overrides (for commands run without a file).
RunConfig default_config(std::span<const std::string> overrides = {}, const std::filesystem::path& base_dir = {});

/// YAML text of a config that reproduces `cfg` (paths written relative to `base_dir` when possible).
std::string format_config(const RunConfig& cfg, const std::filesystem::path& base_dir = {});

}  // namespace popgrid::config
