#pragma once

#include "popgrid/imagery.hpp"
#include "popgrid/nn/layers.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace popgrid::enc {

enum class Pretraining { supervised, swav, deepcluster, barlow_twins, scratch };

std::string_view to_string(Pretraining p);
Pretraining parse_pretraining(std::string_view s);

/// Built-in architectures: "tiny-cnn", "resnet18", "resnet50".
nlohmann::json architecture_preset(std::string_view name);
/// Accepts either a preset name (JSON string) or an inline architecture object.
nlohmann::json resolve_architecture(const nlohmann::json& arch);

/// Linear regression head over the pooled representation.
struct LinearHead {
    nn::Param weight;
    nn::Param bias;

    LinearHead() = default;
    explicit LinearHead(int dim);
    double forward(std::span<const double> rep) const;
};

/// Convolutional backbone: stem, S stages, a dropout slot after each stage, global average pooling,
/// and an optional linear head. Learning-rate groups: stem = 0, stage s = s + 1, head = S + 1.
class Encoder {
public:
    static Encoder from_architecture(const nlohmann::json& arch, std::uint64_t seed);

    const nlohmann::json& architecture() const { return arch_; }
    int repr_dim() const { return repr_dim_; }
    int n_stages() const { return static_cast<int>(stages_.size()); }
    int n_groups() const { return n_stages() + 2; }
    int conv_count() const;

    /// Final convolutional feature map (before pooling). Dropout slots draw from ctx.rng when set.
    nn::Tensor features(const nn::Tensor& x, nn::ForwardContext& ctx);
    /// Global-average-pooled representation.
    std::vector<double> represent(const nn::Tensor& x, nn::ForwardContext& ctx);
    /// Backpropagates a gradient w.r.t. the last representation into all backbone parameters.
    void backward_represent(std::span<const double> grad);

    bool has_head() const { return head_.has_value(); }
    LinearHead& head();
    const LinearHead& head() const;
    /// Attaches a fresh head: weights zero, bias = `bias`.
    void attach_head(double bias);
    void remove_head() { head_.reset(); }

    void set_stage_dropout(double p);
    double stage_dropout() const;

    /// Backbone parameters and buffers followed by the head (if any).
    std::vector<nn::Param*> parameters();

    const std::string& fingerprint() const { return fingerprint_; }
    void set_fingerprint(std::string fp) { fingerprint_ = std::move(fp); }
    const imagery::NormalizationStats& normalization() const { return stats_; }
    void set_normalization(const imagery::NormalizationStats& s) { stats_ = s; }

private:
    nlohmann::json arch_;
    nn::Sequential stem_;
    std::vector<nn::Sequential> stages_;
    std::vector<nn::Dropout> dropouts_;
    std::optional<LinearHead> head_;
    int repr_dim_ = 0;
    int last_h_ = 0, last_w_ = 0;
    std::string fingerprint_;
    imagery::NormalizationStats stats_;
};

/// Copies a prepared chip's model pixels into a (3, 224, 224) tensor.
nn::Tensor chip_tensor(const imagery::Chip& chip);
/// Model input for a chip, preparing raw pixels with the encoder's statistics when needed.
nn::Tensor input_tensor(const Encoder& encoder, const imagery::Chip& chip);

// ---- weights blob ---------------------------------------------------------------------------

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> values;
};

/// Little-endian container: "PGWB", u32 version, u32 count, then per tensor
/// u32 name length, name, u8 dtype (1 = f32, 2 = f64), u32 rank, u32 dims, data.
std::vector<std::uint8_t> encode_weights(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> decode_weights(std::span<const std::uint8_t> bytes);

std::vector<NamedTensor> snapshot_weights(Encoder& encoder);
/// Copies tensors into the encoder by name. Throws naming the first parameter (in architecture
/// order) that is missing or has a different shape. Head tensors are loaded when present.
void assign_weights(Encoder& encoder, std::span<const NamedTensor> tensors);

// ---- manifest -------------------------------------------------------------------------------

struct EncoderManifest {
    nlohmann::json architecture = "resnet50";
    int repr_dim = 2048;
    Pretraining pretraining = Pretraining::scratch;
    imagery::NormalizationStats normalization_stats;
    std::string weights_uri;  ///< relative to the manifest's directory unless absolute
    std::string fingerprint;  ///< sha256 of the weights bytes
    std::uint64_t seed = 0;
    bool head = false;
    std::string training_log;
};

nlohmann::json to_json(const EncoderManifest& m);
EncoderManifest manifest_from_json(const nlohmann::json& j);
EncoderManifest load_manifest(const std::filesystem::path& path);

/// Builds the encoder described by the manifest. Scratch manifests without weights are initialised
/// from `seed`. The encoder is fully constructed before it is returned; any failure throws.
Encoder load_encoder(const EncoderManifest& manifest, const std::filesystem::path& base_dir = {});
Encoder load_encoder(const std::filesystem::path& manifest_path);

/// Writes <dir>/<stem>.pgwb and <dir>/<stem>.json; returns the manifest as written.
EncoderManifest save_checkpoint(Encoder& encoder, const std::filesystem::path& dir, const std::string& stem,
                                Pretraining pretraining, std::uint64_t seed, const std::string& training_log = {});

// ---- inference ------------------------------------------------------------------------------

struct Representation {
    std::string tile_id;
    std::vector<double> vector;
    std::string encoder_fingerprint;
};

/// One representation per chip, in input order. Chips without model pixels are prepared with the
/// encoder's normalisation statistics.
std::vector<Representation> extract(Encoder& encoder, std::span<const imagery::Chip> chips);

/// Head prediction in inference mode, clamped at 0.
double predict(Encoder& encoder, const imagery::Chip& chip);

struct McPrediction {
    double mean = 0;
    double std = 0;
};

/// Dropout with rate p after each stage; each pass clamped at 0. Chip i draws from its own
/// stream seeded by mix_seed(seed, i), so results do not depend on the other chips.
std::vector<McPrediction> predict_mc_dropout(Encoder& encoder, std::span<const imagery::Chip> chips, int n_passes,
                                             double p, std::uint64_t seed);
/// Same, with an explicit stream seed per chip.
std::vector<McPrediction> predict_mc_dropout(Encoder& encoder, std::span<const imagery::Chip> chips, int n_passes,
                                             double p, std::span<const std::uint64_t> chip_seeds);

}  // namespace popgrid::enc
