#pragma once

#include "popgrid/encoder.hpp"
#include "popgrid/imagery.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace popgrid::pretext {

// ---- Barlow Twins -------------------------------------------------------------------------

struct BarlowLoss {
    double loss = 0;
    Eigen::MatrixXd C;       ///< D x D cross-correlation of the standardised views
    Eigen::MatrixXd grad_a;  ///< dloss/dz_a, same shape as z_a (empty unless requested)
    Eigen::MatrixXd grad_b;
};

/// Columns of each view are standardised over the batch (population std), C = a^T b / N and
/// loss = sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2. A constant column throws, naming it.
BarlowLoss barlow_loss(const Eigen::MatrixXd& z_a, const Eigen::MatrixXd& z_b, double lambda,
                       bool with_gradient = false);

enum class Augmentation { crop_resize, horizontal_flip, color_jitter, grayscale, gaussian_blur, solarization };

std::string_view to_string(Augmentation a);
Augmentation parse_augmentation(std::string_view s);

struct ViewAugmentation {
    Augmentation kind;
    double probability = 1.0;
};

/// Application probabilities of the usual Barlow Twins image recipe.
double default_probability(Augmentation a);
/// crop-resize, flip, colour jitter, grayscale, blur, solarisation with their default probabilities.
std::vector<ViewAugmentation> default_view_augmentations();

struct BarlowConfig {
    double lambda_offdiag = 5e-3;
    int embed_dim = 32;
    int batch_size = 16;
    double learning_rate = 1e-3;
    std::vector<ViewAugmentation> view_augmentations = default_view_augmentations();

    void validate() const;
};

/// Two independently augmented views. Each starts from the chip resized to 224 x 224 and scaled to
/// [0, 1]; the listed augmentations run in order, each with its probability, then the result is
/// normalised with `stats` into pixels_model. With no augmentations both views equal
/// prepare_for_model(chip, stats).
std::pair<imagery::Chip, imagery::Chip> make_views(const imagery::Chip& chip, const BarlowConfig& cfg,
                                                   const imagery::NormalizationStats& stats, std::uint64_t seed);

/// Linear projection from the representation to the embedding space where the loss is computed.
struct Projector {
    nn::Param weight;  ///< {embed_dim, repr_dim}
    nn::Param bias;    ///< {embed_dim}

    Projector() = default;
    Projector(int repr_dim, int embed_dim, std::uint64_t seed);
    std::vector<double> forward(std::span<const double> rep) const;
    /// Accumulates parameter gradients; returns dloss/drep.
    std::vector<double> backward(std::span<const double> rep, std::span<const double> grad_out);
};

/// One pass over `chips` in shuffled mini-batches; returns the mean batch loss.
double barlow_epoch(enc::Encoder& encoder, Projector& projector, std::span<const imagery::Chip> chips,
                    const BarlowConfig& cfg, std::uint64_t seed);

// ---- DeepCluster --------------------------------------------------------------------------

struct KMeansResult {
    Eigen::MatrixXd centroids;  ///< k x D
    std::vector<int> labels;
    std::vector<double> wcss_history;  ///< within-cluster sum of squares after each iteration
    int iterations = 0;
    bool converged = false;
    int reseeded = 0;  ///< empty clusters moved to the farthest point
};

double within_cluster_ss(const Eigen::MatrixXd& X, const Eigen::MatrixXd& centroids, std::span<const int> labels);

/// Lloyd iterations from k-means++ seeding (or from `init` when given) until the labels stop
/// changing or max_iter is reached. Ties go to the lower cluster index. A cluster left empty is
/// re-seeded at the point farthest from its current centroid.
KMeansResult kmeans(const Eigen::MatrixXd& X, int k, std::uint64_t seed, int max_iter = 100,
                    const Eigen::MatrixXd* init = nullptr);

struct ClusterState {
    int k = 0;
    Eigen::MatrixXd centroids;
    std::map<std::string, int> assignments;
    int iteration = 0;  ///< completed epochs
    std::vector<double> wcss_history;  ///< from the latest k-means run
    double classification_loss = 0;    ///< mean cross-entropy of the latest epoch

    std::vector<int> cluster_sizes() const;
};

struct DeepClusterConfig {
    int k = 10;
    int batch_size = 16;
    double learning_rate = 1e-3;
    int kmeans_max_iter = 100;

    void validate() const;
};

/// Extracts representations, clusters them (warm-started from the previous centroids when their
/// shape matches, k-means++ otherwise), then trains a freshly initialised linear classifier together
/// with the encoder for one epoch of cross-entropy on the pseudo-labels. A zero learning rate
/// leaves the encoder untouched.
void deepcluster_epoch(enc::Encoder& encoder, std::span<const imagery::Chip> chips, ClusterState& state,
                       const DeepClusterConfig& cfg, std::uint64_t seed);

// ---- driver -------------------------------------------------------------------------------

struct PretextLogRow {
    int epoch = 0;
    double loss = 0;
    std::vector<int> cluster_sizes;  ///< empty for Barlow Twins
};

struct PretextLog {
    std::vector<PretextLogRow> rows;
    /// epoch,loss,cluster_sizes with sizes joined by ';'.
    std::string to_csv() const;
};

enum class Method { barlow_twins, deepcluster };

struct PretextConfig {
    Method method = Method::barlow_twins;
    int epochs = 5;
    std::uint64_t seed = 0;
    BarlowConfig barlow;
    DeepClusterConfig deepcluster;
};

/// Runs `epochs` pretext epochs in place on the encoder (its regression head is removed first).
PretextLog run_pretext(enc::Encoder& encoder, std::span<const imagery::Chip> chips, const PretextConfig& cfg);

}  // namespace popgrid::pretext
