#include "popgrid/pretext.hpp"

#include "popgrid/common.hpp"
#include "popgrid/nn/optim.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

namespace popgrid::pretext {

using Eigen::MatrixXd;

// ---- Barlow loss ------------------------------------------------------------------------------

namespace {

struct Standardized {
    MatrixXd a;
    Eigen::RowVectorXd sigma;
};

Standardized standardize(const MatrixXd& z, const char* view) {
    const auto n = static_cast<double>(z.rows());
    const Eigen::RowVectorXd mu = z.colwise().mean();
    MatrixXd centered = z.rowwise() - mu;
    Eigen::RowVectorXd sigma = (centered.array().square().colwise().sum() / n).sqrt();
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
        // Relative threshold: a column that is constant up to rounding cannot be standardised either.
        const double scale = std::max(1.0, z.col(j).cwiseAbs().maxCoeff());
        if (!(sigma(j) > 1e-12 * scale)) {
            throw Error("barlow_loss: dimension " + std::to_string(j) + " of view " + view +
                        " has zero variance over the batch");
        }
    }
    for (Eigen::Index j = 0; j < z.cols(); ++j) centered.col(j) /= sigma(j);
    return {std::move(centered), std::move(sigma)};
}

// Backward of column standardisation with population std: dx = (g - mean(g) - a * mean(g .* a)) / sigma.
MatrixXd standardize_backward(const Standardized& s, const MatrixXd& g) {
    const auto n = static_cast<double>(g.rows());
    MatrixXd dx(g.rows(), g.cols());
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
        const double mean_g = g.col(j).sum() / n;
        const double mean_ga = g.col(j).dot(s.a.col(j)) / n;
        dx.col(j) = (g.col(j).array() - mean_g - s.a.col(j).array() * mean_ga) / s.sigma(j);
    }
    return dx;
}

}  // namespace

BarlowLoss barlow_loss(const MatrixXd& z_a, const MatrixXd& z_b, double lambda, bool with_gradient) {
    if (z_a.rows() != z_b.rows() || z_a.cols() != z_b.cols()) throw Error("barlow_loss: view shapes differ");
    if (z_a.rows() < 2) throw Error("barlow_loss: batch must hold at least 2 samples");
    if (!(lambda > 0)) throw Error("barlow_loss: lambda must be positive");
    const auto sa = standardize(z_a, "a");
    const auto sb = standardize(z_b, "b");
    const auto n = static_cast<double>(z_a.rows());

    BarlowLoss out;
    out.C = sa.a.transpose() * sb.a / n;
    const auto D = out.C.rows();
    MatrixXd G(D, D);  // dloss/dC
    for (Eigen::Index i = 0; i < D; ++i) {
        for (Eigen::Index j = 0; j < D; ++j) {
            const double c = out.C(i, j);
            if (i == j) {
                out.loss += (1 - c) * (1 - c);
                G(i, j) = -2 * (1 - c);
            } else {
                out.loss += lambda * c * c;
                G(i, j) = 2 * lambda * c;
            }
        }
    }
    if (with_gradient) {
        out.grad_a = standardize_backward(sa, sb.a * G.transpose() / n);
        out.grad_b = standardize_backward(sb, sa.a * G / n);
    }
    return out;
}

// ---- augmentations ----------------------------------------------------------------------------

std::string_view to_string(Augmentation a) {
    switch (a) {
        case Augmentation::crop_resize: return "crop-resize";
        case Augmentation::horizontal_flip: return "horizontal-flip";
        case Augmentation::color_jitter: return "color-jitter";
        case Augmentation::grayscale: return "grayscale";
        case Augmentation::gaussian_blur: return "gaussian-blur";
        case Augmentation::solarization: return "solarization";
    }
    return "?";
}

Augmentation parse_augmentation(std::string_view s) {
    for (auto a : {Augmentation::crop_resize, Augmentation::horizontal_flip, Augmentation::color_jitter,
                   Augmentation::grayscale, Augmentation::gaussian_blur, Augmentation::solarization}) {
        if (s == to_string(a)) return a;
    }
    throw Error("unknown view augmentation '" + std::string(s) +
                "' (expected crop-resize, horizontal-flip, color-jitter, grayscale, gaussian-blur or solarization)");
}

double default_probability(Augmentation a) {
    switch (a) {
        case Augmentation::crop_resize: return 1.0;
        case Augmentation::horizontal_flip: return 0.5;
        case Augmentation::color_jitter: return 0.8;
        case Augmentation::grayscale: return 0.2;
        case Augmentation::gaussian_blur: return 0.5;
        case Augmentation::solarization: return 0.1;
    }
    return 0;
}

std::vector<ViewAugmentation> default_view_augmentations() {
    std::vector<ViewAugmentation> out;
    for (auto a : {Augmentation::crop_resize, Augmentation::horizontal_flip, Augmentation::color_jitter,
                   Augmentation::grayscale, Augmentation::gaussian_blur, Augmentation::solarization}) {
        out.push_back({a, default_probability(a)});
    }
    return out;
}

void BarlowConfig::validate() const {
    if (!(lambda_offdiag > 0)) throw Error("barlow: lambda_offdiag must be > 0");
    if (batch_size < 2) throw Error("barlow: batch_size must be >= 2");
    if (embed_dim < 1) throw Error("barlow: embed_dim must be >= 1");
    if (!(learning_rate >= 0)) throw Error("barlow: learning_rate must be >= 0");
    for (const auto& v : view_augmentations) {
        if (!(v.probability >= 0 && v.probability <= 1)) throw Error("barlow: augmentation probability outside [0, 1]");
    }
}

namespace {

constexpr int S = imagery::kModelSize;
constexpr std::size_t kPlane = static_cast<std::size_t>(S) * S;

/// Planar RGB in [0, 1] at model resolution.
using Image = std::vector<double>;

double& px(Image& im, int c, int y, int x) { return im[c * kPlane + static_cast<std::size_t>(y) * S + x]; }
double px(const Image& im, int c, int y, int x) { return im[c * kPlane + static_cast<std::size_t>(y) * S + x]; }

void clamp01(Image& im) {
    for (auto& v : im) v = std::clamp(v, 0.0, 1.0);
}

double luma(const Image& im, std::size_t i) {
    return 0.299 * im[i] + 0.587 * im[kPlane + i] + 0.114 * im[2 * kPlane + i];
}

Image crop_resize(const Image& im, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> scale(0.08, 1.0), log_ratio(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double area = static_cast<double>(kPlane);
    int cw = S, ch = S, x0 = 0, y0 = 0;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * scale(rng);
        const double ratio = std::exp(log_ratio(rng));
        const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
        const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
        if (w >= 1 && h >= 1 && w <= S && h <= S) {
            cw = w;
            ch = h;
            x0 = std::uniform_int_distribution<int>(0, S - w)(rng);
            y0 = std::uniform_int_distribution<int>(0, S - h)(rng);
            break;
        }
    }
    Image out(im.size());
    const double sx = static_cast<double>(cw) / S, sy = static_cast<double>(ch) / S;
    for (int y = 0; y < S; ++y) {
        const double fy = std::clamp(y0 + (y + 0.5) * sy - 0.5, 0.0, S - 1.0);
        const int y_lo = static_cast<int>(fy), y_hi = std::min(y_lo + 1, S - 1);
        const double wy = fy - y_lo;
        for (int x = 0; x < S; ++x) {
            const double fx = std::clamp(x0 + (x + 0.5) * sx - 0.5, 0.0, S - 1.0);
            const int x_lo = static_cast<int>(fx), x_hi = std::min(x_lo + 1, S - 1);
            const double wx = fx - x_lo;
            for (int c = 0; c < 3; ++c) {
                const double top = px(im, c, y_lo, x_lo) * (1 - wx) + px(im, c, y_lo, x_hi) * wx;
                const double bot = px(im, c, y_hi, x_lo) * (1 - wx) + px(im, c, y_hi, x_hi) * wx;
                px(out, c, y, x) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

void hflip(Image& im) {
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < S; ++y) {
            auto row = im.begin() + static_cast<std::ptrdiff_t>(c * kPlane + static_cast<std::size_t>(y) * S);
            std::reverse(row, row + S);
        }
    }
}

void color_jitter(Image& im, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> bright(0.6, 1.4), contrast(0.6, 1.4), sat(0.8, 1.2), hue(-0.1, 0.1);
    const double b = bright(rng), k = contrast(rng), s = sat(rng), h = hue(rng);

    for (auto& v : im) v *= b;
    clamp01(im);

    double mean_luma = 0;
    for (std::size_t i = 0; i < kPlane; ++i) mean_luma += luma(im, i);
    mean_luma /= static_cast<double>(kPlane);
    for (auto& v : im) v = (v - mean_luma) * k + mean_luma;
    clamp01(im);

    for (std::size_t i = 0; i < kPlane; ++i) {
        const double g = luma(im, i);
        for (int c = 0; c < 3; ++c) im[c * kPlane + i] = (im[c * kPlane + i] - g) * s + g;
    }
    clamp01(im);

    // Hue shift as a rotation of the chroma plane in YIQ space.
    const double theta = h * 2 * std::numbers::pi, cs = std::cos(theta), sn = std::sin(theta);
    for (std::size_t i = 0; i < kPlane; ++i) {
        const double r = im[i], g = im[kPlane + i], bl = im[2 * kPlane + i];
        const double Y = 0.299 * r + 0.587 * g + 0.114 * bl;
        const double I = 0.596 * r - 0.274 * g - 0.322 * bl;
        const double Q = 0.211 * r - 0.523 * g + 0.312 * bl;
        const double I2 = I * cs - Q * sn, Q2 = I * sn + Q * cs;
        im[i] = Y + 0.956 * I2 + 0.621 * Q2;
        im[kPlane + i] = Y - 0.272 * I2 - 0.647 * Q2;
        im[2 * kPlane + i] = Y - 1.106 * I2 + 1.703 * Q2;
    }
    clamp01(im);
}

void grayscale(Image& im) {
    for (std::size_t i = 0; i < kPlane; ++i) {
        const double g = luma(im, i);
        im[i] = im[kPlane + i] = im[2 * kPlane + i] = g;
    }
}

void gaussian_blur(Image& im, std::mt19937_64& rng) {
    const double sigma = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0;
    for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& w : kernel) w /= total;

    Image tmp(im.size());
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * px(im, c, y, std::clamp(x + i, 0, S - 1));
                px(tmp, c, y, x) = acc;
            }
        }
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * px(tmp, c, std::clamp(y + i, 0, S - 1), x);
                px(im, c, y, x) = acc;
            }
        }
    }
}

void solarize(Image& im) {
    for (auto& v : im) {
        if (v >= 0.5) v = 1.0 - v;
    }
}

Image base_image(const imagery::Chip& chip) {
    auto im = imagery::resize_bilinear(chip.pixels_raw, imagery::kRawSize, imagery::kRawSize, imagery::kChannels, S, S);
    for (auto& v : im) v /= 255.0;
    return im;
}

imagery::Chip render_view(const imagery::Chip& chip, Image im, const imagery::NormalizationStats& stats) {
    imagery::Chip out;
    out.tile_id = chip.tile_id;
    out.acquisition_year = chip.acquisition_year;
    out.pixels_raw = chip.pixels_raw;
    out.pixels_model.resize(im.size());
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < kPlane; ++i) {
            out.pixels_model[c * kPlane + i] = static_cast<float>((im[c * kPlane + i] - stats.mean[c]) / stats.std[c]);
        }
    }
    return out;
}

Image augment(Image im, const std::vector<ViewAugmentation>& augs, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (const auto& a : augs) {
        // Always draw the coin so the stream position does not depend on earlier outcomes.
        if (coin(rng) >= a.probability) continue;
        switch (a.kind) {
            case Augmentation::crop_resize: im = crop_resize(im, rng); break;
            case Augmentation::horizontal_flip: hflip(im); break;
            case Augmentation::color_jitter: color_jitter(im, rng); break;
            case Augmentation::grayscale: grayscale(im); break;
            case Augmentation::gaussian_blur: gaussian_blur(im, rng); break;
            case Augmentation::solarization: solarize(im); break;
        }
    }
    return im;
}

}  // namespace

std::pair<imagery::Chip, imagery::Chip> make_views(const imagery::Chip& chip, const BarlowConfig& cfg,
                                                   const imagery::NormalizationStats& stats, std::uint64_t seed) {
    chip.validate();
    const Image base = base_image(chip);
    std::mt19937_64 rng(seed);
    auto a = augment(base, cfg.view_augmentations, rng);
    auto b = augment(base, cfg.view_augmentations, rng);
    return {render_view(chip, std::move(a), stats), render_view(chip, std::move(b), stats)};
}

// ---- projector --------------------------------------------------------------------------------

Projector::Projector(int repr_dim, int embed_dim, std::uint64_t seed)
    : weight("projector.weight", {embed_dim, repr_dim}), bias("projector.bias", {embed_dim}) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, std::sqrt(1.0 / repr_dim));
    for (auto& w : weight.value) w = g(rng);
}

std::vector<double> Projector::forward(std::span<const double> rep) const {
    const int e = weight.shape[0], d = weight.shape[1];
    if (rep.size() != static_cast<std::size_t>(d)) throw Error("projector: representation size mismatch");
    std::vector<double> out(bias.value);
    for (int i = 0; i < e; ++i) {
        for (int j = 0; j < d; ++j) out[i] += weight.value[static_cast<std::size_t>(i) * d + j] * rep[j];
    }
    return out;
}

std::vector<double> Projector::backward(std::span<const double> rep, std::span<const double> grad_out) {
    const int e = weight.shape[0], d = weight.shape[1];
    std::vector<double> grad_rep(d, 0.0);
    for (int i = 0; i < e; ++i) {
        bias.grad[i] += grad_out[i];
        for (int j = 0; j < d; ++j) {
            weight.grad[static_cast<std::size_t>(i) * d + j] += grad_out[i] * rep[j];
            grad_rep[j] += weight.value[static_cast<std::size_t>(i) * d + j] * grad_out[i];
        }
    }
    return grad_rep;
}

namespace {

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, int batch_size, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    return batches;
}

std::vector<double> represent(enc::Encoder& encoder, const imagery::Chip& chip) {
    nn::ForwardContext ctx;
    return encoder.represent(enc::input_tensor(encoder, chip), ctx);
}

}  // namespace

double barlow_epoch(enc::Encoder& encoder, Projector& projector, std::span<const imagery::Chip> chips,
                    const BarlowConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (chips.size() < 2) throw Error("barlow: need at least 2 chips");
    if (projector.weight.shape.size() != 2 || projector.weight.shape[1] != encoder.repr_dim()) {
        throw Error("barlow: projector does not match the encoder's representation size");
    }
    auto params = encoder.parameters();
    params.push_back(&projector.weight);
    params.push_back(&projector.bias);
    nn::Adam opt(params);
    opt.zero_grad();
    const std::vector<double> lrs(static_cast<std::size_t>(encoder.n_groups()), cfg.learning_rate);

    std::mt19937_64 rng(mix_seed(seed, 0x6261726cULL));
    double total = 0;
    int n_batches = 0;
    for (const auto& batch : shuffled_batches(chips.size(), cfg.batch_size, rng)) {
        if (batch.size() < 2) continue;
        const auto n = static_cast<Eigen::Index>(batch.size());
        std::vector<std::pair<imagery::Chip, imagery::Chip>> views;
        views.reserve(batch.size());
        MatrixXd za(n, cfg.embed_dim), zb(n, cfg.embed_dim);
        std::vector<std::vector<double>> ra, rb;
        for (Eigen::Index r = 0; r < n; ++r) {
            views.push_back(make_views(chips[batch[r]], cfg, encoder.normalization(), mix_seed(seed, batch[r])));
            ra.push_back(represent(encoder, views.back().first));
            rb.push_back(represent(encoder, views.back().second));
            const auto pa = projector.forward(ra.back()), pb = projector.forward(rb.back());
            for (int j = 0; j < cfg.embed_dim; ++j) {
                za(r, j) = pa[j];
                zb(r, j) = pb[j];
            }
        }
        const auto L = barlow_loss(za, zb, cfg.lambda_offdiag, true);
        total += L.loss;
        ++n_batches;
        if (cfg.learning_rate == 0) continue;
        // Activations are cached per sample, so each view is re-run before its backward pass.
        for (Eigen::Index r = 0; r < n; ++r) {
            for (int v = 0; v < 2; ++v) {
                const auto& chip = v == 0 ? views[r].first : views[r].second;
                const auto& rep = v == 0 ? ra[r] : rb[r];
                const auto& grad = v == 0 ? L.grad_a : L.grad_b;
                std::vector<double> g(cfg.embed_dim);
                for (int j = 0; j < cfg.embed_dim; ++j) g[j] = grad(r, j);
                represent(encoder, chip);
                encoder.backward_represent(projector.backward(rep, g));
            }
        }
        opt.step(lrs);
    }
    if (n_batches == 0) throw Error("barlow: no batch with at least 2 chips");
    return total / n_batches;
}

// ---- k-means ----------------------------------------------------------------------------------

double within_cluster_ss(const MatrixXd& X, const MatrixXd& centroids, std::span<const int> labels) {
    double s = 0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) s += (X.row(i) - centroids.row(labels[i])).squaredNorm();
    return s;
}

namespace {

MatrixXd kmeans_plus_plus(const MatrixXd& X, int k, std::mt19937_64& rng) {
    const auto n = X.rows();
    MatrixXd C(k, X.cols());
    C.row(0) = X.row(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    for (int c = 1; c < k; ++c) {
        double total = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], (X.row(i) - C.row(c - 1)).squaredNorm());
            total += d2[i];
        }
        Eigen::Index pick = 0;
        if (total > 0) {
            double u = std::uniform_real_distribution<double>(0.0, total)(rng);
            for (pick = 0; pick < n - 1; ++pick) {
                u -= d2[pick];
                if (u < 0) break;
            }
        } else {
            pick = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
        }
        C.row(c) = X.row(pick);
    }
    return C;
}

int nearest(const MatrixXd& C, const Eigen::RowVectorXd& x) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < C.rows(); ++c) {
        const double d = (x - C.row(c)).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

}  // namespace

KMeansResult kmeans(const MatrixXd& X, int k, std::uint64_t seed, int max_iter, const MatrixXd* init) {
    const auto n = X.rows();
    if (k < 1) throw Error("kmeans: k must be >= 1");
    if (k > n) throw Error("kmeans: k = " + std::to_string(k) + " exceeds the number of points (" + std::to_string(n) + ")");
    if (!X.allFinite()) throw Error("kmeans: non-finite input");
    KMeansResult r;
    if (init) {
        if (init->rows() != k || init->cols() != X.cols()) throw Error("kmeans: initial centroids have the wrong shape");
        r.centroids = *init;
    } else {
        std::mt19937_64 rng(seed);
        r.centroids = kmeans_plus_plus(X, k, rng);
    }
    r.labels.assign(n, -1);
    for (int it = 0; it < max_iter; ++it) {
        std::vector<int> labels(n);
        for (Eigen::Index i = 0; i < n; ++i) labels[i] = nearest(r.centroids, X.row(i));

        std::vector<int> counts(k, 0);
        for (int l : labels) ++counts[l];
        bool reseeded = false;
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            Eigen::Index far = -1;
            double far_d = -1;
            for (Eigen::Index i = 0; i < n; ++i) {
                if (counts[labels[i]] < 2) continue;
                const double d = (X.row(i) - r.centroids.row(labels[i])).squaredNorm();
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            --counts[labels[far]];
            labels[far] = c;
            counts[c] = 1;
            r.centroids.row(c) = X.row(far);
            reseeded = true;
            ++r.reseeded;
        }

        MatrixXd next = MatrixXd::Zero(k, X.cols());
        for (Eigen::Index i = 0; i < n; ++i) next.row(labels[i]) += X.row(i);
        for (int c = 0; c < k; ++c) next.row(c) /= counts[c];
        r.centroids = std::move(next);
        r.iterations = it + 1;
        r.wcss_history.push_back(within_cluster_ss(X, r.centroids, labels));

        const bool unchanged = labels == r.labels;
        r.labels = std::move(labels);
        if (unchanged && !reseeded) {
            r.converged = true;
            break;
        }
    }
    return r;
}

// ---- DeepCluster ------------------------------------------------------------------------------

std::vector<int> ClusterState::cluster_sizes() const {
    std::vector<int> sizes(static_cast<std::size_t>(k), 0);
    for (const auto& [id, c] : assignments) ++sizes[static_cast<std::size_t>(c)];
    return sizes;
}

void DeepClusterConfig::validate() const {
    if (k < 1) throw Error("deepcluster: k must be >= 1");
    if (batch_size < 1) throw Error("deepcluster: batch_size must be >= 1");
    if (!(learning_rate >= 0)) throw Error("deepcluster: learning_rate must be >= 0");
    if (kmeans_max_iter < 1) throw Error("deepcluster: kmeans_max_iter must be >= 1");
}

void deepcluster_epoch(enc::Encoder& encoder, std::span<const imagery::Chip> chips, ClusterState& state,
                       const DeepClusterConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (chips.empty()) throw Error("deepcluster: no chips");
    const auto n = static_cast<Eigen::Index>(chips.size());
    const int D = encoder.repr_dim();

    std::vector<std::vector<double>> reps;
    reps.reserve(chips.size());
    MatrixXd X(n, D);
    for (Eigen::Index i = 0; i < n; ++i) {
        reps.push_back(represent(encoder, chips[i]));
        for (int j = 0; j < D; ++j) X(i, j) = reps.back()[j];
    }

    const bool warm = state.k == cfg.k && state.centroids.rows() == cfg.k && state.centroids.cols() == D;
    auto km = kmeans(X, cfg.k, mix_seed(seed, 1), cfg.kmeans_max_iter, warm ? &state.centroids : nullptr);
    if (!km.converged) spdlog::warn("k-means stopped after {} iterations without converging", km.iterations);

    // Fresh classifier over the pseudo-labels, trained jointly with the encoder.
    Projector classifier(D, cfg.k, mix_seed(seed, 2));
    auto params = encoder.parameters();
    params.push_back(&classifier.weight);
    params.push_back(&classifier.bias);
    nn::Adam opt(params);
    opt.zero_grad();
    const std::vector<double> lrs(static_cast<std::size_t>(encoder.n_groups()), cfg.learning_rate);

    std::mt19937_64 rng(mix_seed(seed, 3));
    double loss_sum = 0;
    for (const auto& batch : shuffled_batches(chips.size(), cfg.batch_size, rng)) {
        for (std::size_t i : batch) {
            const auto rep = represent(encoder, chips[i]);
            const auto logits = classifier.forward(rep);
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0;
            for (double l : logits) z += std::exp(l - mx);
            const int y = km.labels[i];
            loss_sum += -(logits[y] - mx - std::log(z));
            if (cfg.learning_rate == 0) continue;
            std::vector<double> g(logits.size());
            for (std::size_t c = 0; c < logits.size(); ++c) {
                g[c] = (std::exp(logits[c] - mx) / z - (static_cast<int>(c) == y ? 1.0 : 0.0)) /
                       static_cast<double>(batch.size());
            }
            encoder.backward_represent(classifier.backward(rep, g));
        }
        if (cfg.learning_rate > 0) opt.step(lrs);
    }

    state.k = cfg.k;
    state.centroids = km.centroids;
    state.assignments.clear();
    for (Eigen::Index i = 0; i < n; ++i) state.assignments[chips[i].tile_id] = km.labels[i];
    state.wcss_history = km.wcss_history;
    state.classification_loss = loss_sum / static_cast<double>(n);
    ++state.iteration;
}

// ---- driver -----------------------------------------------------------------------------------

std::string PretextLog::to_csv() const {
    std::string out = "epoch,loss,cluster_sizes\n";
    for (const auto& r : rows) {
        std::string sizes;
        for (std::size_t i = 0; i < r.cluster_sizes.size(); ++i) {
            if (i) sizes += ';';
            sizes += std::to_string(r.cluster_sizes[i]);
        }
        char loss[32];
        std::snprintf(loss, sizeof loss, "%.17g", r.loss);
        out += std::to_string(r.epoch) + "," + loss + "," + sizes + "\n";
    }
    return out;
}

PretextLog run_pretext(enc::Encoder& encoder, std::span<const imagery::Chip> chips, const PretextConfig& cfg) {
    if (cfg.epochs < 1) throw Error("pretext: epochs must be >= 1");
    encoder.remove_head();
    PretextLog log;
    if (cfg.method == Method::barlow_twins) {
        cfg.barlow.validate();
        Projector projector(encoder.repr_dim(), cfg.barlow.embed_dim, mix_seed(cfg.seed, 0));
        for (int e = 1; e <= cfg.epochs; ++e) {
            const double loss = barlow_epoch(encoder, projector, chips, cfg.barlow, mix_seed(cfg.seed, e));
            spdlog::info("barlow epoch {}: loss {:.5g}", e, loss);
            log.rows.push_back({e, loss, {}});
        }
    } else {
        cfg.deepcluster.validate();
        ClusterState state;
        for (int e = 1; e <= cfg.epochs; ++e) {
            deepcluster_epoch(encoder, chips, state, cfg.deepcluster, mix_seed(cfg.seed, e));
            spdlog::info("deepcluster epoch {}: loss {:.5g}", e, state.classification_loss);
            log.rows.push_back({e, state.classification_loss, state.cluster_sizes()});
        }
    }
    return log;
}

}  // namespace popgrid::pretext
