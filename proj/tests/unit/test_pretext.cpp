#include "doctest.h"
#include "test_util.hpp"

#include "popgrid/common.hpp"
#include "popgrid/pretext.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

using namespace popgrid;
using Eigen::MatrixXd;

namespace {

MatrixXd gaussian(int n, int d, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0, 1);
    MatrixXd m(n, d);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) m(i, j) = g(rng);
    }
    return m;
}

// Straight transcription of the formula with explicit loops.
double oracle_loss(const MatrixXd& za, const MatrixXd& zb, double lambda) {
    const int n = static_cast<int>(za.rows()), d = static_cast<int>(za.cols());
    auto standardise = [&](const MatrixXd& z) {
        MatrixXd out(n, d);
        for (int j = 0; j < d; ++j) {
            double mu = 0;
            for (int i = 0; i < n; ++i) mu += z(i, j);
            mu /= n;
            double var = 0;
            for (int i = 0; i < n; ++i) var += (z(i, j) - mu) * (z(i, j) - mu);
            const double sd = std::sqrt(var / n);
            for (int i = 0; i < n; ++i) out(i, j) = (z(i, j) - mu) / sd;
        }
        return out;
    };
    const MatrixXd a = standardise(za), b = standardise(zb);
    double loss = 0;
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            double c = 0;
            for (int k = 0; k < n; ++k) c += a(k, i) * b(k, j);
            c /= n;
            loss += i == j ? (1 - c) * (1 - c) : lambda * c * c;
        }
    }
    return loss;
}

MatrixXd hadamard(int n) {
    MatrixXd h(1, 1);
    h(0, 0) = 1;
    while (h.rows() < n) {
        const auto m = h.rows();
        MatrixXd next(2 * m, 2 * m);
        next << h, h, h, -h;
        h = next;
    }
    return h;
}

imagery::Chip pattern_chip(const std::string& id, int kind, std::mt19937_64& rng) {
    imagery::Chip c;
    c.tile_id = id;
    c.pixels_raw.resize(static_cast<std::size_t>(imagery::kRawSize) * imagery::kRawSize * 3);
    std::uniform_int_distribution<int> noise(-6, 6);
    for (int y = 0; y < imagery::kRawSize; ++y) {
        for (int x = 0; x < imagery::kRawSize; ++x) {
            const bool on = kind == 1 && ((x / 25 + y / 25) % 2 == 0);
            for (int ch = 0; ch < 3; ++ch) {
                const int base = on ? 230 : (kind == 1 ? 20 : 90 + 10 * ch);
                c.pixels_raw[(static_cast<std::size_t>(y) * imagery::kRawSize + x) * 3 + ch] =
                    static_cast<std::uint8_t>(std::clamp(base + noise(rng), 0, 255));
            }
        }
    }
    return c;
}

std::vector<std::vector<int>> blob_points_partition_oracle(const MatrixXd& X) {
    // Exhaustive search over all 2-partitions (point 0 fixed in part 0).
    const int n = static_cast<int>(X.rows());
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> best_labels;
    for (std::uint32_t mask = 0; mask < (1u << (n - 1)); ++mask) {
        std::vector<int> labels(n, 0);
        for (int i = 1; i < n; ++i) labels[i] = (mask >> (i - 1)) & 1;
        if (std::count(labels.begin(), labels.end(), 1) == 0) continue;
        double wcss = 0;
        for (int c = 0; c < 2; ++c) {
            Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(X.cols());
            int cnt = 0;
            for (int i = 0; i < n; ++i) {
                if (labels[i] == c) {
                    mu += X.row(i);
                    ++cnt;
                }
            }
            mu /= cnt;
            for (int i = 0; i < n; ++i) {
                if (labels[i] == c) wcss += (X.row(i) - mu).squaredNorm();
            }
        }
        if (wcss < best) {
            best = wcss;
            best_labels = labels;
        }
    }
    return {best_labels};
}

bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) return false;
    std::map<int, int> ab, ba;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (ab.count(a[i]) && ab[a[i]] != b[i]) return false;
        if (ba.count(b[i]) && ba[b[i]] != a[i]) return false;
        ab[a[i]] = b[i];
        ba[b[i]] = a[i];
    }
    return true;
}

}  // namespace

TEST_CASE("perfectly correlated views give the identity cross-correlation") {
    std::mt19937_64 rng(1);
    // Columns that are uncorrelated over the batch: affine images of distinct Hadamard columns.
    const MatrixXd h = hadamard(16);
    std::uniform_real_distribution<double> scale(0.5, 3.0), shift(-4.0, 4.0);
    MatrixXd z(16, 5);
    for (int j = 0; j < 5; ++j) z.col(j) = (h.col(j + 1) * scale(rng)).array() + shift(rng);
    const auto L = pretext::barlow_loss(z, z, 5e-3);
    CHECK((L.C - MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(L.loss < 1e-6);

    // Arbitrary columns: the diagonal is still exactly one.
    const MatrixXd g = gaussian(64, 5, rng);
    const auto G = pretext::barlow_loss(g, g, 5e-3);
    for (int i = 0; i < 5; ++i) CHECK(G.C(i, i) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("orthogonal views give loss equal to the dimension") {
    const MatrixXd h = hadamard(8);
    const MatrixXd za = h.middleCols(1, 3), zb = h.middleCols(4, 3);
    const auto L = pretext::barlow_loss(za, zb, 5e-3);
    CHECK(L.C.cwiseAbs().maxCoeff() == 0.0);
    CHECK(L.loss == 3.0);
}

TEST_CASE("loss matches the loop oracle, is symmetric and non-negative") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const MatrixXd za = gaussian(8, 4, rng);
        MatrixXd zb = gaussian(8, 4, rng);
        if (trial % 3 == 0) zb = za + 0.1 * zb;
        const double lambda = trial % 2 ? 5e-3 : 0.7;
        const auto L = pretext::barlow_loss(za, zb, lambda);
        CHECK(std::abs(L.loss - oracle_loss(za, zb, lambda)) < 1e-9);
        CHECK(std::abs(L.loss - pretext::barlow_loss(zb, za, lambda).loss) < 1e-9);
        CHECK(L.loss >= 0);
    }
}

TEST_CASE("analytic gradient matches central differences") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const MatrixXd za = gaussian(4, 3, rng), zb = gaussian(4, 3, rng);
        const double lambda = 0.3;
        const auto L = pretext::barlow_loss(za, zb, lambda, true);
        for (int side = 0; side < 2; ++side) {
            const MatrixXd& analytic = side == 0 ? L.grad_a : L.grad_b;
            for (int i = 0; i < 4; ++i) {
                for (int j = 0; j < 3; ++j) {
                    const double h = 1e-6;
                    MatrixXd pa = za, pb = zb, ma = za, mb = zb;
                    (side == 0 ? pa : pb)(i, j) += h;
                    (side == 0 ? ma : mb)(i, j) -= h;
                    const double fd = (pretext::barlow_loss(pa, pb, lambda).loss - pretext::barlow_loss(ma, mb, lambda).loss) / (2 * h);
                    const double denom = std::max(1e-3, std::max(std::abs(fd), std::abs(analytic(i, j))));
                    CHECK(std::abs(fd - analytic(i, j)) / denom < 1e-4);
                }
            }
        }
    }
}

TEST_CASE("a constant column is rejected by name") {
    std::mt19937_64 rng(4);
    MatrixXd za = gaussian(6, 3, rng);
    const MatrixXd zb = gaussian(6, 3, rng);
    za.col(2).setConstant(1.5);
    try {
        pretext::barlow_loss(za, zb, 5e-3);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("dimension 2") != std::string::npos);
    }
    CHECK_THROWS_AS(pretext::barlow_loss(za.topRows(1), zb.topRows(1), 5e-3), Error);
}

TEST_CASE("view generation") {
    std::mt19937_64 rng(5);
    const auto chip = pattern_chip("c", 1, rng);
    const imagery::NormalizationStats stats;

    SUBCASE("no augmentation returns the prepared input") {
        pretext::BarlowConfig cfg;
        cfg.view_augmentations.clear();
        const auto [a, b] = pretext::make_views(chip, cfg, stats, 9);
        const auto ref = imagery::prepare_for_model(chip, stats);
        CHECK(a.pixels_model == ref.pixels_model);
        CHECK(b.pixels_model == ref.pixels_model);
    }
    SUBCASE("seeded and independent") {
        const pretext::BarlowConfig cfg;
        const auto v1 = pretext::make_views(chip, cfg, stats, 11);
        const auto v2 = pretext::make_views(chip, cfg, stats, 11);
        CHECK(v1.first.pixels_model == v2.first.pixels_model);
        CHECK(v1.second.pixels_model == v2.second.pixels_model);
        CHECK(v1.first.pixels_model != v1.second.pixels_model);
        CHECK(v1.first.pixels_model.size() == 3u * 224 * 224);
        for (float v : v1.first.pixels_model) REQUIRE(std::isfinite(v));
    }
    SUBCASE("grayscale makes the channels equal") {
        pretext::BarlowConfig cfg;
        cfg.view_augmentations = {{pretext::Augmentation::grayscale, 1.0}};
        const auto [a, b] = pretext::make_views(chip, cfg, stats, 3);
        for (const auto* v : {&a, &b}) {
            double worst = 0;
            for (int y = 0; y < 224; y += 7) {
                for (int x = 0; x < 224; x += 7) {
                    const double r = v->model(0, y, x) * stats.std[0] + stats.mean[0];
                    const double g = v->model(1, y, x) * stats.std[1] + stats.mean[1];
                    const double bl = v->model(2, y, x) * stats.std[2] + stats.mean[2];
                    worst = std::max({worst, std::abs(r - g), std::abs(g - bl)});
                }
            }
            CHECK(worst < 1e-6);
        }
    }
    SUBCASE("every augmentation keeps values in the unit range") {
        for (const auto& aug : pretext::default_view_augmentations()) {
            pretext::BarlowConfig cfg;
            cfg.view_augmentations = {{aug.kind, 1.0}};
            const auto [a, b] = pretext::make_views(chip, cfg, stats, 21);
            for (int c = 0; c < 3; ++c) {
                for (int i = 0; i < 224 * 224; i += 97) {
                    const double v = a.pixels_model[c * 224 * 224 + i] * stats.std[c] + stats.mean[c];
                    CHECK(v >= -1e-6);
                    CHECK(v <= 1 + 1e-6);
                }
            }
        }
    }
    SUBCASE("unknown names are rejected") {
        CHECK(pretext::parse_augmentation("solarization") == pretext::Augmentation::solarization);
        CHECK_THROWS_AS(pretext::parse_augmentation("random-crop"), Error);
    }
}

TEST_CASE("k-means on two separated blobs matches the exhaustive 2-partition") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> g(0, 0.5);
        const int n = 8 + static_cast<int>(seed);
        MatrixXd X(n, 3);
        for (int i = 0; i < n; ++i) {
            const double shift = (i * 7 + static_cast<int>(seed)) % 3 == 0 ? 10.0 : 0.0;
            for (int j = 0; j < 3; ++j) X(i, j) = shift + g(rng);
        }
        const auto km = pretext::kmeans(X, 2, seed);
        CHECK(km.converged);
        CHECK(same_partition(km.labels, blob_points_partition_oracle(X)[0]));
        for (std::size_t t = 1; t < km.wcss_history.size(); ++t) CHECK(km.wcss_history[t] <= km.wcss_history[t - 1] + 1e-12);
    }
}

TEST_CASE("k-means objective never increases and empty clusters are re-seeded") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const MatrixXd X = gaussian(60, 4, rng);
        const int k = 2 + trial % 5;
        const auto km = pretext::kmeans(X, k, static_cast<std::uint64_t>(trial));
        for (std::size_t t = 1; t < km.wcss_history.size(); ++t) CHECK(km.wcss_history[t] <= km.wcss_history[t - 1] + 1e-9);
        CHECK(km.wcss_history.back() == doctest::Approx(pretext::within_cluster_ss(X, km.centroids, km.labels)));
    }

    MatrixXd X(6, 1);
    X << 0, 0.1, 0.2, 5, 5.1, 5.2;
    MatrixXd init(3, 1);
    init << 0, 5, 1000;  // the third centroid attracts nothing
    const auto km = pretext::kmeans(X, 3, 0, 100, &init);
    CHECK(km.reseeded >= 1);
    std::set<int> used(km.labels.begin(), km.labels.end());
    CHECK(used.size() == 3);
    CHECK_THROWS_AS(pretext::kmeans(X, 7, 0), Error);
}

TEST_CASE("DeepCluster epochs") {
    std::mt19937_64 rng(9);
    std::vector<imagery::Chip> chips;
    std::vector<int> kind;
    for (int i = 0; i < 12; ++i) {
        kind.push_back(i % 3 == 0 ? 1 : 0);
        chips.push_back(pattern_chip("t" + std::to_string(i), kind.back(), rng));
    }
    auto encoder = enc::Encoder::from_architecture(enc::architecture_preset("tiny-cnn"), 4);

    SUBCASE("two chip types become two clusters") {
        pretext::ClusterState state;
        pretext::DeepClusterConfig cfg;
        cfg.k = 2;
        cfg.learning_rate = 0;
        pretext::deepcluster_epoch(encoder, chips, state, cfg, 1);
        std::vector<int> labels;
        for (const auto& c : chips) labels.push_back(state.assignments.at(c.tile_id));
        CHECK(same_partition(labels, kind));
        CHECK(state.iteration == 1);
        for (std::size_t t = 1; t < state.wcss_history.size(); ++t) CHECK(state.wcss_history[t] <= state.wcss_history[t - 1]);
    }
    SUBCASE("a single cluster has zero classification loss") {
        pretext::ClusterState state;
        pretext::DeepClusterConfig cfg;
        cfg.k = 1;
        pretext::deepcluster_epoch(encoder, chips, state, cfg, 1);
        CHECK(state.classification_loss == 0.0);
        CHECK(state.cluster_sizes() == std::vector<int>{12});
    }
    SUBCASE("a frozen encoder reaches a fixed point") {
        const auto before = enc::snapshot_weights(encoder);
        pretext::ClusterState state;
        pretext::DeepClusterConfig cfg;
        cfg.k = 3;
        cfg.learning_rate = 0;
        pretext::deepcluster_epoch(encoder, chips, state, cfg, 1);
        const auto first = state.assignments;
        pretext::deepcluster_epoch(encoder, chips, state, cfg, 2);
        CHECK(state.assignments == first);
        const auto after = enc::snapshot_weights(encoder);
        for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].values == after[i].values);
    }
    SUBCASE("training updates the encoder and the log records cluster sizes") {
        pretext::PretextConfig cfg;
        cfg.method = pretext::Method::deepcluster;
        cfg.epochs = 2;
        cfg.deepcluster.k = 2;
        cfg.deepcluster.batch_size = 4;
        const auto before = enc::snapshot_weights(encoder);
        const auto log = pretext::run_pretext(encoder, chips, cfg);
        REQUIRE(log.rows.size() == 2);
        int total = 0;
        for (int s : log.rows[1].cluster_sizes) total += s;
        CHECK(total == 12);
        CHECK(enc::snapshot_weights(encoder)[0].values != before[0].values);
        CHECK(log.to_csv().rfind("epoch,loss,cluster_sizes\n", 0) == 0);
    }
}

TEST_CASE("Barlow Twins epochs run and respect a zero learning rate") {
    std::mt19937_64 rng(10);
    std::vector<imagery::Chip> chips;
    for (int i = 0; i < 8; ++i) chips.push_back(pattern_chip("b" + std::to_string(i), i % 2, rng));
    auto encoder = enc::Encoder::from_architecture(enc::architecture_preset("tiny-cnn"), 6);
    pretext::BarlowConfig cfg;
    cfg.batch_size = 4;
    cfg.embed_dim = 8;

    cfg.learning_rate = 0;
    pretext::Projector proj(encoder.repr_dim(), cfg.embed_dim, 1);
    const auto before = enc::snapshot_weights(encoder);
    const double l0 = pretext::barlow_epoch(encoder, proj, chips, cfg, 1);
    CHECK(std::isfinite(l0));
    CHECK(l0 >= 0);
    CHECK(enc::snapshot_weights(encoder)[0].values == before[0].values);
    CHECK(pretext::barlow_epoch(encoder, proj, chips, cfg, 1) == l0);

    pretext::PretextConfig run;
    run.epochs = 2;
    run.barlow = cfg;
    run.barlow.learning_rate = 1e-3;
    const auto log = pretext::run_pretext(encoder, chips, run);
    REQUIRE(log.rows.size() == 2);
    CHECK(std::isfinite(log.rows[1].loss));
    CHECK(enc::snapshot_weights(encoder)[0].values != before[0].values);
}
