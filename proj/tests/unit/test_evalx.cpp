#include "doctest.h"

#include "popgrid/common.hpp"
#include "popgrid/evalx.hpp"
#include "popgrid/geogrid_io.hpp"
#include "popgrid/pipelines.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

using namespace popgrid;
using evalx::PredictionEntry;
using evalx::PredictionSet;

namespace {

// Deliberately naive re-implementations used as oracles.
double naive_median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double naive_quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

PredictionSet make_set(const std::vector<double>& y, const std::vector<double>& y_hat,
                       const std::vector<std::string>& regions = {}) {
    PredictionSet p;
    for (std::size_t i = 0; i < y.size(); ++i) {
        p.entries.push_back({"t" + std::to_string(i), y[i], y_hat[i], regions.empty() ? "R" : regions[i]});
    }
    return p;
}

std::vector<geo::Tile> grid_tiles(int side, const std::function<double(int, int)>& pop) {
    std::vector<geo::Tile> tiles;
    for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c) {
            geo::Tile t;
            t.tile_id = geo::make_tile_id("D", r, c);
            t.district_id = "D";
            t.row = r;
            t.col = c;
            t.population = pop(r, c);
            t.status = geo::TileStatus::surveyed;
            t.region_key = c < side / 2 ? "D-W" : "D-E";
            tiles.push_back(t);
        }
    }
    return tiles;
}

/// Records what it was trained on and predicts the training mean.
class SpyPipeline : public evalx::Pipeline {
public:
    explicit SpyPipeline(std::map<int, std::set<std::string>>& seen, int fold) : seen_(seen), fold_(fold) {}
    void fit(std::span<const evalx::Sample> train) override {
        double s = 0;
        for (const auto& x : train) {
            seen_[fold_].insert(x.tile->tile_id);
            s += *x.tile->population;
        }
        mean_ = s / static_cast<double>(train.size());
    }
    std::vector<evalx::PointPrediction> predict(std::span<const evalx::Sample> q) override {
        return std::vector<evalx::PointPrediction>(q.size(), {mean_, 0.0});
    }
    std::string describe() const override { return "spy"; }

private:
    std::map<int, std::set<std::string>>& seen_;
    int fold_;
    double mean_ = 0;
};

}  // namespace

TEST_CASE("hand-worked metrics example") {
    const auto m = evalx::compute_metrics(make_set({1, 2, 10}, {2, 2, 5}));
    CHECK(m.meae == doctest::Approx(1.0));
    CHECK(m.meape == doctest::Approx(0.5));
    CHECK(m.aggpe == doctest::Approx(4.0 / 13.0));
    CHECK(m.r2 == doctest::Approx(1.0 - 26.0 / (438.0 / 9.0)));
    CHECK(m.iqr_abs_err == doctest::Approx(3.0 - 0.5));
    CHECK(m.n == 3);
    CHECK_FALSE(m.r2_undefined);
}

TEST_CASE("metrics agree with naive oracles on random prediction sets") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    std::uniform_int_distribution<int> region(0, 4);
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 2 + trial * 3;
        std::vector<double> y, yh;
        std::vector<std::string> rk;
        for (int i = 0; i < n; ++i) {
            y.push_back(i % 7 == 3 ? 0.0 : std::round(u(rng)));
            yh.push_back(u(rng));
            rk.push_back("r" + std::to_string(region(rng)));
        }
        const auto m = evalx::compute_metrics(make_set(y, yh, rk));

        std::vector<double> ae, ape;
        double ybar = 0;
        for (double v : y) ybar += v / n;
        double ssr = 0, sst = 0;
        std::map<std::string, std::pair<double, double>> sums;
        for (int i = 0; i < n; ++i) {
            ae.push_back(std::abs(y[i] - yh[i]));
            if (y[i] > 0) ape.push_back(std::abs(y[i] - yh[i]) / y[i]);
            ssr += (y[i] - yh[i]) * (y[i] - yh[i]);
            sst += (y[i] - ybar) * (y[i] - ybar);
            sums[rk[i]].first += y[i];
            sums[rk[i]].second += yh[i];
        }
        std::vector<double> regional;
        for (const auto& [k, s] : sums) {
            if (s.first > 0) regional.push_back(std::abs(s.first - s.second) / s.first);
        }
        CHECK(m.meae == doctest::Approx(naive_median(ae)));
        CHECK(m.iqr_abs_err == doctest::Approx(naive_quantile(ae, 0.75) - naive_quantile(ae, 0.25)));
        CHECK(m.meape == doctest::Approx(naive_median(ape)));
        CHECK(m.excluded_from_meape == static_cast<std::size_t>(n) - ape.size());
        CHECK(m.aggpe == doctest::Approx(naive_median(regional)));
        CHECK(m.r2 == doctest::Approx(1.0 - ssr / sst));
    }
}

TEST_CASE("predicting the pool mean gives zero R2") {
    const std::vector<double> y{3, 8, 1, 0, 12, 6};
    const double mean = 30.0 / 6.0;
    const auto m = evalx::compute_metrics(make_set(y, std::vector<double>(y.size(), mean)));
    CHECK(m.r2 == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("degenerate inputs are flagged, not crashed") {
    SUBCASE("identical observations leave R2 undefined") {
        const auto m = evalx::compute_metrics(make_set({4, 4, 4}, {3, 5, 4}));
        CHECK(m.r2_undefined);
        CHECK(std::isnan(m.r2));
        CHECK(m.to_json()["r2"].is_null());
        CHECK(m.to_json()["flags"]["r2_undefined"] == true);
    }
    SUBCASE("zero observations are excluded from percentage errors") {
        const auto m = evalx::compute_metrics(make_set({0, 0, 5}, {1, 2, 4}, {"a", "a", "b"}));
        CHECK(m.excluded_from_meape == 2);
        CHECK(m.meape == doctest::Approx(0.2));
        REQUIRE(m.aggpe_excluded_regions.size() == 1);
        CHECK(m.aggpe_excluded_regions[0] == "a");
        CHECK(m.aggpe == doctest::Approx(0.2));
    }
    SUBCASE("all-zero observations") {
        const auto m = evalx::compute_metrics(make_set({0, 0}, {1, 0}));
        CHECK(m.meape_undefined);
        CHECK(m.aggpe_undefined);
        CHECK(m.r2_undefined);
    }
    SUBCASE("invalid sets are rejected") {
        CHECK_THROWS_AS(evalx::compute_metrics(make_set({1, 2}, {-1, 2})), Error);
        CHECK_THROWS_AS(evalx::compute_metrics(PredictionSet{}), Error);
        auto dup = make_set({1, 2}, {1, 2});
        dup.entries[1].tile_id = dup.entries[0].tile_id;
        CHECK_THROWS_AS(evalx::compute_metrics(dup), Error);
    }
}

TEST_CASE("prediction CSV round-trips") {
    auto p = make_set({1, 2.5, 0}, {0.1, 3.0 / 7.0, 9}, {"x", "y,z", "x"});
    p.entries[1].fold = 2;
    p.entries[2].y_hat_std = 1.25;
    const auto q = evalx::parse_prediction_csv(p.to_csv());
    REQUIRE(q.entries.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(q.entries[i].tile_id == p.entries[i].tile_id);
        CHECK(q.entries[i].y == p.entries[i].y);
        CHECK(q.entries[i].y_hat == p.entries[i].y_hat);
        CHECK(q.entries[i].region_key == p.entries[i].region_key);
        CHECK(q.entries[i].fold == p.entries[i].fold);
        CHECK(q.entries[i].y_hat_std == p.entries[i].y_hat_std);
    }
}

TEST_CASE("cross-validation with a mean predictor matches the per-fold oracle") {
    const auto tiles = grid_tiles(8, [](int r, int c) { return static_cast<double>((r * 3 + c * 5) % 11); });
    const auto folds = geo::make_spatial_folds(tiles, 4);
    std::map<int, std::set<std::string>> seen;
    const auto res = evalx::crossvalidate(
        [&](int f) { return std::make_unique<SpyPipeline>(seen, f); }, tiles, {}, folds);

    REQUIRE(res.predictions.entries.size() == tiles.size());
    std::set<std::string> covered;
    for (const auto& e : res.predictions.entries) {
        CHECK(covered.insert(e.tile_id).second);
        CHECK(e.fold == folds.assignment.at(e.tile_id));
        double s = 0;
        int k = 0;
        for (const auto& t : tiles) {
            if (folds.assignment.at(t.tile_id) != e.fold) {
                s += *t.population;
                ++k;
            }
        }
        CHECK(e.y_hat == doctest::Approx(s / k));
    }
    for (const auto& [f, ids] : seen) {
        for (const auto& id : ids) CHECK(folds.assignment.at(id) != f);
        CHECK(ids.size() + static_cast<std::size_t>(std::count_if(folds.assignment.begin(), folds.assignment.end(),
                                                                  [&](const auto& kv) { return kv.second == f; })) ==
              tiles.size());
    }
}

TEST_CASE("leave-one-out mean predictor has the closed-form predictions") {
    const auto tiles = grid_tiles(4, [](int r, int c) { return static_cast<double>(r * r + c); });
    geo::FoldSpec loo;
    loo.n_folds = static_cast<int>(tiles.size());
    for (std::size_t i = 0; i < tiles.size(); ++i) loo.assignment[tiles[i].tile_id] = static_cast<int>(i);
    double total = 0;
    for (const auto& t : tiles) total += *t.population;
    const double n = static_cast<double>(tiles.size());

    const auto res = evalx::crossvalidate([](int) { return std::make_unique<evalx::NullPipeline>(); }, tiles, {}, loo);
    for (const auto& e : res.predictions.entries) CHECK(e.y_hat == doctest::Approx((total - e.y) / (n - 1)));
    // Leave-one-out mean predictions are an affine map of y with slope -1/(n-1); R2 follows in closed form.
    const double slope = n / (n - 1);
    CHECK(res.metrics.r2 == doctest::Approx(1.0 - slope * slope));
}

TEST_CASE("leakage guard") {
    auto tiles = grid_tiles(4, [](int r, int c) { return static_cast<double>(r + c); });
    const auto folds = geo::make_spatial_folds(tiles, 2);
    auto factory = [](int) { return std::make_unique<evalx::NullPipeline>(); };

    SUBCASE("a duplicated tile id is leakage") {
        auto dup = tiles;
        dup.push_back(tiles.front());
        CHECK_THROWS_AS(evalx::crossvalidate(factory, dup, {}, folds), LeakageError);
    }
    SUBCASE("a fold file naming a tile twice is rejected on load") {
        auto text = geo::format_folds(folds);
        const auto close = text.rfind('}');
        text.insert(close, ", \"" + tiles.front().tile_id + "\": 1");
        CHECK_THROWS_AS(geo::parse_folds(text), LeakageError);
    }
    SUBCASE("an out-of-range fold index is leakage") {
        auto bad = folds;
        bad.assignment.begin()->second = 7;
        CHECK_THROWS_AS(evalx::crossvalidate(factory, tiles, {}, bad), LeakageError);
    }
    SUBCASE("an unassigned labelled tile is an error") {
        auto bad = folds;
        bad.assignment.erase(bad.assignment.begin());
        CHECK_THROWS_AS(evalx::crossvalidate(factory, tiles, {}, bad), Error);
    }
    SUBCASE("unlabelled tiles are ignored") {
        tiles[0].population.reset();
        tiles[0].status = geo::TileStatus::unlabelled;
        const auto res = evalx::crossvalidate(factory, tiles, {}, folds);
        CHECK(res.predictions.entries.size() == tiles.size() - 1);
    }
}

TEST_CASE("feature forest pipeline learns an informative covariate") {
    const auto tiles = grid_tiles(10, [](int r, int c) { return static_cast<double>((r * 7 + c * 3) % 13) * 4.0; });
    rf::FeatureTable table;
    table.feature_names = {"signal", "noise"};
    table.source = "public";
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g(0, 1);
    for (const auto& t : tiles) table.rows[t.tile_id] = {*t.population / 4.0 + 0.1 * g(rng), g(rng)};
    const auto folds = geo::make_spatial_folds(tiles, 4);

    const auto rf_res = evalx::crossvalidate(
        [&](int) {
            return std::make_unique<evalx::FeatureForestPipeline>(table, evalx::ForestOptions{rf::RFConfig{100, 2, 1, 3}});
        },
        tiles, {}, folds);
    const auto null_res = evalx::crossvalidate([](int) { return std::make_unique<evalx::NullPipeline>(); }, tiles, {}, folds);
    CHECK(rf_res.metrics.r2 > 0.9);
    CHECK(rf_res.metrics.meae < 0.5 * null_res.metrics.meae);
}
