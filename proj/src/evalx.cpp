#include "popgrid/evalx.hpp"

#include "popgrid/common.hpp"
#include "popgrid/csv.hpp"
#include "popgrid/stats.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace popgrid::evalx {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

void PredictionSet::validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.tile_id).second) throw Error("prediction set lists tile '" + e.tile_id + "' twice");
        if (!std::isfinite(e.y) || e.y < 0) throw Error("prediction set: observed value for '" + e.tile_id + "' is invalid");
        if (!std::isfinite(e.y_hat) || e.y_hat < 0) {
            throw Error("prediction set: predicted value for '" + e.tile_id + "' is invalid");
        }
    }
}

std::string PredictionSet::to_csv() const {
    std::string out = "tile_id,y,y_hat,region_key,fold,y_hat_std\n";
    for (const auto& e : entries) {
        out += csv::join_row({e.tile_id, csv::format_double(e.y), csv::format_double(e.y_hat), e.region_key,
                              std::to_string(e.fold), csv::format_double(e.y_hat_std)}) +
               "\n";
    }
    return out;
}

PredictionSet parse_prediction_csv(std::string_view text) {
    const auto t = csv::parse(text);
    const auto c_id = t.column("tile_id"), c_y = t.column("y"), c_hat = t.column("y_hat"), c_region = t.column("region_key");
    const bool has_fold = t.has_column("fold"), has_std = t.has_column("y_hat_std");
    PredictionSet p;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const auto ctx = "prediction row " + std::to_string(r + 2);
        PredictionEntry e{row[c_id], csv::parse_double(row[c_y], ctx), csv::parse_double(row[c_hat], ctx), row[c_region]};
        if (has_fold) e.fold = static_cast<int>(csv::parse_int(row[t.column("fold")], ctx));
        if (has_std) e.y_hat_std = csv::parse_double(row[t.column("y_hat_std")], ctx);
        p.entries.push_back(std::move(e));
    }
    p.validate();
    return p;
}

nlohmann::json MetricsReport::to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"r2", num(r2)},
            {"meape", num(meape)},
            {"meae", num(meae)},
            {"iqr_abs_err", num(iqr_abs_err)},
            {"aggpe", num(aggpe)},
            {"n", n},
            {"excluded_from_meape", excluded_from_meape},
            {"flags",
             {{"r2_undefined", r2_undefined},
              {"meape_undefined", meape_undefined},
              {"aggpe_undefined", aggpe_undefined},
              {"aggpe_excluded_regions", aggpe_excluded_regions}}}};
}

MetricsReport compute_metrics(const PredictionSet& p) {
    p.validate();
    if (p.entries.empty()) throw Error("cannot compute metrics on an empty prediction set");
    MetricsReport m;
    m.n = p.entries.size();

    std::vector<double> y, abs_err, pct_err;
    for (const auto& e : p.entries) {
        y.push_back(e.y);
        abs_err.push_back(std::abs(e.y - e.y_hat));
        if (e.y > 0) {
            pct_err.push_back(std::abs(e.y - e.y_hat) / e.y);
        } else {
            ++m.excluded_from_meape;
        }
    }

    const double y_bar = stats::mean(y);
    double ss_res = 0, ss_tot = 0;
    for (const auto& e : p.entries) {
        ss_res += (e.y - e.y_hat) * (e.y - e.y_hat);
        ss_tot += (e.y - y_bar) * (e.y - y_bar);
    }
    const bool all_same = std::all_of(y.begin(), y.end(), [&](double v) { return v == y.front(); });
    if (m.n < 2 || all_same) {
        m.r2 = kNaN;
        m.r2_undefined = true;
    } else {
        m.r2 = 1.0 - ss_res / ss_tot;
    }

    m.meae = stats::median(abs_err);
    m.iqr_abs_err = stats::quantile(abs_err, 0.75) - stats::quantile(abs_err, 0.25);
    if (pct_err.empty()) {
        m.meape = kNaN;
        m.meape_undefined = true;
    } else {
        m.meape = stats::median(pct_err);
    }

    std::map<std::string, std::pair<double, double>> regions;
    for (const auto& e : p.entries) {
        auto& [sy, sh] = regions[e.region_key];
        sy += e.y;
        sh += e.y_hat;
    }
    std::vector<double> region_err;
    for (const auto& [key, sums] : regions) {
        if (sums.first == 0) {
            m.aggpe_excluded_regions.push_back(key);
            continue;
        }
        region_err.push_back(std::abs(sums.first - sums.second) / sums.first);
    }
    if (region_err.empty()) {
        m.aggpe = kNaN;
        m.aggpe_undefined = true;
    } else {
        m.aggpe = stats::median(region_err);
    }
    return m;
}

CvResult crossvalidate(const PipelineFactory& factory, std::span<const geo::Tile> tiles,
                       std::span<const imagery::Chip> chips, const geo::FoldSpec& folds) {
    if (folds.n_folds < 2) throw Error("cross-validation needs at least 2 folds");
    std::map<std::string, const imagery::Chip*> chip_of;
    for (const auto& c : chips) chip_of.emplace(c.tile_id, &c);

    std::set<std::string> ids;
    std::vector<const geo::Tile*> labelled;
    for (const auto& t : tiles) {
        if (!t.labelled()) continue;
        if (!ids.insert(t.tile_id).second) {
            throw LeakageError("tile '" + t.tile_id + "' appears twice; it could land in training and validation at once");
        }
        labelled.push_back(&t);
    }
    if (labelled.empty()) throw Error("cross-validation: no labelled tiles");
    for (const auto& [id, f] : folds.assignment) {
        if (f < 0 || f >= folds.n_folds) throw LeakageError("fold file assigns '" + id + "' to invalid fold " + std::to_string(f));
    }

    std::vector<int> fold_of;
    for (const auto* t : labelled) {
        const auto it = folds.assignment.find(t->tile_id);
        if (it == folds.assignment.end()) throw Error("labelled tile '" + t->tile_id + "' has no fold");
        fold_of.push_back(it->second);
    }

    CvResult result;
    std::map<std::string, int> covered;
    for (int f = 0; f < folds.n_folds; ++f) {
        std::vector<Sample> train, test;
        std::set<std::string> train_ids;
        for (std::size_t i = 0; i < labelled.size(); ++i) {
            const auto it = chip_of.find(labelled[i]->tile_id);
            const Sample s{labelled[i], it == chip_of.end() ? nullptr : it->second};
            if (fold_of[i] == f) {
                test.push_back(s);
            } else {
                train.push_back(s);
                train_ids.insert(labelled[i]->tile_id);
            }
        }
        if (test.empty()) continue;
        if (train.empty()) throw Error("fold " + std::to_string(f) + " leaves no training data");
        for (const auto& s : test) {
            if (train_ids.count(s.tile->tile_id)) {
                throw LeakageError("fold " + std::to_string(f) + ": tile '" + s.tile->tile_id +
                                   "' is in both training and validation");
            }
        }

        auto pipeline = factory(f);
        spdlog::info("cv fold {}/{}: {} train, {} validation ({})", f + 1, folds.n_folds, train.size(), test.size(),
                     pipeline->describe());
        pipeline->fit(train);
        const auto preds = pipeline->predict(test);
        if (preds.size() != test.size()) throw Error("pipeline returned the wrong number of predictions");
        for (std::size_t i = 0; i < test.size(); ++i) {
            const auto& t = *test[i].tile;
            ++covered[t.tile_id];
            result.predictions.entries.push_back(
                {t.tile_id, *t.population, std::max(0.0, preds[i].mean), t.region_key, f, preds[i].std});
        }
    }
    for (const auto* t : labelled) {
        if (covered[t->tile_id] != 1) throw LeakageError("tile '" + t->tile_id + "' was not predicted exactly once");
    }
    result.metrics = compute_metrics(result.predictions);
    return result;
}

}  // namespace popgrid::evalx
