#include "popgrid/regress.hpp"

#include "popgrid/common.hpp"
#include "popgrid/csv.hpp"
#include "popgrid/stats.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <set>

namespace popgrid::rf {

void RFConfig::validate() const {
    if (num_estimators < 1) throw Error("num_estimators must be >= 1");
    if (min_samples_split < 2) throw Error("min_samples_split must be >= 2");
    if (min_samples_leaf < 1) throw Error("min_samples_leaf must be >= 1");
}

void FeatureTable::validate() const {
    std::set<std::string> names(feature_names.begin(), feature_names.end());
    if (names.size() != feature_names.size()) throw Error("feature table has duplicate feature names");
    for (const auto& [id, row] : rows) {
        if (row.size() != feature_names.size()) {
            throw Error("feature row '" + id + "' has " + std::to_string(row.size()) + " values, expected " +
                        std::to_string(feature_names.size()));
        }
        for (double v : row) {
            if (!std::isfinite(v)) throw Error("feature row '" + id + "' has a non-finite value");
        }
    }
}

FeatureTable table_from_representations(std::span<const enc::Representation> reps) {
    FeatureTable t;
    if (reps.empty()) return t;
    const auto dim = reps.front().vector.size();
    for (std::size_t i = 0; i < dim; ++i) t.feature_names.push_back("f" + std::to_string(i));
    for (const auto& r : reps) {
        if (!t.rows.emplace(r.tile_id, r.vector).second) throw Error("duplicate representation for '" + r.tile_id + "'");
    }
    t.validate();
    return t;
}

FeatureTable parse_feature_table(std::string_view text, std::string source) {
    const auto table = csv::parse(text);
    if (table.header.empty() || table.header.front() != "tile_id") {
        throw Error("feature table must start with a tile_id column");
    }
    FeatureTable t;
    t.source = std::move(source);
    t.feature_names.assign(table.header.begin() + 1, table.header.end());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        std::vector<double> values;
        for (std::size_t c = 1; c < row.size(); ++c) {
            values.push_back(csv::parse_double(row[c], "feature table row " + std::to_string(r + 2)));
        }
        if (!t.rows.emplace(row.front(), std::move(values)).second) {
            throw Error("feature table lists tile '" + row.front() + "' twice");
        }
    }
    t.validate();
    return t;
}

FeatureTable load_feature_table(const std::filesystem::path& path, std::string source) {
    return parse_feature_table(read_text_file(path), std::move(source));
}

std::string format_feature_table(const FeatureTable& table) {
    std::vector<std::string> header{"tile_id"};
    header.insert(header.end(), table.feature_names.begin(), table.feature_names.end());
    std::string out = csv::join_row(header) + "\n";
    for (const auto& [id, row] : table.rows) {
        std::vector<std::string> fields{id};
        for (double v : row) fields.push_back(csv::format_double(v));
        out += csv::join_row(fields) + "\n";
    }
    return out;
}

double Tree::predict(std::span<const double> x) const {
    int n = 0;
    while (nodes[n].feature >= 0) n = x[nodes[n].feature] <= nodes[n].threshold ? nodes[n].left : nodes[n].right;
    return nodes[n].value;
}

namespace {

struct Split {
    int feature = -1;
    double threshold = 0;
    double gain = 0;
    std::size_t n_left = 0;
};

class TreeBuilder {
public:
    TreeBuilder(const std::vector<std::vector<double>>& X, std::span<const double> y, const RFConfig& cfg,
                std::vector<double>& importance)
        : X_(X), y_(y), cfg_(cfg), importance_(importance) {}

    Tree build(std::vector<std::size_t> sample) {
        Tree tree;
        struct Pending {
            int node;
            std::vector<std::size_t> idx;
        };
        tree.nodes.emplace_back();
        std::vector<Pending> stack;
        stack.push_back({0, std::move(sample)});
        while (!stack.empty()) {
            Pending cur = std::move(stack.back());
            stack.pop_back();
            double sum = 0;
            for (auto i : cur.idx) sum += y_[i];
            tree.nodes[cur.node].value = sum / static_cast<double>(cur.idx.size());
            const auto split = best_split(cur.idx);
            if (split.feature < 0) continue;

            importance_[split.feature] += split.gain;
            std::vector<std::size_t> left, right;
            for (auto i : cur.idx) (X_[i][split.feature] <= split.threshold ? left : right).push_back(i);
            const int l = static_cast<int>(tree.nodes.size());
            tree.nodes.emplace_back();
            tree.nodes.emplace_back();
            auto& node = tree.nodes[cur.node];
            node.feature = split.feature;
            node.threshold = split.threshold;
            node.left = l;
            node.right = l + 1;
            stack.push_back({l + 1, std::move(right)});
            stack.push_back({l, std::move(left)});
        }
        return tree;
    }

private:
    Split best_split(const std::vector<std::size_t>& idx) {
        Split best;
        const std::size_t n = idx.size();
        const auto leaf = static_cast<std::size_t>(cfg_.min_samples_leaf);
        if (n < static_cast<std::size_t>(cfg_.min_samples_split) || n < 2 * leaf) return best;
        const auto [mn, mx] = std::minmax_element(idx.begin(), idx.end(), [&](auto a, auto b) { return y_[a] < y_[b]; });
        if (y_[*mn] == y_[*mx]) return best;  // pure node

        double total = 0, total_sq = 0;
        for (auto i : idx) {
            total += y_[i];
            total_sq += y_[i] * y_[i];
        }
        const double parent_sse = total_sq - total * total / static_cast<double>(n);
        const double min_gain = 1e-12 * std::max(1.0, parent_sse);

        order_ = idx;
        const std::size_t d = X_.front().size();
        for (std::size_t f = 0; f < d; ++f) {
            std::sort(order_.begin(), order_.end(), [&](auto a, auto b) { return X_[a][f] < X_[b][f]; });
            if (X_[order_.front()][f] == X_[order_.back()][f]) continue;
            double ls = 0, lsq = 0;
            for (std::size_t k = 0; k + 1 < n; ++k) {
                const double v = y_[order_[k]];
                ls += v;
                lsq += v * v;
                const std::size_t nl = k + 1, nr = n - nl;
                if (nl < leaf) continue;
                if (nr < leaf) break;
                const double a = X_[order_[k]][f], b = X_[order_[k + 1]][f];
                if (a == b) continue;
                const double rs = total - ls, rsq = total_sq - lsq;
                const double sse = (lsq - ls * ls / static_cast<double>(nl)) + (rsq - rs * rs / static_cast<double>(nr));
                const double gain = parent_sse - sse;
                if (gain > best.gain + min_gain || (best.feature < 0 && gain > min_gain)) {
                    double t = a + (b - a) / 2.0;
                    if (!(t >= a && t < b)) t = a;
                    best = {static_cast<int>(f), t, gain, nl};
                }
            }
        }
        return best;
    }

    const std::vector<std::vector<double>>& X_;
    std::span<const double> y_;
    const RFConfig& cfg_;
    std::vector<double>& importance_;
    std::vector<std::size_t> order_;
};

}  // namespace

void Forest::fit(const std::vector<std::vector<double>>& X, std::span<const double> y, const RFConfig& cfg) {
    cfg.validate();
    if (X.size() != y.size()) throw Error("forest: feature and label counts differ");
    if (X.size() < 2) throw Error("forest: need at least 2 samples");
    n_features_ = X.front().size();
    for (const auto& row : X) {
        if (row.size() != n_features_) throw Error("forest: ragged feature matrix");
    }
    trees_.clear();
    trees_.reserve(cfg.num_estimators);
    importances_.assign(n_features_, 0.0);
    const std::size_t n = X.size();
    for (int t = 0; t < cfg.num_estimators; ++t) {
        std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(t)));
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        std::vector<std::size_t> sample(n);
        for (auto& s : sample) s = pick(rng);
        std::vector<double> imp(n_features_, 0.0);
        TreeBuilder builder(X, y, cfg, imp);
        trees_.push_back(builder.build(std::move(sample)));
        const double total = std::accumulate(imp.begin(), imp.end(), 0.0);
        if (total > 0) {
            for (std::size_t f = 0; f < n_features_; ++f) importances_[f] += imp[f] / total;
        }
    }
    const double total = std::accumulate(importances_.begin(), importances_.end(), 0.0);
    if (total > 0) {
        for (auto& v : importances_) v /= total;
    }
}

std::vector<double> Forest::tree_predictions(std::span<const double> x) const {
    if (x.size() != n_features_) {
        throw Error("forest expects " + std::to_string(n_features_) + " features, got " + std::to_string(x.size()));
    }
    std::vector<double> out;
    out.reserve(trees_.size());
    for (const auto& t : trees_) out.push_back(t.predict(x));
    return out;
}

double Forest::predict(std::span<const double> x) const {
    const auto p = tree_predictions(x);
    return stats::mean(p);
}

void Forest::truncate(std::size_t k) {
    if (k < trees_.size()) trees_.resize(k);
}

namespace {

constexpr char kForestMagic[4] = {'P', 'G', 'R', 'F'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.insert(out.end(), b, b + sizeof(T));
}

template <class T>
T take(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    if (pos + sizeof(T) > bytes.size()) throw Error("forest file truncated");
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> Forest::serialize() const {
    std::vector<std::uint8_t> out(kForestMagic, kForestMagic + 4);
    put<std::uint32_t>(out, 1);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(trees_.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(n_features_));
    for (double v : importances_) put(out, v);
    for (const auto& t : trees_) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.nodes.size()));
        for (const auto& n : t.nodes) {
            put<std::int32_t>(out, n.feature);
            put(out, n.threshold);
            put<std::int32_t>(out, n.left);
            put<std::int32_t>(out, n.right);
            put(out, n.value);
        }
    }
    return out;
}

Forest Forest::deserialize(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kForestMagic, 4) != 0) throw Error("not a forest file");
    pos = 4;
    if (take<std::uint32_t>(bytes, pos) != 1) throw Error("unsupported forest file version");
    Forest f;
    const auto n_trees = take<std::uint32_t>(bytes, pos);
    f.n_features_ = take<std::uint32_t>(bytes, pos);
    f.importances_.resize(f.n_features_);
    for (auto& v : f.importances_) v = take<double>(bytes, pos);
    for (std::uint32_t t = 0; t < n_trees; ++t) {
        Tree tree;
        const auto n_nodes = take<std::uint32_t>(bytes, pos);
        if (n_nodes == 0) throw Error("forest file: empty tree");
        tree.nodes.resize(n_nodes);
        for (auto& n : tree.nodes) {
            n.feature = take<std::int32_t>(bytes, pos);
            n.threshold = take<double>(bytes, pos);
            n.left = take<std::int32_t>(bytes, pos);
            n.right = take<std::int32_t>(bytes, pos);
            n.value = take<double>(bytes, pos);
            const bool leaf = n.feature < 0;
            if (!leaf && (n.feature >= static_cast<int>(f.n_features_) || n.left <= 0 || n.right <= 0 ||
                          n.left >= static_cast<int>(n_nodes) || n.right >= static_cast<int>(n_nodes))) {
                throw Error("forest file: malformed node");
            }
        }
        f.trees_.push_back(std::move(tree));
    }
    if (pos != bytes.size()) throw Error("forest file has trailing bytes");
    return f;
}

namespace {

struct Matrix {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> X;
    std::vector<double> y;
};

Matrix labelled_rows(const FeatureTable& table, const Labels& labels) {
    std::vector<std::string> missing;
    Matrix m;
    for (const auto& [id, y] : labels) {
        const auto it = table.rows.find(id);
        if (it == table.rows.end()) {
            missing.push_back(id);
            continue;
        }
        if (!std::isfinite(y) || y < 0) throw Error("label for '" + id + "' must be finite and non-negative");
        m.ids.push_back(id);
        m.X.push_back(it->second);
        m.y.push_back(y);
    }
    if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
        if (missing.size() > 20) list += ", ...";
        throw Error(std::to_string(missing.size()) + " labelled tile(s) lack a feature row: " + list);
    }
    return m;
}

std::string training_fingerprint(const Matrix& m, const std::vector<std::string>& names) {
    std::string text = csv::join_row(names) + "\n";
    for (std::size_t i = 0; i < m.ids.size(); ++i) {
        text += m.ids[i] + "," + csv::format_double(m.y[i]);
        for (double v : m.X[i]) text += "," + csv::format_double(v);
        text += "\n";
    }
    return sha256_hex(text);
}

}  // namespace

PopulationModel fit(const FeatureTable& table, const Labels& labels, const RFConfig& cfg) {
    cfg.validate();
    table.validate();
    const auto m = labelled_rows(table, labels);  // ordered by tile_id, independent of input order
    if (m.y.size() < 2) throw Error("random forest needs at least 2 labelled samples");
    PopulationModel model;
    model.kind = ModelKind::random_forest;
    model.rf_config = cfg;
    model.training_mean = stats::mean(m.y);
    model.feature_source = table.source;
    model.feature_names = table.feature_names;
    model.training_fingerprint = training_fingerprint(m, table.feature_names);
    model.forest.fit(m.X, m.y, cfg);
    model.fitted = true;
    return model;
}

PopulationModel fit_null(const Labels& labels) {
    if (labels.empty()) throw Error("null model needs at least one label");
    std::vector<double> y;
    for (const auto& [id, v] : labels) {
        if (!std::isfinite(v) || v < 0) throw Error("label for '" + id + "' must be finite and non-negative");
        y.push_back(v);
    }
    PopulationModel model;
    model.kind = ModelKind::null;
    model.training_mean = stats::mean(y);
    model.feature_source = "none";
    model.fitted = true;
    return model;
}

Prediction predict_one(const PopulationModel& model, std::span<const double> features) {
    if (!model.fitted) throw Error("population model is not fitted");
    if (model.kind == ModelKind::null) return {model.training_mean, 0.0};
    const auto p = model.forest.tree_predictions(features);
    return {std::max(0.0, stats::mean(p)), stats::sample_std(p)};
}

std::map<std::string, Prediction> predict_with_uncertainty(const PopulationModel& model, const FeatureTable& table) {
    if (!model.fitted) throw Error("population model is not fitted");
    if (model.kind == ModelKind::random_forest && table.width() != model.forest.n_features()) {
        throw Error("feature table has " + std::to_string(table.width()) + " columns but the model was trained on " +
                    std::to_string(model.forest.n_features()));
    }
    std::map<std::string, Prediction> out;
    for (const auto& [id, row] : table.rows) out.emplace(id, predict_one(model, row));
    return out;
}

std::map<std::string, std::vector<double>> per_tree_predictions(const PopulationModel& model, const FeatureTable& table) {
    if (!model.fitted || model.kind != ModelKind::random_forest) throw Error("per-tree predictions need a fitted forest");
    std::map<std::string, std::vector<double>> out;
    for (const auto& [id, row] : table.rows) out.emplace(id, model.forest.tree_predictions(row));
    return out;
}

std::vector<RFConfig> default_grid(std::uint64_t seed) {
    std::vector<RFConfig> grid;
    for (int n = 100; n <= 500; n += 100)
        for (int split : {2, 5})
            for (int leaf : {1, 2}) grid.push_back({n, split, leaf, seed});
    return grid;
}

std::string GridSearchResult::to_csv() const {
    std::string out = "num_estimators,min_samples_split,min_samples_leaf,meae,selected\n";
    for (const auto& r : scores) {
        out += csv::join_row({std::to_string(r.config.num_estimators), std::to_string(r.config.min_samples_split),
                              std::to_string(r.config.min_samples_leaf), csv::format_double(r.meae),
                              r.config == best ? "1" : "0"}) +
               "\n";
    }
    return out;
}

GridSearchResult grid_search(const FeatureTable& table, const Labels& labels, const geo::FoldSpec& folds,
                             std::uint64_t seed, std::span<const RFConfig> grid_in) {
    std::vector<RFConfig> grid(grid_in.begin(), grid_in.end());
    if (grid.empty()) grid = default_grid(seed);
    for (const auto& c : grid) c.validate();
    std::sort(grid.begin(), grid.end());
    table.validate();
    const auto m = labelled_rows(table, labels);

    std::vector<int> fold_of(m.ids.size());
    for (std::size_t i = 0; i < m.ids.size(); ++i) fold_of[i] = folds.fold_of(m.ids[i]);

    // Pooled absolute errors per configuration, filled fold by fold. Configurations that share
    // (split, leaf, seed) reuse one forest of the largest size via tree prefixes.
    std::vector<std::vector<double>> errors(grid.size());
    std::map<std::tuple<int, int, std::uint64_t>, std::vector<std::size_t>> families;
    for (std::size_t c = 0; c < grid.size(); ++c) {
        families[{grid[c].min_samples_split, grid[c].min_samples_leaf, grid[c].seed}].push_back(c);
    }
    for (int f = 0; f < folds.n_folds; ++f) {
        std::vector<std::vector<double>> Xtr;
        std::vector<double> ytr;
        std::vector<std::size_t> test;
        for (std::size_t i = 0; i < m.ids.size(); ++i) {
            if (fold_of[i] == f) {
                test.push_back(i);
            } else {
                Xtr.push_back(m.X[i]);
                ytr.push_back(m.y[i]);
            }
        }
        if (test.empty()) continue;
        if (ytr.size() < 2) throw Error("grid search: fold " + std::to_string(f) + " leaves fewer than 2 training tiles");
        for (const auto& [key, members] : families) {
            int max_trees = 0;
            for (auto c : members) max_trees = std::max(max_trees, grid[c].num_estimators);
            Forest forest;
            forest.fit(Xtr, ytr, {max_trees, std::get<0>(key), std::get<1>(key), std::get<2>(key)});
            for (auto i : test) {
                const auto p = forest.tree_predictions(m.X[i]);
                for (auto c : members) {
                    const auto k = static_cast<std::size_t>(grid[c].num_estimators);
                    const double mean = std::accumulate(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(k), 0.0) /
                                        static_cast<double>(k);
                    errors[c].push_back(std::abs(m.y[i] - std::max(0.0, mean)));
                }
            }
        }
    }
    GridSearchResult result;
    for (std::size_t c = 0; c < grid.size(); ++c) {
        if (errors[c].empty()) throw Error("grid search: no validation predictions");
        result.scores.push_back({grid[c], stats::median(errors[c])});
    }
    // Strictly smaller score wins; scores are visited in lexicographic order, so ties keep the smallest config.
    const auto best = std::min_element(result.scores.begin(), result.scores.end(),
                                       [](const ScoreRow& a, const ScoreRow& b) { return a.meae < b.meae; });
    result.best = best->config;
    spdlog::debug("grid search: best {}/{}/{} MeAE {}", result.best.num_estimators, result.best.min_samples_split,
                  result.best.min_samples_leaf, best->meae);
    return result;
}

void save_model(const PopulationModel& model, const std::filesystem::path& dir, const std::string& stem) {
    if (!model.fitted) throw Error("refusing to save an unfitted model");
    nlohmann::json j{{"kind", model.kind == ModelKind::null ? "null" : "random_forest"},
                     {"training_mean", model.training_mean},
                     {"feature_source", model.feature_source},
                     {"feature_names", model.feature_names},
                     {"training_fingerprint", model.training_fingerprint},
                     {"encoder_fingerprint", model.encoder_fingerprint}};
    if (model.kind == ModelKind::random_forest) {
        const auto bytes = model.forest.serialize();
        write_file_atomic(dir / (stem + ".pgrf"), bytes);
        const auto& c = *model.rf_config;
        j["rf_config"] = {{"num_estimators", c.num_estimators},
                          {"min_samples_split", c.min_samples_split},
                          {"min_samples_leaf", c.min_samples_leaf},
                          {"seed", c.seed}};
        j["forest_file"] = stem + ".pgrf";
        j["forest_sha256"] = sha256_hex(bytes);
        j["feature_importances"] = model.forest.importances();
    }
    write_file_atomic(dir / (stem + ".json"), j.dump(2) + "\n");
}

PopulationModel load_model(const std::filesystem::path& json_path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(json_path));
    } catch (const nlohmann::json::exception& e) {
        throw Error("model metadata " + json_path.string() + ": " + e.what());
    }
    PopulationModel model;
    const auto kind = j.at("kind").get<std::string>();
    model.training_mean = j.at("training_mean").get<double>();
    model.feature_source = j.value("feature_source", "");
    model.feature_names = j.value("feature_names", std::vector<std::string>{});
    model.training_fingerprint = j.value("training_fingerprint", "");
    model.encoder_fingerprint = j.value("encoder_fingerprint", "");
    if (kind == "null") {
        model.kind = ModelKind::null;
    } else if (kind == "random_forest") {
        model.kind = ModelKind::random_forest;
        const auto& c = j.at("rf_config");
        model.rf_config = RFConfig{c.at("num_estimators").get<int>(), c.at("min_samples_split").get<int>(),
                                   c.at("min_samples_leaf").get<int>(), c.at("seed").get<std::uint64_t>()};
        const auto bytes = read_binary_file(json_path.parent_path() / j.at("forest_file").get<std::string>());
        if (sha256_hex(bytes) != j.at("forest_sha256").get<std::string>()) {
            throw Error("forest file does not match the checksum in " + json_path.string());
        }
        model.forest = Forest::deserialize(bytes);
        if (model.forest.n_features() != model.feature_names.size()) {
            throw Error("forest feature count does not match feature_names in " + json_path.string());
        }
    } else {
        throw Error("unknown model kind '" + kind + "'");
    }
    model.fitted = true;
    return model;
}

}  // namespace popgrid::rf
