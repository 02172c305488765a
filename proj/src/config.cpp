#include "popgrid/config.hpp"

#include "popgrid/common.hpp"
#include "popgrid/geogrid_io.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <set>

namespace popgrid::config {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(CvPipeline p) {
    switch (p) {
        case CvPipeline::encoder_forest: return "encoder-forest";
        case CvPipeline::feature_forest: return "feature-forest";
        case CvPipeline::null: return "null-model";
    }
    return "?";
}

namespace {

CvPipeline parse_cv_pipeline(std::string_view s) {
    for (auto p : {CvPipeline::encoder_forest, CvPipeline::feature_forest, CvPipeline::null}) {
        if (s == to_string(p)) return p;
    }
    throw Error("unknown pipeline '" + std::string(s) + "' (encoder-forest | feature-forest | null-model)");
}

std::string_view to_string(pretext::Method m) { return m == pretext::Method::barlow_twins ? "barlow-twins" : "deepcluster"; }

pretext::Method parse_method(std::string_view s) {
    if (s == "barlow-twins") return pretext::Method::barlow_twins;
    if (s == "deepcluster") return pretext::Method::deepcluster;
    throw Error("unknown pretext method '" + std::string(s) + "' (barlow-twins | deepcluster)");
}

// ---- YAML <-> JSON -------------------------------------------------------------------------

json scalar_to_json(const YAML::Node& n) {
    const auto& s = n.Scalar();
    if (n.Tag() == "!") return s;  // quoted: always a string
    if (s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL") return nullptr;
    if (s == "true" || s == "True" || s == "TRUE") return true;
    if (s == "false" || s == "False" || s == "FALSE") return false;
    {
        std::int64_t i = 0;
        const auto r = std::from_chars(s.data(), s.data() + s.size(), i);
        if (r.ec == std::errc() && r.ptr == s.data() + s.size()) return i >= 0 ? json(static_cast<std::uint64_t>(i)) : json(i);
    }
    {
        double d = 0;
        const auto r = std::from_chars(s.data(), s.data() + s.size(), d);
        if (r.ec == std::errc() && r.ptr == s.data() + s.size()) return d;
    }
    return s;
}

json yaml_to_json(const YAML::Node& n) {
    switch (n.Type()) {
        case YAML::NodeType::Null:
        case YAML::NodeType::Undefined: return nullptr;
        case YAML::NodeType::Scalar: return scalar_to_json(n);
        case YAML::NodeType::Sequence: {
            json a = json::array();
            for (const auto& e : n) a.push_back(yaml_to_json(e));
            return a;
        }
        case YAML::NodeType::Map: {
            json o = json::object();
            for (const auto& kv : n) {
                const auto key = kv.first.as<std::string>();
                if (o.contains(key)) throw ConfigError("duplicate key '" + key + "'");
                o[key] = yaml_to_json(kv.second);
            }
            return o;
        }
    }
    return nullptr;
}

void emit(YAML::Emitter& out, const json& j) {
    if (j.is_object()) {
        out << YAML::BeginMap;
        for (const auto& [k, v] : j.items()) {
            out << YAML::Key << k << YAML::Value;
            emit(out, v);
        }
        out << YAML::EndMap;
    } else if (j.is_array()) {
        out << YAML::Flow << YAML::BeginSeq;
        for (const auto& v : j) emit(out, v);
        out << YAML::EndSeq;
    } else if (j.is_string()) {
        out << YAML::DoubleQuoted << j.get<std::string>();
    } else if (j.is_null()) {
        out << YAML::Null;
    } else if (j.is_boolean()) {
        out << j.get<bool>();
    } else if (j.is_number_unsigned()) {
        out << j.get<std::uint64_t>();
    } else if (j.is_number_integer()) {
        out << j.get<std::int64_t>();
    } else {
        out << YAML::Precision(17) << j.get<double>();
    }
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

void apply_override(json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key.path=value");
    const auto key = assignment.substr(0, eq);
    json value;
    try {
        value = yaml_to_json(YAML::Load(assignment.substr(eq + 1)));
    } catch (const YAML::Exception& e) {
        throw ConfigError("override '" + assignment + "': " + e.what());
    }
    json* node = &root;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key component");
        if (node->is_null()) *node = json::object();
        if (!node->is_object()) throw ConfigError("override '" + assignment + "': '" + part + "' is not inside a mapping");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

/// Reads the keys of one mapping, remembering which ones were consumed; anything left over is
/// reported as unknown with the closest known key as a hint.
class Section {
public:
    Section(const json& j, std::string path, const fs::path& base) : path_(std::move(path)), base_(base) {
        if (j.is_null()) {
            j_ = &empty_;
        } else if (!j.is_object()) {
            throw ConfigError("'" + where() + "' must be a mapping");
        } else {
            j_ = &j;
        }
    }

    std::string where(const std::string& key = {}) const {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    const json* find(const std::string& key) {
        known_.insert(key);
        const auto it = j_->find(key);
        return it == j_->end() || it->is_null() ? nullptr : &*it;
    }

    template <class T, class Fn>
    void read(const std::string& key, T& out, Fn&& convert) {
        if (const auto* v = find(key)) {
            try {
                out = convert(*v);
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception& e) {
                throw ConfigError("'" + where(key) + "': " + e.what());
            }
        }
    }

    void integer(const std::string& key, int& out) {
        read(key, out, [](const json& v) {
            if (!v.is_number_integer()) throw Error("expected an integer");
            return v.get<int>();
        });
    }
    void seed(const std::string& key, std::uint64_t& out) {
        read(key, out, [](const json& v) {
            if (!v.is_number_unsigned()) throw Error("expected a non-negative integer");
            return v.get<std::uint64_t>();
        });
    }
    void number(const std::string& key, double& out) {
        read(key, out, [](const json& v) {
            if (!v.is_number()) throw Error("expected a number");
            return v.get<double>();
        });
    }
    void boolean(const std::string& key, bool& out) {
        read(key, out, [](const json& v) {
            if (!v.is_boolean()) throw Error("expected true or false");
            return v.get<bool>();
        });
    }
    void text(const std::string& key, std::string& out) {
        read(key, out, [](const json& v) {
            if (!v.is_string()) throw Error("expected a string");
            return v.get<std::string>();
        });
    }
    void path(const std::string& key, fs::path& out) {
        std::string s;
        text(key, s);
        if (!s.empty()) out = fs::path(s).is_absolute() || base_.empty() ? fs::path(s) : base_ / s;
    }
    void raw(const std::string& key, json& out) {
        if (const auto* v = find(key)) out = *v;
    }

    Section sub(const std::string& key) {
        const auto* v = find(key);
        return Section(v ? *v : empty_, where(key), base_);
    }

    void finish() const {
        for (const auto& [k, v] : j_->items()) {
            if (known_.contains(k)) continue;
            std::string hint;
            std::size_t best = 3;
            for (const auto& cand : known_) {
                const auto d = edit_distance(k, cand);
                if (d < best) {
                    best = d;
                    hint = cand;
                }
            }
            throw ConfigError("unknown key '" + where(k) + "'" + (hint.empty() ? "" : " (did you mean '" + hint + "'?)"));
        }
    }

private:
    inline static const json empty_ = json::object();
    const json* j_ = nullptr;
    std::string path_;
    fs::path base_;
    std::set<std::string> known_;
};

RunConfig from_json(const json& root, const fs::path& base) {
    RunConfig cfg;
    Section top(root, "", base);
    top.seed("seed", cfg.seed);

    // Seeds not set explicitly follow the top-level seed.
    cfg.finetune.seed = cfg.pretext.seed = cfg.forest.fixed.seed = cfg.explain.tsne.seed = cfg.seed;
    cfg.synth.seed = cfg.seed;

    {
        auto s = top.sub("paths");
        auto& p = cfg.paths;
        s.path("imagery", p.imagery);
        s.path("microcensus", p.microcensus);
        s.path("decisions", p.decisions);
        s.path("tiles", p.tiles);
        s.path("folds", p.folds);
        s.path("chips", p.chips);
        s.path("encoder", p.encoder);
        s.path("features", p.features);
        s.path("model", p.model);
        s.path("output", p.output);
        s.path("reference", p.reference);
        s.path("census", p.census);
        s.path("state_dir", p.state_dir);
        s.finish();
    }
    if (const auto* g = top.find("grid")) {
        Section s(*g, "grid", base);
        geo::GridDef grid;
        s.number("origin_x", grid.origin_x);
        s.number("origin_y", grid.origin_y);
        s.number("cell_size", grid.cell_size);
        s.integer("n_rows", grid.n_rows);
        s.integer("n_cols", grid.n_cols);
        s.text("crs", grid.crs_code);
        s.text("district_id", grid.district_id);
        s.finish();
        try {
            grid.crs_code = geo::normalize_crs(grid.crs_code);
            grid.validate();
        } catch (const Error& e) {
            throw ConfigError(std::string("'grid': ") + e.what());
        }
        cfg.grid = grid;
    }
    {
        auto s = top.sub("encoder");
        s.raw("architecture", cfg.encoder.architecture);
        s.read("pretraining", cfg.encoder.pretraining, [](const json& v) { return enc::parse_pretraining(v.get<std::string>()); });
        s.finish();
        try {
            enc::resolve_architecture(cfg.encoder.architecture);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("'encoder.architecture': ") + e.what());
        }
    }
    {
        auto s = top.sub("finetune");
        auto& f = cfg.finetune;
        s.integer("head_epochs", f.head_epochs);
        s.number("head_lr", f.head_lr);
        s.number("base_lr_top", f.base_lr_top);
        s.number("base_lr_bottom", f.base_lr_bottom);
        s.integer("batch_size", f.batch_size);
        s.integer("patience", f.patience);
        s.number("train_fraction", f.train_fraction);
        s.integer("max_epochs", f.max_epochs);
        s.boolean("augment", f.augment);
        s.seed("seed", f.seed);
        s.finish();
    }
    {
        auto s = top.sub("pretext");
        auto& p = cfg.pretext;
        s.read("method", p.method, [](const json& v) { return parse_method(v.get<std::string>()); });
        s.integer("epochs", p.epochs);
        s.seed("seed", p.seed);
        {
            auto b = s.sub("barlow");
            b.number("lambda", p.barlow.lambda_offdiag);
            b.integer("embed_dim", p.barlow.embed_dim);
            b.integer("batch_size", p.barlow.batch_size);
            b.number("learning_rate", p.barlow.learning_rate);
            b.read("augmentations", p.barlow.view_augmentations, [](const json& v) {
                if (!v.is_array()) throw Error("expected a list of {kind, probability}");
                std::vector<pretext::ViewAugmentation> out;
                for (const auto& e : v) {
                    if (e.is_string()) {
                        const auto kind = pretext::parse_augmentation(e.get<std::string>());
                        out.push_back({kind, pretext::default_probability(kind)});
                        continue;
                    }
                    if (!e.is_object() || !e.contains("kind")) throw Error("each augmentation needs a 'kind'");
                    for (const auto& [k, _] : e.items()) {
                        if (k != "kind" && k != "probability") throw Error("unknown augmentation key '" + k + "'");
                    }
                    const auto kind = pretext::parse_augmentation(e["kind"].get<std::string>());
                    out.push_back({kind, e.value("probability", pretext::default_probability(kind))});
                }
                return out;
            });
            b.finish();
        }
        {
            auto d = s.sub("deepcluster");
            d.integer("k", p.deepcluster.k);
            d.integer("batch_size", p.deepcluster.batch_size);
            d.number("learning_rate", p.deepcluster.learning_rate);
            d.integer("kmeans_max_iter", p.deepcluster.kmeans_max_iter);
            d.finish();
        }
        s.finish();
    }
    {
        auto s = top.sub("forest");
        s.boolean("grid_search", cfg.forest.grid_search);
        s.integer("num_estimators", cfg.forest.fixed.num_estimators);
        s.integer("min_samples_split", cfg.forest.fixed.min_samples_split);
        s.integer("min_samples_leaf", cfg.forest.fixed.min_samples_leaf);
        s.integer("inner_folds", cfg.forest.inner_folds);
        s.seed("seed", cfg.forest.fixed.seed);
        s.finish();
    }
    {
        auto s = top.sub("cv");
        s.integer("n_folds", cfg.cv.n_folds);
        s.read("pipeline", cfg.cv.pipeline, [](const json& v) { return parse_cv_pipeline(v.get<std::string>()); });
        s.boolean("finetune", cfg.cv.finetune);
        s.finish();
    }
    {
        auto s = top.sub("map");
        s.integer("rows_per_block", cfg.map.rows_per_block);
        s.boolean("uncertainty", cfg.map.uncertainty);
        s.finish();
    }
    {
        auto s = top.sub("uncertainty");
        s.integer("mc_passes", cfg.uncertainty.mc_passes);
        s.number("dropout", cfg.uncertainty.dropout);
        s.finish();
    }
    {
        auto s = top.sub("explain");
        s.read("tiles", cfg.explain.tiles, [](const json& v) { return v.get<std::vector<std::string>>(); });
        s.integer("max_tiles", cfg.explain.max_tiles);
        auto t = s.sub("tsne");
        t.number("perplexity", cfg.explain.tsne.perplexity);
        t.integer("iterations", cfg.explain.tsne.iterations);
        t.number("learning_rate", cfg.explain.tsne.learning_rate);
        t.number("early_exaggeration", cfg.explain.tsne.early_exaggeration);
        t.integer("exaggeration_iterations", cfg.explain.tsne.exaggeration_iterations);
        t.seed("seed", cfg.explain.tsne.seed);
        t.finish();
        s.finish();
    }
    {
        auto s = top.sub("synth");
        auto& y = cfg.synth;
        s.integer("n_rows", y.n_rows);
        s.integer("n_cols", y.n_cols);
        s.integer("max_blobs", y.max_blobs);
        s.number("label_noise_sd", y.label_noise_sd);
        s.seed("seed", y.seed);
        s.number("origin_x", y.origin_x);
        s.number("origin_y", y.origin_y);
        s.text("district_id", y.district_id);
        s.text("crs", y.crs_code);
        s.finish();
    }
    {
        auto s = top.sub("serve");
        s.text("host", cfg.serve.host);
        s.integer("port", cfg.serve.port);
        s.finish();
    }
    top.finish();

    auto check = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what);
    };
    try {
        cfg.finetune.validate();
        cfg.forest.fixed.validate();
        cfg.pretext.barlow.validate();
        cfg.pretext.deepcluster.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    check(cfg.pretext.epochs >= 1, "'pretext.epochs' must be >= 1");
    check(cfg.forest.inner_folds >= 2, "'forest.inner_folds' must be >= 2");
    check(cfg.cv.n_folds >= 2, "'cv.n_folds' must be >= 2");
    check(cfg.map.rows_per_block >= 1, "'map.rows_per_block' must be >= 1");
    check(cfg.uncertainty.mc_passes >= 2, "'uncertainty.mc_passes' must be >= 2");
    check(cfg.uncertainty.dropout >= 0 && cfg.uncertainty.dropout < 1, "'uncertainty.dropout' must be in [0, 1)");
    check(cfg.explain.max_tiles >= 0, "'explain.max_tiles' must be >= 0");
    check(cfg.synth.n_rows >= 1 && cfg.synth.n_cols >= 1, "'synth' grid must have at least one cell");
    check(cfg.synth.max_blobs >= 0 && cfg.synth.max_blobs <= 15, "'synth.max_blobs' must be in [0, 15]");
    check(cfg.serve.port >= 0 && cfg.serve.port <= 65535, "'serve.port' must be in [0, 65535]");
    return cfg;
}

json pretext_json(const pretext::PretextConfig& p) {
    json augs = json::array();
    for (const auto& a : p.barlow.view_augmentations) augs.push_back({{"kind", pretext::to_string(a.kind)}, {"probability", a.probability}});
    return {{"method", to_string(p.method)},
            {"epochs", p.epochs},
            {"seed", p.seed},
            {"barlow",
             {{"lambda", p.barlow.lambda_offdiag},
              {"embed_dim", p.barlow.embed_dim},
              {"batch_size", p.barlow.batch_size},
              {"learning_rate", p.barlow.learning_rate},
              {"augmentations", augs}}},
            {"deepcluster",
             {{"k", p.deepcluster.k},
              {"batch_size", p.deepcluster.batch_size},
              {"learning_rate", p.deepcluster.learning_rate},
              {"kmeans_max_iter", p.deepcluster.kmeans_max_iter}}}};
}

json paths_json(const Paths& p, const fs::path& base) {
    auto rel = [&](const fs::path& x) -> json {
        if (x.empty()) return nullptr;
        if (base.empty()) return x.string();
        const auto r = x.lexically_relative(base);
        return r.empty() || r.string().starts_with("..") ? x.string() : r.string();
    };
    return {{"imagery", rel(p.imagery)},     {"microcensus", rel(p.microcensus)}, {"decisions", rel(p.decisions)},
            {"tiles", rel(p.tiles)},         {"folds", rel(p.folds)},             {"chips", rel(p.chips)},
            {"encoder", rel(p.encoder)},     {"features", rel(p.features)},       {"model", rel(p.model)},
            {"output", rel(p.output)},       {"reference", rel(p.reference)},     {"census", rel(p.census)},
            {"state_dir", rel(p.state_dir)}};
}

json to_json_impl(const RunConfig& c, const fs::path& base) {
    json j;
    j["seed"] = c.seed;
    j["paths"] = paths_json(c.paths, base);
    if (c.grid) {
        j["grid"] = {{"origin_x", c.grid->origin_x}, {"origin_y", c.grid->origin_y}, {"cell_size", c.grid->cell_size},
                     {"n_rows", c.grid->n_rows},     {"n_cols", c.grid->n_cols},     {"crs", c.grid->crs_code},
                     {"district_id", c.grid->district_id}};
    }
    j["encoder"] = {{"architecture", c.encoder.architecture}, {"pretraining", enc::to_string(c.encoder.pretraining)}};
    const auto& f = c.finetune;
    j["finetune"] = {{"head_epochs", f.head_epochs}, {"head_lr", f.head_lr},         {"base_lr_top", f.base_lr_top},
                     {"base_lr_bottom", f.base_lr_bottom}, {"batch_size", f.batch_size}, {"patience", f.patience},
                     {"train_fraction", f.train_fraction}, {"max_epochs", f.max_epochs}, {"augment", f.augment},
                     {"seed", f.seed}};
    j["pretext"] = pretext_json(c.pretext);
    j["forest"] = {{"grid_search", c.forest.grid_search},
                   {"num_estimators", c.forest.fixed.num_estimators},
                   {"min_samples_split", c.forest.fixed.min_samples_split},
                   {"min_samples_leaf", c.forest.fixed.min_samples_leaf},
                   {"inner_folds", c.forest.inner_folds},
                   {"seed", c.forest.fixed.seed}};
    j["cv"] = {{"n_folds", c.cv.n_folds}, {"pipeline", to_string(c.cv.pipeline)}, {"finetune", c.cv.finetune}};
    j["map"] = {{"rows_per_block", c.map.rows_per_block}, {"uncertainty", c.map.uncertainty}};
    j["uncertainty"] = {{"mc_passes", c.uncertainty.mc_passes}, {"dropout", c.uncertainty.dropout}};
    const auto& t = c.explain.tsne;
    j["explain"] = {{"tiles", c.explain.tiles},
                    {"max_tiles", c.explain.max_tiles},
                    {"tsne",
                     {{"perplexity", t.perplexity},
                      {"iterations", t.iterations},
                      {"learning_rate", t.learning_rate},
                      {"early_exaggeration", t.early_exaggeration},
                      {"exaggeration_iterations", t.exaggeration_iterations},
                      {"seed", t.seed}}}};
    const auto& y = c.synth;
    j["synth"] = {{"n_rows", y.n_rows},       {"n_cols", y.n_cols},     {"max_blobs", y.max_blobs},
                  {"label_noise_sd", y.label_noise_sd}, {"seed", y.seed}, {"origin_x", y.origin_x},
                  {"origin_y", y.origin_y},   {"district_id", y.district_id}, {"crs", y.crs_code}};
    j["serve"] = {{"host", c.serve.host}, {"port", c.serve.port}};
    return j;
}

}  // namespace

json RunConfig::to_json() const { return to_json_impl(*this, {}); }

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()); }

RunConfig parse_config(std::string_view yaml_text, const fs::path& base_dir, std::span<const std::string> overrides) {
    json root;
    try {
        root = yaml_to_json(YAML::Load(std::string(yaml_text)));
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    if (root.is_null()) root = json::object();
    if (!root.is_object()) throw ConfigError("config must be a mapping at the top level");
    for (const auto& o : overrides) apply_override(root, o);
    return from_json(root, base_dir);
}

RunConfig load_config(const fs::path& path, std::span<const std::string> overrides) {
    if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
    return parse_config(read_text_file(path), fs::absolute(path).parent_path(), overrides);
}

RunConfig default_config(std::span<const std::string> overrides, const fs::path& base_dir) {
    return parse_config("{}", base_dir, overrides);
}

std::string format_config(const RunConfig& cfg, const fs::path& base_dir) {
    YAML::Emitter out;
    emit(out, to_json_impl(cfg, base_dir));
    return std::string(out.c_str()) + "\n";
}

}  // namespace popgrid::config
