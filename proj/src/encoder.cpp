#include "popgrid/encoder.hpp"

#include "popgrid/common.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <set>

namespace popgrid::enc {

using nlohmann::json;

std::string_view to_string(Pretraining p) {
    switch (p) {
        case Pretraining::supervised: return "supervised";
        case Pretraining::swav: return "swav";
        case Pretraining::deepcluster: return "deepcluster";
        case Pretraining::barlow_twins: return "barlow_twins";
        case Pretraining::scratch: return "scratch";
    }
    return "scratch";
}

Pretraining parse_pretraining(std::string_view s) {
    for (auto p : {Pretraining::supervised, Pretraining::swav, Pretraining::deepcluster, Pretraining::barlow_twins,
                   Pretraining::scratch}) {
        if (to_string(p) == s) return p;
    }
    throw Error("unknown pretraining tag '" + std::string(s) + "'");
}

namespace {

json conv_spec(const std::string& name, int out, int kernel, int stride, int padding, bool bias) {
    json j{{"type", "conv"}, {"out", out}, {"kernel", kernel}, {"stride", stride}, {"padding", padding}, {"bias", bias}};
    if (!name.empty()) j["name"] = name;
    return j;
}

json resnet_stem() {
    return json::array({conv_spec("conv1", 64, 7, 2, 3, false), json{{"type", "bn"}, {"name", "bn1"}},
                        json{{"type", "relu"}}, json{{"type", "maxpool"}, {"kernel", 3}, {"stride", 2}, {"padding", 1}}});
}

json resnet(const std::string& name, bool bottleneck, std::initializer_list<int> depths) {
    json stages = json::array();
    int s = 0;
    for (int depth : depths) {
        const int width = 64 << s;
        json blocks = json::array();
        for (int b = 0; b < depth; ++b) {
            const int stride = (b == 0 && s > 0) ? 2 : 1;
            const std::string block_name = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
            if (bottleneck) {
                blocks.push_back(json{{"type", "bottleneck"}, {"width", width}, {"stride", stride}, {"expansion", 4},
                                      {"name", block_name}});
            } else {
                blocks.push_back(json{{"type", "basic"}, {"out", width}, {"stride", stride}, {"name", block_name}});
            }
        }
        stages.push_back(blocks);
        ++s;
    }
    return json{{"name", name}, {"in_channels", 3}, {"stem", resnet_stem()}, {"stages", stages}};
}

}  // namespace

json architecture_preset(std::string_view name) {
    if (name == "tiny-cnn") {
        return json{{"name", "tiny-cnn"},
                    {"in_channels", 3},
                    {"stem", json::array({json{{"type", "avgpool"}, {"kernel", 4}, {"stride", 4}},
                                          conv_spec("stem.conv", 8, 3, 1, 1, true), json{{"type", "relu"}}})},
                    {"stages", json::array({json::array({conv_spec("stage1.conv", 16, 3, 2, 1, true),
                                                         json{{"type", "relu"}}}),
                                            json::array({conv_spec("stage2.conv", 32, 3, 2, 1, true),
                                                         json{{"type", "relu"}}})})}};
    }
    if (name == "resnet18") return resnet("resnet18", false, {2, 2, 2, 2});
    if (name == "resnet50") return resnet("resnet50", true, {3, 4, 6, 3});
    throw Error("unknown architecture preset '" + std::string(name) + "' (known: tiny-cnn, resnet18, resnet50)");
}

json resolve_architecture(const json& arch) {
    if (arch.is_string()) return architecture_preset(arch.get<std::string>());
    if (!arch.is_object()) throw Error("architecture must be a preset name or an object");
    return arch;
}

LinearHead::LinearHead(int dim) : weight("head.weight", {1, dim}), bias("head.bias", {1}) {}

double LinearHead::forward(std::span<const double> rep) const {
    double s = bias.value[0];
    for (std::size_t i = 0; i < rep.size(); ++i) s += weight.value[i] * rep[i];
    return s;
}

namespace {

int get_int(const json& spec, const char* key, std::optional<int> fallback = std::nullopt) {
    if (!spec.contains(key)) {
        if (fallback) return *fallback;
        throw Error("architecture layer " + spec.dump() + " lacks '" + key + "'");
    }
    return spec.at(key).get<int>();
}

nn::LayerPtr build_layer(const json& spec, const std::string& default_name, int in_channels) {
    static const std::map<std::string, std::set<std::string>> allowed{
        {"conv", {"type", "name", "out", "kernel", "stride", "padding", "bias"}},
        {"bn", {"type", "name", "eps"}},
        {"relu", {"type", "name"}},
        {"maxpool", {"type", "name", "kernel", "stride", "padding"}},
        {"avgpool", {"type", "name", "kernel", "stride"}},
        {"basic", {"type", "name", "out", "stride"}},
        {"bottleneck", {"type", "name", "width", "stride", "expansion"}},
    };
    if (!spec.is_object() || !spec.contains("type")) throw Error("architecture layer must be an object with 'type'");
    const auto type = spec.at("type").get<std::string>();
    const auto it = allowed.find(type);
    if (it == allowed.end()) throw Error("unknown architecture layer type '" + type + "'");
    for (const auto& [key, _] : spec.items()) {
        if (!it->second.count(key)) throw Error("architecture layer '" + type + "' has unknown key '" + key + "'");
    }
    const std::string name = spec.value("name", default_name);
    if (type == "conv") {
        return std::make_unique<nn::Conv2d>(name, in_channels, get_int(spec, "out"), get_int(spec, "kernel"),
                                            get_int(spec, "stride", 1), get_int(spec, "padding", 0),
                                            spec.value("bias", false));
    }
    if (type == "bn") return std::make_unique<nn::BatchNorm>(name, in_channels, spec.value("eps", 1e-5));
    if (type == "relu") return std::make_unique<nn::ReLU>();
    if (type == "maxpool") {
        return std::make_unique<nn::MaxPool>(get_int(spec, "kernel"), get_int(spec, "stride", get_int(spec, "kernel")),
                                             get_int(spec, "padding", 0));
    }
    if (type == "avgpool") {
        return std::make_unique<nn::AvgPool>(get_int(spec, "kernel"), get_int(spec, "stride", get_int(spec, "kernel")));
    }
    if (type == "basic") return nn::make_basic_block(name, in_channels, get_int(spec, "out"), get_int(spec, "stride", 1));
    return nn::make_bottleneck(name, in_channels, get_int(spec, "width"), get_int(spec, "stride", 1),
                               get_int(spec, "expansion", 4));
}

void he_init(std::vector<nn::Param*>& params, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto* p : params) {
        if (p->shape.size() != 4) continue;  // conv weights only; biases and norms keep their defaults
        const double fan_in = static_cast<double>(p->shape[1]) * p->shape[2] * p->shape[3];
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (auto& v : p->value) v = dist(rng);
    }
}

}  // namespace

Encoder Encoder::from_architecture(const json& arch_in, std::uint64_t seed) {
    Encoder e;
    e.arch_ = resolve_architecture(arch_in);
    for (const auto& [key, _] : e.arch_.items()) {
        if (key != "name" && key != "in_channels" && key != "stem" && key != "stages") {
            throw Error("architecture has unknown key '" + key + "'");
        }
    }
    int channels = e.arch_.value("in_channels", 3);
    if (channels != imagery::kChannels) throw Error("architecture must take 3 input channels");
    const auto& stem = e.arch_.at("stem");
    for (std::size_t i = 0; i < stem.size(); ++i) {
        auto layer = build_layer(stem[i], "stem." + std::to_string(i), channels);
        channels = layer->output_channels(channels);
        e.stem_.add(std::move(layer));
    }
    const auto& stages = e.arch_.at("stages");
    if (!stages.is_array() || stages.empty()) throw Error("architecture needs at least one stage");
    for (std::size_t s = 0; s < stages.size(); ++s) {
        nn::Sequential stage;
        for (std::size_t i = 0; i < stages[s].size(); ++i) {
            auto layer = build_layer(stages[s][i], "stages." + std::to_string(s) + "." + std::to_string(i), channels);
            channels = layer->output_channels(channels);
            stage.add(std::move(layer));
        }
        e.stages_.push_back(std::move(stage));
        e.dropouts_.emplace_back(0.0);
    }
    e.repr_dim_ = channels;

    std::vector<nn::Param*> params;
    e.stem_.parameters(params);
    for (auto* p : params) p->group = 0;
    for (std::size_t s = 0; s < e.stages_.size(); ++s) {
        std::vector<nn::Param*> sp;
        e.stages_[s].parameters(sp);
        for (auto* p : sp) p->group = static_cast<int>(s) + 1;
        params.insert(params.end(), sp.begin(), sp.end());
    }
    std::set<std::string> names;
    for (auto* p : params) {
        if (!names.insert(p->name).second) throw Error("architecture has duplicate parameter name '" + p->name + "'");
    }
    he_init(params, seed);
    return e;
}

int Encoder::conv_count() const {
    int n = stem_.conv_count();
    for (const auto& s : stages_) n += s.conv_count();
    return n;
}

nn::Tensor Encoder::features(const nn::Tensor& x, nn::ForwardContext& ctx) {
    nn::Tensor cur = stem_.forward(x, ctx);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        cur = stages_[s].forward(cur, ctx);
        cur = dropouts_[s].forward(cur, ctx);
    }
    last_h_ = cur.h;
    last_w_ = cur.w;
    return cur;
}

std::vector<double> Encoder::represent(const nn::Tensor& x, nn::ForwardContext& ctx) {
    const nn::Tensor f = features(x, ctx);
    std::vector<double> rep(f.c);
    const std::size_t plane = f.plane();
    for (int c = 0; c < f.c; ++c) {
        double s = 0;
        for (std::size_t i = 0; i < plane; ++i) s += f.data[c * plane + i];
        rep[c] = s / static_cast<double>(plane);
    }
    return rep;
}

void Encoder::backward_represent(std::span<const double> grad) {
    if (grad.size() != static_cast<std::size_t>(repr_dim_)) throw Error("encoder backward: gradient size mismatch");
    nn::Tensor g(repr_dim_, last_h_, last_w_);
    const std::size_t plane = g.plane();
    for (int c = 0; c < repr_dim_; ++c) {
        std::fill_n(g.data.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, grad[c] / static_cast<double>(plane));
    }
    for (std::size_t s = stages_.size(); s-- > 0;) {
        g = dropouts_[s].backward(g);
        g = stages_[s].backward(g);
    }
    stem_.backward(g);
}

LinearHead& Encoder::head() {
    if (!head_) throw Error("encoder has no regression head");
    return *head_;
}

const LinearHead& Encoder::head() const {
    if (!head_) throw Error("encoder has no regression head");
    return *head_;
}

void Encoder::attach_head(double bias) {
    head_.emplace(repr_dim_);
    head_->bias.value[0] = bias;
    head_->weight.group = head_->bias.group = n_stages() + 1;
}

void Encoder::set_stage_dropout(double p) {
    if (!(p >= 0.0 && p < 1.0)) throw Error("dropout rate must lie in [0, 1)");
    for (auto& d : dropouts_) d.set_rate(p);
}

double Encoder::stage_dropout() const {
    return dropouts_.empty() ? 0.0 : dropouts_.front().rate();
}

std::vector<nn::Param*> Encoder::parameters() {
    std::vector<nn::Param*> out;
    stem_.parameters(out);
    for (auto& s : stages_) s.parameters(out);
    if (head_) {
        out.push_back(&head_->weight);
        out.push_back(&head_->bias);
    }
    return out;
}

nn::Tensor chip_tensor(const imagery::Chip& chip) {
    if (!chip.prepared()) throw Error("chip '" + chip.tile_id + "' has no model pixels");
    chip.validate();
    nn::Tensor t(imagery::kChannels, imagery::kModelSize, imagery::kModelSize);
    std::copy(chip.pixels_model.begin(), chip.pixels_model.end(), t.data.begin());
    return t;
}

// ---- weights blob ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'G', 'W', 'B'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
void put_raw(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));  // host is little-endian (checked at decode time by the magic/version)
    out.insert(out.end(), b, b + sizeof(T));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw Error("weights blob truncated at byte " + std::to_string(pos_));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return b_[pos_++];
    }
    template <class T>
    T raw() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_weights(std::span<const NamedTensor> tensors) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        put_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        out.push_back(2);
        put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : t.values) put_raw(out, v);
    }
    return out;
}

std::vector<NamedTensor> decode_weights(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (r.str(4) != std::string(kMagic, 4)) throw Error("not a weights blob (bad magic)");
    const auto version = r.u32();
    if (version != kVersion) throw Error("unsupported weights blob version " + std::to_string(version));
    const auto count = r.u32();
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.str(r.u32());
        const auto dtype = r.u8();
        if (dtype != 1 && dtype != 2) throw Error("weights blob: tensor '" + t.name + "' has unknown dtype");
        const auto rank = r.u32();
        if (rank > 8) throw Error("weights blob: tensor '" + t.name + "' has implausible rank");
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.shape.push_back(static_cast<int>(r.u32()));
            n *= static_cast<std::size_t>(t.shape.back());
        }
        r.need(n * (dtype == 1 ? 4 : 8));
        t.values.resize(n);
        for (auto& v : t.values) v = dtype == 1 ? static_cast<double>(r.raw<float>()) : r.raw<double>();
        out.push_back(std::move(t));
    }
    if (!r.done()) throw Error("weights blob has trailing bytes");
    return out;
}

std::vector<NamedTensor> snapshot_weights(Encoder& encoder) {
    std::vector<NamedTensor> out;
    for (auto* p : encoder.parameters()) out.push_back({p->name, p->shape, p->value});
    return out;
}

void assign_weights(Encoder& encoder, std::span<const NamedTensor> tensors) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : tensors) {
        if (!by_name.emplace(t.name, &t).second) throw Error("weights contain duplicate tensor '" + t.name + "'");
    }
    const bool has_head_weights = by_name.count("head.weight") && by_name.count("head.bias");
    if (has_head_weights && !encoder.has_head()) encoder.attach_head(0.0);

    auto params = encoder.parameters();
    for (auto* p : params) {
        const auto it = by_name.find(p->name);
        if (it == by_name.end()) {
            if (p->name.rfind("head.", 0) == 0) continue;
            throw Error("weights do not match architecture: first mismatching layer '" + p->name +
                        "' is missing from the weights");
        }
        if (it->second->shape != p->shape) {
            throw Error("weights do not match architecture: first mismatching layer '" + p->name + "' expects " +
                        nn::shape_string(p->shape) + " but weights hold " + nn::shape_string(it->second->shape));
        }
    }
    std::size_t used = 0;
    for (auto* p : params) {
        const auto it = by_name.find(p->name);
        if (it == by_name.end()) continue;
        p->value = it->second->values;
        ++used;
    }
    if (used < by_name.size()) {
        spdlog::debug("weights: {} tensor(s) not used by the architecture", by_name.size() - used);
    }
}

// ---- manifest -------------------------------------------------------------------------------

json to_json(const EncoderManifest& m) {
    json j{{"architecture", m.architecture},
           {"repr_dim", m.repr_dim},
           {"pretraining", to_string(m.pretraining)},
           {"normalization_stats", {{"mean", m.normalization_stats.mean}, {"std", m.normalization_stats.std}}},
           {"weights_uri", m.weights_uri},
           {"fingerprint", m.fingerprint},
           {"seed", m.seed},
           {"head", m.head}};
    if (!m.training_log.empty()) j["training_log"] = m.training_log;
    return j;
}

EncoderManifest manifest_from_json(const json& j) {
    static const std::set<std::string> known{"architecture", "repr_dim",    "pretraining", "normalization_stats",
                                             "weights_uri",  "fingerprint", "seed",        "head",
                                             "training_log"};
    if (!j.is_object()) throw Error("encoder manifest must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw Error("encoder manifest has unknown key '" + key + "'");
    }
    EncoderManifest m;
    m.architecture = j.at("architecture");
    m.repr_dim = j.at("repr_dim").get<int>();
    if (m.repr_dim <= 0) throw Error("encoder manifest: repr_dim must be positive");
    m.pretraining = parse_pretraining(j.at("pretraining").get<std::string>());
    if (j.contains("normalization_stats")) {
        const auto& s = j.at("normalization_stats");
        m.normalization_stats.mean = s.at("mean").get<std::array<double, 3>>();
        m.normalization_stats.std = s.at("std").get<std::array<double, 3>>();
        for (double v : m.normalization_stats.std) {
            if (!(v > 0)) throw Error("encoder manifest: normalization std must be positive");
        }
    }
    m.weights_uri = j.value("weights_uri", "");
    m.fingerprint = j.value("fingerprint", "");
    m.seed = j.value("seed", std::uint64_t{0});
    m.head = j.value("head", false);
    m.training_log = j.value("training_log", "");
    return m;
}

EncoderManifest load_manifest(const std::filesystem::path& path) {
    try {
        return manifest_from_json(json::parse(read_text_file(path)));
    } catch (const json::exception& e) {
        throw Error("encoder manifest " + path.string() + ": " + e.what());
    }
}

Encoder load_encoder(const EncoderManifest& m, const std::filesystem::path& base_dir) {
    Encoder e = Encoder::from_architecture(m.architecture, m.seed);
    if (e.repr_dim() != m.repr_dim) {
        throw Error("encoder manifest declares repr_dim " + std::to_string(m.repr_dim) + " but the architecture emits " +
                    std::to_string(e.repr_dim()));
    }
    if (m.weights_uri.empty()) {
        if (m.pretraining != Pretraining::scratch) {
            throw Error("encoder manifest with pretraining '" + std::string(to_string(m.pretraining)) +
                        "' needs weights_uri");
        }
        const auto blob = encode_weights(snapshot_weights(e));
        e.set_fingerprint(sha256_hex(blob));
    } else {
        std::filesystem::path path = m.weights_uri;
        if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
        const auto bytes = read_binary_file(path);
        const auto fp = sha256_hex(bytes);
        if (!m.fingerprint.empty() && fp != m.fingerprint) {
            throw Error("weights file " + path.string() + " is corrupted or replaced: fingerprint " + fp +
                        " does not match manifest " + m.fingerprint);
        }
        assign_weights(e, decode_weights(bytes));
        e.set_fingerprint(fp);
    }
    if (m.head && !e.has_head()) throw Error("encoder manifest declares a head but the weights carry none");
    e.set_normalization(m.normalization_stats);
    return e;
}

Encoder load_encoder(const std::filesystem::path& manifest_path) {
    return load_encoder(load_manifest(manifest_path), manifest_path.parent_path());
}

EncoderManifest save_checkpoint(Encoder& encoder, const std::filesystem::path& dir, const std::string& stem,
                                Pretraining pretraining, std::uint64_t seed, const std::string& training_log) {
    const auto blob = encode_weights(snapshot_weights(encoder));
    EncoderManifest m;
    m.architecture = encoder.architecture();
    m.repr_dim = encoder.repr_dim();
    m.pretraining = pretraining;
    m.normalization_stats = encoder.normalization();
    m.weights_uri = stem + ".pgwb";
    m.fingerprint = sha256_hex(blob);
    m.seed = seed;
    m.head = encoder.has_head();
    m.training_log = training_log;
    write_file_atomic(dir / m.weights_uri, blob);
    write_file_atomic(dir / (stem + ".json"), to_json(m).dump(2) + "\n");
    encoder.set_fingerprint(m.fingerprint);
    return m;
}

// ---- inference ------------------------------------------------------------------------------

nn::Tensor input_tensor(const Encoder& encoder, const imagery::Chip& chip) {
    if (chip.prepared()) return chip_tensor(chip);
    return chip_tensor(imagery::prepare_for_model(chip, encoder.normalization()));
}

std::vector<Representation> extract(Encoder& encoder, std::span<const imagery::Chip> chips) {
    std::vector<Representation> out;
    out.reserve(chips.size());
    nn::ForwardContext ctx;
    for (const auto& chip : chips) {
        auto rep = encoder.represent(input_tensor(encoder, chip), ctx);
        for (double v : rep) {
            if (!std::isfinite(v)) throw Error("encoder produced a non-finite representation for '" + chip.tile_id + "'");
        }
        out.push_back({chip.tile_id, std::move(rep), encoder.fingerprint()});
    }
    return out;
}

double predict(Encoder& encoder, const imagery::Chip& chip) {
    nn::ForwardContext ctx;
    const auto rep = encoder.represent(input_tensor(encoder, chip), ctx);
    return std::max(0.0, encoder.head().forward(rep));
}

std::vector<McPrediction> predict_mc_dropout(Encoder& encoder, std::span<const imagery::Chip> chips, int n_passes,
                                             double p, std::uint64_t seed) {
    std::vector<std::uint64_t> seeds(chips.size());
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = mix_seed(seed, i);
    return predict_mc_dropout(encoder, chips, n_passes, p, seeds);
}

std::vector<McPrediction> predict_mc_dropout(Encoder& encoder, std::span<const imagery::Chip> chips, int n_passes,
                                             double p, std::span<const std::uint64_t> chip_seeds) {
    if (n_passes < 2) throw Error("MC dropout needs at least 2 passes");
    if (chip_seeds.size() != chips.size()) throw Error("MC dropout: one seed per chip required");
    const auto& head = encoder.head();
    const double previous = encoder.stage_dropout();
    encoder.set_stage_dropout(p);
    struct Restore {
        Encoder& e;
        double p;
        ~Restore() { e.set_stage_dropout(p); }
    } restore{encoder, previous};

    std::vector<McPrediction> out;
    out.reserve(chips.size());
    for (std::size_t i = 0; i < chips.size(); ++i) {
        const nn::Tensor x = input_tensor(encoder, chips[i]);
        std::mt19937_64 rng(chip_seeds[i]);
        nn::ForwardContext ctx{&rng};
        // Welford keeps the mean exact when every pass agrees, so p = 0 yields std = 0 exactly.
        double mean = 0, m2 = 0;
        for (int k = 1; k <= n_passes; ++k) {
            const double y = std::max(0.0, head.forward(encoder.represent(x, ctx)));
            const double d = y - mean;
            mean += d / k;
            m2 += d * (y - mean);
        }
        out.push_back({mean, std::sqrt(std::max(0.0, m2) / (n_passes - 1))});
    }
    return out;
}

}  // namespace popgrid::enc
