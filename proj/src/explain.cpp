#include "popgrid/explain.hpp"

#include "popgrid/common.hpp"
#include "popgrid/csv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>

namespace popgrid::explain {

double ActivationMap::mean_heat() const {
    double s = 0;
    for (double v : heat) s += v;
    return heat.empty() ? 0.0 : s / static_cast<double>(heat.size());
}

std::vector<double> ActivationMap::upsampled(int size) const {
    std::vector<double> out(static_cast<std::size_t>(size) * size);
    const double sy = static_cast<double>(height) / size, sx = static_cast<double>(width) / size;
    for (int y = 0; y < size; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, height - 1.0);
        const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < size; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, width - 1.0);
            const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, width - 1);
            const double wx = fx - x0;
            auto h = [&](int r, int c) { return heat[static_cast<std::size_t>(r) * width + c]; };
            out[static_cast<std::size_t>(y) * size + x] =
                (h(y0, x0) * (1 - wx) + h(y0, x1) * wx) * (1 - wy) + (h(y1, x0) * (1 - wx) + h(y1, x1) * wx) * wy;
        }
    }
    return out;
}

nlohmann::json ActivationMap::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < height; ++r) {
        rows.push_back(std::vector<double>(heat.begin() + static_cast<std::ptrdiff_t>(r) * width,
                                           heat.begin() + static_cast<std::ptrdiff_t>(r + 1) * width));
    }
    return {{"tile_id", tile_id},
            {"bias", bias},
            {"prediction", prediction},
            {"heat", rows},
            {"note", "activation map of the linear regression head; forest predictions may differ"}};
}

ActivationMap activation_map_from_features(const nn::Tensor& features, const enc::LinearHead& head) {
    if (head.weight.value.size() != static_cast<std::size_t>(features.c)) {
        throw Error("activation map: head expects " + std::to_string(head.weight.value.size()) + " channels, features have " +
                    std::to_string(features.c));
    }
    ActivationMap m;
    m.height = features.h;
    m.width = features.w;
    m.heat.assign(features.plane(), 0.0);
    for (int c = 0; c < features.c; ++c) {
        const double w = head.weight.value[c];
        const double* f = features.data.data() + c * features.plane();
        for (std::size_t i = 0; i < features.plane(); ++i) m.heat[i] += w * f[i];
    }
    m.bias = head.bias.value[0];
    m.prediction = m.mean_heat() + m.bias;
    return m;
}

ActivationMap regression_activation_map(enc::Encoder& encoder, const imagery::Chip& chip) {
    if (!encoder.has_head()) {
        throw Error("regression activation maps need an encoder with a linear regression head (fine-tune first)");
    }
    nn::ForwardContext ctx;
    const auto features = encoder.features(enc::input_tensor(encoder, chip), ctx);
    auto m = activation_map_from_features(features, encoder.head());
    m.tile_id = chip.tile_id;
    return m;
}

png::Image overlay(const imagery::Chip& chip, const ActivationMap& map, double alpha) {
    chip.validate();
    constexpr int S = imagery::kModelSize;
    const auto base = imagery::resize_bilinear(chip.pixels_raw, imagery::kRawSize, imagery::kRawSize, 3, S, S);
    const auto heat = map.upsampled(S);
    const auto [lo_it, hi_it] = std::minmax_element(heat.begin(), heat.end());
    const double lo = *lo_it, span = *hi_it - *lo_it;

    png::Image img;
    img.width = img.height = S;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(S) * S * 3);
    const std::size_t plane = static_cast<std::size_t>(S) * S;
    for (std::size_t i = 0; i < plane; ++i) {
        const double t = span > 0 ? (heat[i] - lo) / span : 0.5;
        const double ramp[3] = {std::clamp(1.5 - std::abs(4 * t - 3), 0.0, 1.0),
                                std::clamp(1.5 - std::abs(4 * t - 2), 0.0, 1.0),
                                std::clamp(1.5 - std::abs(4 * t - 1), 0.0, 1.0)};
        for (int c = 0; c < 3; ++c) {
            const double v = (1 - alpha) * base[c * plane + i] + alpha * 255.0 * ramp[c];
            img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    return img;
}

void save_activation_map(const std::filesystem::path& dir, const imagery::Chip& chip, const ActivationMap& map) {
    std::filesystem::create_directories(dir);
    png::write(dir / (map.tile_id + ".ram.png"), overlay(chip, map));
    write_file_atomic(dir / (map.tile_id + ".ram.json"), map.to_json().dump(2) + "\n");
}

// ---- t-SNE ------------------------------------------------------------------------------------

namespace {

// Conditional probabilities of row i for the perplexity target, by bisection on the precision.
void conditional_row(const std::vector<double>& d2, std::size_t n, std::size_t i, double log_perp, double* row) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 200; ++it) {
        double sum = 0, weighted = 0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = j == i ? 0.0 : std::exp(-d2[i * n + j] * beta);
            sum += row[j];
            weighted += d2[i * n + j] * row[j];
        }
        if (sum <= 0) {
            // Every neighbour underflowed: lower the precision.
            hi = beta;
            beta = (lo + hi) / 2;
            continue;
        }
        const double H = std::log(sum) + beta * weighted / sum;
        for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
        const double diff = H - log_perp;
        if (std::abs(diff) < 1e-5) return;
        if (diff > 0) {
            lo = beta;
            beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
        } else {
            hi = beta;
            beta = (beta + lo) / 2;
        }
    }
}

}  // namespace

std::vector<EmbeddedPoint> project_embeddings(std::span<const enc::Representation> reps, const TsneConfig& cfg) {
    const std::size_t n = reps.size();
    if (n < 5) throw Error("t-SNE needs at least 5 representations");
    std::set<std::string> ids;
    for (const auto& r : reps) {
        if (!ids.insert(r.tile_id).second) throw Error("t-SNE: duplicate tile id '" + r.tile_id + "'");
        if (r.vector.size() != reps.front().vector.size()) throw Error("t-SNE: representations differ in length");
    }
    if (cfg.iterations < 1 || cfg.learning_rate < 0 || !(cfg.perplexity > 0) || !(cfg.early_exaggeration >= 1)) {
        throw Error("t-SNE: invalid configuration");
    }
    // Steps above n / exaggeration make the exaggerated phase oscillate and diverge on small sets.
    const double lr = cfg.learning_rate > 0 ? cfg.learning_rate
                                            : static_cast<double>(n) / (4.0 * cfg.early_exaggeration);

    std::vector<double> d2(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < reps[i].vector.size(); ++k) {
                const double d = reps[i].vector[k] - reps[j].vector[k];
                s += d * d;
            }
            d2[i * n + j] = d2[j * n + i] = s;
        }
    }

    const double perplexity = std::min(cfg.perplexity, (static_cast<double>(n) - 1) / 3.0);
    std::vector<double> P(n * n);
    for (std::size_t i = 0; i < n; ++i) conditional_row(d2, n, i, std::log(perplexity), &P[i * n]);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = std::max((P[i * n + j] + P[j * n + i]) / (2.0 * static_cast<double>(n)), 1e-12);
            P[i * n + j] = P[j * n + i] = v;
        }
    }

    // Identical vectors start (and stay) at the same position.
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> g(0.0, 1e-4);
    std::map<std::vector<double>, std::size_t> first;
    std::vector<double> Y(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto [it, fresh] = first.emplace(reps[i].vector, i);
        if (fresh) {
            Y[2 * i] = g(rng);
            Y[2 * i + 1] = g(rng);
        } else {
            Y[2 * i] = Y[2 * it->second];
            Y[2 * i + 1] = Y[2 * it->second + 1];
        }
    }

    std::vector<double> update(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n), num(n * n);
    for (int it = 0; it < cfg.iterations; ++it) {
        const double exag = it < cfg.exaggeration_iterations ? cfg.early_exaggeration : 1.0;
        const double momentum = it < 250 ? 0.5 : 0.8;
        double z = 0;
        for (std::size_t i = 0; i < n; ++i) {
            num[i * n + i] = 0;
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dx = Y[2 * i] - Y[2 * j], dy = Y[2 * i + 1] - Y[2 * j + 1];
                const double q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = num[j * n + i] = q;
                z += 2 * q;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            double gx = 0, gy = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double m = (exag * P[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                gx += m * (Y[2 * i] - Y[2 * j]);
                gy += m * (Y[2 * i + 1] - Y[2 * j + 1]);
            }
            grad[2 * i] = 4 * gx;
            grad[2 * i + 1] = 4 * gy;
        }
        for (std::size_t k = 0; k < 2 * n; ++k) {
            gains[k] = (grad[k] > 0) != (update[k] > 0) ? gains[k] + 0.2 : gains[k] * 0.8;
            gains[k] = std::max(gains[k], 0.01);
            update[k] = momentum * update[k] - lr * gains[k] * grad[k];
            Y[k] += update[k];
        }
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < n; ++i) {
            mx += Y[2 * i];
            my += Y[2 * i + 1];
        }
        mx /= static_cast<double>(n);
        my /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            Y[2 * i] -= mx;
            Y[2 * i + 1] -= my;
        }
    }

    std::vector<EmbeddedPoint> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back({reps[i].tile_id, Y[2 * i], Y[2 * i + 1]});
    return out;
}

std::string embedding_csv(std::span<const EmbeddedPoint> points, const std::map<std::string, PointAttributes>& attributes) {
    std::string out = "tile_id,x,y,population,region_key\n";
    for (const auto& p : points) {
        const auto it = attributes.find(p.tile_id);
        std::string pop, region;
        if (it != attributes.end()) {
            if (it->second.population) pop = csv::format_double(*it->second.population);
            region = it->second.region_key;
        }
        out += csv::join_row({p.tile_id, csv::format_double(p.x), csv::format_double(p.y), pop, region}) + "\n";
    }
    return out;
}

}  // namespace popgrid::explain
