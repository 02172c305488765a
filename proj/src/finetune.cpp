#include "popgrid/finetune.hpp"

#include "popgrid/common.hpp"
#include "popgrid/csv.hpp"
#include "popgrid/nn/optim.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

namespace popgrid::enc {

void FinetuneConfig::validate() const {
    if (head_epochs < 0) throw Error("finetune: head_epochs must be >= 0");
    if (max_epochs < 0) throw Error("finetune: max_epochs must be >= 0");
    if (!(head_lr > 0 && base_lr_top > 0 && base_lr_bottom > 0)) throw Error("finetune: learning rates must be > 0");
    if (base_lr_bottom > base_lr_top) throw Error("finetune: base_lr_bottom must not exceed base_lr_top");
    if (batch_size < 1) throw Error("finetune: batch_size must be >= 1");
    if (patience < 1) throw Error("finetune: patience must be >= 1");
    if (!(train_fraction > 0 && train_fraction < 1)) throw Error("finetune: train_fraction must lie in (0, 1)");
}

EarlyStopper::EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) throw Error("patience must be >= 1");
}

bool EarlyStopper::observe(double val_loss) {
    if (val_loss < best_) {
        best_ = val_loss;
        bad_ = 0;
    } else {
        ++bad_;
    }
    return bad_ >= patience_;
}

std::string TrainingLog::to_csv() const {
    std::string out = "epoch,phase,train_loss,val_loss,lr_top\n";
    for (const auto& r : rows) {
        out += csv::join_row({std::to_string(r.epoch), r.phase, csv::format_double(r.train_loss),
                              csv::format_double(r.val_loss), csv::format_double(r.lr_top)});
        out += '\n';
    }
    return out;
}

double evaluate_l2(Encoder& encoder, std::span<const LabelledChip> chips) {
    if (chips.empty()) throw Error("evaluate_l2: no chips");
    nn::ForwardContext ctx;
    double s = 0;
    for (const auto& lc : chips) {
        const double d = encoder.head().forward(encoder.represent(input_tensor(encoder, lc.chip), ctx)) - lc.population;
        s += d * d;
    }
    return s / static_cast<double>(chips.size());
}

namespace {

class DihedralTable {
public:
    DihedralTable() {
        for (int code = 0; code < 8; ++code) idx_[code] = imagery::dihedral_source_index(imagery::kModelSize, {code});
    }
    /// Expands planar float model pixels into a tensor permuted by the dihedral element `code`.
    nn::Tensor apply(const std::vector<float>& x, int code) const {
        nn::Tensor y(imagery::kChannels, imagery::kModelSize, imagery::kModelSize);
        const auto& idx = idx_[code];
        const std::size_t plane = y.plane();
        for (int c = 0; c < y.c; ++c) {
            const float* src = x.data() + c * plane;
            double* dst = y.data.data() + c * plane;
            for (std::size_t p = 0; p < plane; ++p) dst[p] = src[idx[p]];
        }
        return y;
    }

private:
    std::array<std::vector<int>, 8> idx_;
};

std::vector<std::vector<double>> copy_values(const std::vector<nn::Param*>& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto* p : params) out.push_back(p->value);
    return out;
}

void restore_values(const std::vector<nn::Param*>& params, const std::vector<std::vector<double>>& values) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

}  // namespace

FinetuneResult finetune(Encoder encoder, std::span<const LabelledChip> data, const FinetuneConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw Error("finetune: no labelled chips");
    if (data.size() < 2) throw Error("finetune: need at least 2 labelled chips for a train/validation split");
    for (const auto& lc : data) {
        if (!std::isfinite(lc.population) || lc.population < 0) {
            throw Error("finetune: label for '" + lc.chip.tile_id + "' must be a finite non-negative number");
        }
    }
    if (data.size() < static_cast<std::size_t>(2 * cfg.batch_size)) {
        spdlog::warn("finetune: only {} labelled chips; at least {} (2 x batch size) recommended", data.size(),
                     2 * cfg.batch_size);
    }

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 split_rng(mix_seed(cfg.seed, 0));
    std::shuffle(order.begin(), order.end(), split_rng);
    const auto n = static_cast<long>(data.size());
    const long n_val = std::clamp(std::lround(static_cast<double>(n) * (1.0 - cfg.train_fraction)), 1L, n - 1);
    std::vector<LabelledChip> val_set, train_set;
    for (long i = 0; i < n; ++i) (i < n_val ? val_set : train_set).push_back(data[order[i]]);

    FinetuneResult result{std::move(encoder), {}, 0, 0, {}, {}};
    Encoder& enc = result.encoder;
    for (const auto& lc : train_set) result.train_ids.push_back(lc.chip.tile_id);
    for (const auto& lc : val_set) result.val_ids.push_back(lc.chip.tile_id);

    // Model pixels are prepared once; augmentation permutes them per epoch.
    auto prepare_all = [&](const std::vector<LabelledChip>& set) {
        std::vector<std::vector<float>> xs;
        xs.reserve(set.size());
        for (const auto& lc : set) {
            xs.push_back(lc.chip.prepared() ? lc.chip.pixels_model
                                            : imagery::prepare_for_model(lc.chip, enc.normalization()).pixels_model);
        }
        return xs;
    };
    const auto train_x = prepare_all(train_set);
    const auto val_x = prepare_all(val_set);
    const DihedralTable dihedral;
    auto l2 = [&](const std::vector<std::vector<float>>& xs, const std::vector<LabelledChip>& set) {
        nn::ForwardContext ctx;
        double s = 0;
        for (std::size_t i = 0; i < set.size(); ++i) {
            const double d = enc.head().forward(enc.represent(dihedral.apply(xs[i], 0), ctx)) - set[i].population;
            s += d * d;
        }
        return s / static_cast<double>(set.size());
    };

    double mean_label = 0;
    for (const auto& lc : train_set) mean_label += lc.population;
    mean_label /= static_cast<double>(train_set.size());
    enc.attach_head(mean_label);

    auto params = enc.parameters();
    std::vector<nn::Param*> head_params{&enc.head().weight, &enc.head().bias};
    const int head_group = enc.n_groups() - 1;

    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_values;
    auto record = [&](int epoch, const char* phase, double train_loss, double lr_top) {
        const double val = l2(val_x, val_set);
        if (!std::isfinite(val)) throw Error("finetune: validation loss became non-finite at epoch " + std::to_string(epoch));
        result.log.rows.push_back({epoch, phase, train_loss, val, lr_top});
        spdlog::debug("finetune epoch {} ({}) train {:.5g} val {:.5g}", epoch, phase, train_loss, val);
        if (val < best_val) {
            best_val = val;
            best_values = copy_values(params);
            result.best_epoch = epoch;
        }
        return val;
    };

    record(0, "init", l2(train_x, train_set), 0.0);

    std::mt19937_64 rng(mix_seed(cfg.seed, 1));
    std::uniform_int_distribution<int> pick_code(0, 7);

    // One pass over the shuffled training split; `full` also backpropagates into the backbone.
    auto run_epoch = [&](nn::Adam& opt, std::span<const double> lrs, bool full, int epoch) {
        std::vector<std::size_t> idx(train_set.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        nn::ForwardContext ctx;
        double total = 0;
        std::size_t pos = 0;
        opt.zero_grad();
        while (pos < idx.size()) {
            const std::size_t end = std::min(idx.size(), pos + static_cast<std::size_t>(cfg.batch_size));
            const double scale = 1.0 / static_cast<double>(end - pos);
            for (; pos < end; ++pos) {
                const auto i = idx[pos];
                const int code = cfg.augment ? pick_code(rng) : 0;
                const auto rep = enc.represent(dihedral.apply(train_x[i], code), ctx);
                auto& head = enc.head();
                const double err = head.forward(rep) - train_set[i].population;
                if (!std::isfinite(err)) {
                    throw Error("finetune: non-finite loss at epoch " + std::to_string(epoch) + " on tile '" +
                                train_set[i].chip.tile_id + "'; try lower learning rates");
                }
                total += err * err;
                const double g = 2.0 * err * scale;
                for (std::size_t k = 0; k < rep.size(); ++k) head.weight.grad[k] += g * rep[k];
                head.bias.grad[0] += g;
                if (full) {
                    std::vector<double> grad_rep(rep.size());
                    for (std::size_t k = 0; k < rep.size(); ++k) grad_rep[k] = g * head.weight.value[k];
                    enc.backward_represent(grad_rep);
                }
            }
            opt.step(lrs);
        }
        return total / static_cast<double>(idx.size());
    };

    int epoch = 0;
    {
        nn::Adam opt(head_params);
        std::vector<double> lrs(enc.n_groups(), 0.0);
        lrs[head_group] = cfg.head_lr;
        for (int e = 0; e < cfg.head_epochs; ++e) {
            ++epoch;
            const double train_loss = run_epoch(opt, lrs, false, epoch);
            record(epoch, "head", train_loss, cfg.head_lr);
        }
    }
    {
        nn::Adam opt(params);
        const auto lrs = nn::discriminative_learning_rates(enc.n_groups(), cfg.base_lr_bottom, cfg.base_lr_top);
        EarlyStopper stopper(cfg.patience);
        stopper.observe(result.log.rows.back().val_loss);
        for (int e = 0; e < cfg.max_epochs; ++e) {
            ++epoch;
            const double train_loss = run_epoch(opt, lrs, true, epoch);
            const double val = record(epoch, "full", train_loss, cfg.base_lr_top);
            if (stopper.observe(val)) {
                spdlog::info("finetune: early stop after epoch {} (best epoch {})", epoch, result.best_epoch);
                break;
            }
        }
    }

    restore_values(params, best_values);
    result.best_val_loss = best_val;
    return result;
}

}  // namespace popgrid::enc
