#pragma once

#include "popgrid/encoder.hpp"

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace popgrid::enc {

struct FinetuneConfig {
    int head_epochs = 5;
    double head_lr = 2e-3;
    double base_lr_top = 1e-3;
    double base_lr_bottom = 1e-5;
    int batch_size = 32;
    int patience = 2;
    double train_fraction = 0.8;
    int max_epochs = 50;  ///< cap on the full-network phase
    bool augment = true;  ///< random dihedral transforms on the training split
    std::uint64_t seed = 0;

    void validate() const;
};

struct LabelledChip {
    imagery::Chip chip;
    double population = 0;
};

/// "No strict improvement for `patience` consecutive epochs" rule.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience);
    /// Records a validation loss; returns true once training should stop.
    bool observe(double val_loss);
    double best() const { return best_; }
    int epochs_without_improvement() const { return bad_; }

private:
    int patience_;
    double best_ = std::numeric_limits<double>::infinity();
    int bad_ = 0;
};

struct TrainingLogRow {
    int epoch = 0;       ///< 0 = before training, then counted across both phases
    std::string phase;   ///< init | head | full
    double train_loss = 0;
    double val_loss = 0;
    double lr_top = 0;
};

struct TrainingLog {
    std::vector<TrainingLogRow> rows;
    std::string to_csv() const;
};

struct FinetuneResult {
    Encoder encoder;  ///< restored to the epoch with the lowest validation loss
    TrainingLog log;
    int best_epoch = 0;
    double best_val_loss = 0;
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
};

/// Mean squared head error over the chips in inference mode (no dropout, no augmentation).
double evaluate_l2(Encoder& encoder, std::span<const LabelledChip> chips);

/// Two-phase fine-tuning: a fresh linear head (w = 0, b = mean training label) is trained alone
/// for head_epochs at head_lr, then every trainable parameter is trained with Adam at
/// discriminative per-group learning rates until validation loss stops improving.
FinetuneResult finetune(Encoder encoder, std::span<const LabelledChip> data, const FinetuneConfig& cfg);

}  // namespace popgrid::enc
