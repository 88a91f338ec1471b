#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hat/dataset.hpp"
#include "hat/model.hpp"

namespace hat {

struct TrainConfig {
    double lr0 = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double eps_adam = 1e-8;
    double clip_norm = 1.0;
    double label_smoothing = 0.1;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    Mode mode = Mode::Both;
    std::size_t schedule_total_steps = 0;  // 0: derived as epochs * ceil(n_train / batch_size)

    void validate() const;
};

struct Metrics {
    double accuracy = 0.0;  // percent, as are all scores here
    std::vector<double> precision, recall, f1;
    double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

// Per-class precision/recall/F1 with unweighted macro averages over all
// `vocab` classes; zero-denominator classes score 0.
Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels, std::size_t vocab);

// lr0 * (1 + cos(pi * step / total_steps)) / 2, clamped to 0 past the end.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Scales every recorded gradient by clip_norm / ||g|| when the global L2 norm
// exceeds clip_norm. Returns the pre-clip norm.
double clip_gradients(NamedParams& params, double clip_norm);

struct AdamWState {
    std::vector<std::vector<double>> m, v;
    std::vector<std::size_t> steps;  // per-parameter update counts for bias correction

    void init(const NamedParams& params);
};

// Bias-corrected Adam plus decoupled multiplicative weight decay. Parameters
// without a recorded gradient are skipped entirely, so branches that did not
// take part in the forward pass stay bitwise intact.
void adamw_step(NamedParams& params, AdamWState& state, double lr_t, const TrainConfig& cfg);

struct EpochReport {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_acc = 0.0, val_macro_p = 0.0, val_macro_r = 0.0, val_macro_f1 = 0.0;
    double lr = 0.0;  // learning rate of the epoch's final step
};

std::string report_jsonl_line(const EpochReport& r);

struct TrainResult {
    std::vector<EpochReport> epochs;
    std::vector<std::uint8_t> best_checkpoint;  // snapshot at the best val accuracy
    std::size_t best_epoch = 0;                 // 1-based
    double best_val_acc = 0.0;
    std::size_t total_steps = 0;
};

// Full training loop: seeded shuffling, padded batches, smoothed
// cross-entropy, backward, global clip, AdamW on a cosine schedule.
// Deterministic given the seed. When the val split is empty the per-epoch
// metrics are computed on the train split instead.
TrainResult train(HatModel& model, const Dataset& data, const TrainConfig& cfg);

Metrics evaluate(HatModel& model, const Dataset& data, Split split, Mode mode,
                 std::size_t batch_size = 32);

struct ModalityDropoutRow {
    Mode mode;
    Metrics metrics;
    double delta_acc = 0.0;  // accuracy minus the full-input (Both) accuracy
};

// Table-6 protocol: one dual-trained checkpoint evaluated under Both, Image,
// Stroke, in that fixed order.
std::array<ModalityDropoutRow, 3> evaluate_modality_dropout(HatModel& model, const Dataset& data,
                                                            Split split);

}  // namespace hat
