#include "hat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "hat/checkpoint.hpp"
#include "hat/rng.hpp"

namespace hat {

void TrainConfig::validate() const {
    auto require = [](bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(msg);
    };
    require(lr0 >= 0.0, "train.lr0 must be nonnegative");
    require(beta1 > 0.0 && beta1 < 1.0, "train.beta1 must be in (0, 1)");
    require(beta2 > 0.0 && beta2 < 1.0, "train.beta2 must be in (0, 1)");
    require(weight_decay >= 0.0, "train.weight_decay must be nonnegative");
    require(eps_adam > 0.0, "train.eps_adam must be positive");
    require(clip_norm > 0.0, "train.clip_norm must be positive");
    require(label_smoothing >= 0.0 && label_smoothing < 1.0, "train.label_smoothing must be in [0, 1)");
    require(epochs >= 1, "train.epochs must be >= 1");
    require(batch_size >= 1, "train.batch_size must be >= 1");
}

// ---------------------------------------------------------------------------
// metrics

Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels, std::size_t vocab) {
    if (predictions.empty() || predictions.size() != labels.size())
        throw std::invalid_argument("compute_metrics: prediction/label lists must be nonempty and equal length");
    Metrics m;
    m.confusion.assign(vocab, std::vector<std::size_t>(vocab, 0));
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        int p = predictions[i], y = labels[i];
        if (p < 0 || static_cast<std::size_t>(p) >= vocab || y < 0 || static_cast<std::size_t>(y) >= vocab)
            throw std::out_of_range("compute_metrics: class outside [0, vocab)");
        m.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)]++;
    }
    m.precision.resize(vocab);
    m.recall.resize(vocab);
    m.f1.resize(vocab);
    std::size_t correct = 0;
    for (std::size_t c = 0; c < vocab; ++c) {
        std::size_t tp = m.confusion[c][c];
        std::size_t fp = 0, fn = 0;
        for (std::size_t k = 0; k < vocab; ++k) {
            if (k != c) {
                fp += m.confusion[k][c];
                fn += m.confusion[c][k];
            }
        }
        correct += tp;
        m.precision[c] = tp + fp ? 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        m.recall[c] = tp + fn ? 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        m.f1[c] = 2 * tp + fp + fn
                      ? 100.0 * 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn)
                      : 0.0;
        m.macro_precision += m.precision[c];
        m.macro_recall += m.recall[c];
        m.macro_f1 += m.f1[c];
    }
    m.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(predictions.size());
    m.macro_precision /= static_cast<double>(vocab);
    m.macro_recall /= static_cast<double>(vocab);
    m.macro_f1 /= static_cast<double>(vocab);
    return m;
}

// ---------------------------------------------------------------------------
// optimization pieces

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
    if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
    if (step >= total_steps) return 0.0;  // endpoint of the schedule, clamped past it
    double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

double clip_gradients(NamedParams& params, double clip_norm) {
    if (clip_norm <= 0.0) throw std::invalid_argument("clip_gradients: clip_norm must be positive");
    double sq = 0.0;
    for (auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > clip_norm) {
        double s = clip_norm / norm;
        for (auto& [name, t] : params) {
            if (!t.has_grad()) continue;
            for (double& g : t.mutable_grad()) g *= s;
        }
    }
    return norm;
}

void AdamWState::init(const NamedParams& params) {
    m.clear();
    v.clear();
    steps.assign(params.size(), 0);
    for (const auto& [name, t] : params) {
        m.emplace_back(t.size(), 0.0);
        v.emplace_back(t.size(), 0.0);
    }
}

void adamw_step(NamedParams& params, AdamWState& state, double lr_t, const TrainConfig& cfg) {
    if (state.m.size() != params.size()) throw std::logic_error("adamw_step: state not initialized");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i].second;
        if (!t.has_grad()) continue;
        const auto& g = t.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        std::size_t step = ++state.steps[i];
        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        auto& data = t.data();
        // decoupled decay, applied multiplicatively before the gradient term
        if (cfg.weight_decay > 0.0) {
            double shrink = 1.0 - lr_t * cfg.weight_decay;
            for (double& x : data) x *= shrink;
        }
        for (std::size_t k = 0; k < data.size(); ++k) {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            double mhat = m[k] / bc1;
            double vhat = v[k] / bc2;
            data[k] -= lr_t * mhat / (std::sqrt(vhat) + cfg.eps_adam);
        }
    }
}

// ---------------------------------------------------------------------------
// training loop

namespace {

struct PackedBatch {
    Tensor patches;
    StrokeBatch strokes;
    BatchView view;
    std::vector<int> labels;
};

PackedBatch pack_batch(const Dataset& data, std::span<const std::size_t> indices, Mode mode,
                       const ModelConfig& cfg) {
    PackedBatch b;
    std::vector<const GlyphImage*> images;
    std::vector<const StrokeSequence*> strokes;
    for (std::size_t idx : indices) {
        const Sample& s = data.samples[idx];
        b.labels.push_back(s.label);
        if (mode != Mode::Stroke) images.push_back(&s.image);
        if (mode != Mode::Image) strokes.push_back(&s.strokes);
    }
    if (!images.empty()) {
        b.patches = pack_patches(images, cfg);
        b.view.patches = &b.patches;
    }
    if (!strokes.empty()) {
        b.strokes = pack_strokes(strokes);
        b.view.strokes = &b.strokes;
    }
    return b;
}

void check_modalities(const Dataset& data, Mode mode) {
    if (mode != Mode::Stroke && !data.has_images())
        throw std::invalid_argument(std::string("mode ") + to_string(mode) +
                                    " requires the image modality, but the dataset has no images");
}

std::vector<int> predict_split(HatModel& model, const Dataset& data, std::span<const std::size_t> indices,
                               Mode mode, std::size_t batch_size, std::vector<int>& labels_out) {
    ForwardContext ctx;  // eval
    std::vector<int> preds;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        std::size_t stop = std::min(indices.size(), start + batch_size);
        PackedBatch batch =
            pack_batch(data, indices.subspan(start, stop - start), mode, model.cfg);
        Tensor logits = forward_batch(batch.view, mode, model, ctx);
        std::size_t v = model.cfg.vocab;
        for (std::size_t r = 0; r < stop - start; ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < v; ++c)
                if (logits.data()[r * v + c] > logits.data()[r * v + best]) best = c;
            preds.push_back(static_cast<int>(best));
            labels_out.push_back(batch.labels[r]);
        }
    }
    return preds;
}

}  // namespace

Metrics evaluate(HatModel& model, const Dataset& data, Split split, Mode mode, std::size_t batch_size) {
    check_modalities(data, mode);
    auto indices = data.split_indices(split);
    if (indices.empty())
        throw std::invalid_argument(std::string("evaluate: split ") + to_string(split) + " is empty");
    std::vector<int> labels;
    std::vector<int> preds = predict_split(model, data, indices, mode, batch_size, labels);
    return compute_metrics(preds, labels, model.cfg.vocab);
}

std::string report_jsonl_line(const EpochReport& r) {
    char buf[320];
    std::snprintf(buf, sizeof buf,
                  "{\"epoch\": %zu, \"train_loss\": %.17g, \"val_acc\": %.17g, \"val_macro_p\": %.17g, "
                  "\"val_macro_r\": %.17g, \"val_macro_f1\": %.17g, \"lr\": %.17g}",
                  r.epoch, r.train_loss, r.val_acc, r.val_macro_p, r.val_macro_r, r.val_macro_f1, r.lr);
    return buf;
}

TrainResult train(HatModel& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    check_modalities(data, cfg.mode);
    auto train_idx = data.split_indices(Split::Train);
    if (train_idx.empty()) throw std::invalid_argument("train: train split is empty");
    for (std::size_t i : train_idx)
        if (data.samples[i].label < 0 || static_cast<std::size_t>(data.samples[i].label) >= model.cfg.vocab)
            throw std::invalid_argument("train: sample label outside configured vocab");

    const std::size_t n_train = train_idx.size();
    const std::size_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps =
        cfg.schedule_total_steps ? cfg.schedule_total_steps : cfg.epochs * steps_per_epoch;

    NamedParams params = model.named_params();
    AdamWState opt;
    opt.init(params);
    Rng dropout_rng(derive_seed(cfg.seed, "dropout", 0));

    const bool have_val = !data.split_indices(Split::Val).empty();
    TrainResult result;
    result.total_steps = total_steps;
    result.best_val_acc = -1.0;

    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double loss_sum = 0.0;
        double last_lr = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            PackedBatch batch = pack_batch(data, std::span(order).subspan(start, stop - start),
                                           cfg.mode, model.cfg);
            ForwardContext ctx;
            ctx.training = true;
            ctx.dropout_rng = &dropout_rng;
            Tensor logits = forward_batch(batch.view, cfg.mode, model, ctx);
            Tensor loss = cross_entropy_smoothed(logits, batch.labels, cfg.label_smoothing);
            double loss_value = loss.item();
            if (!std::isfinite(loss_value))
                throw std::runtime_error("train: non-finite loss at step " + std::to_string(global_step) +
                                         " (epoch " + std::to_string(epoch + 1) + ")");
            loss_sum += loss_value * static_cast<double>(stop - start);

            for (auto& [name, t] : params) t.zero_grad();
            loss.backward();
            clip_gradients(params, cfg.clip_norm);
            last_lr = cosine_lr(global_step, total_steps, cfg.lr0);
            adamw_step(params, opt, last_lr, cfg);
            ++global_step;
        }

        Metrics val = evaluate(model, data, have_val ? Split::Val : Split::Train, cfg.mode, cfg.batch_size);
        EpochReport report;
        report.epoch = epoch + 1;
        report.train_loss = loss_sum / static_cast<double>(n_train);
        report.val_acc = val.accuracy;
        report.val_macro_p = val.macro_precision;
        report.val_macro_r = val.macro_recall;
        report.val_macro_f1 = val.macro_f1;
        report.lr = last_lr;
        result.epochs.push_back(report);

        if (val.accuracy > result.best_val_acc) {
            result.best_val_acc = val.accuracy;
            result.best_epoch = epoch + 1;
            result.best_checkpoint = checkpoint_bytes(model, cfg.mode);
        }
    }
    return result;
}

std::array<ModalityDropoutRow, 3> evaluate_modality_dropout(HatModel& model, const Dataset& data,
                                                            Split split) {
    std::array<ModalityDropoutRow, 3> rows;
    const Mode order[3] = {Mode::Both, Mode::Image, Mode::Stroke};
    for (int i = 0; i < 3; ++i) {
        rows[i].mode = order[i];
        rows[i].metrics = evaluate(model, data, split, order[i]);
    }
    for (int i = 0; i < 3; ++i) rows[i].delta_acc = rows[i].metrics.accuracy - rows[0].metrics.accuracy;
    return rows;
}

}  // namespace hat
