#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "hat/checkpoint.hpp"
#include "hat/dataset.hpp"
#include "hat/rng.hpp"
#include "hat/trainer.hpp"

using namespace hat;
using hat::testing::max_abs_diff;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d = 8;
    c.l_latent = 2;
    c.n_latent_layers = 1;
    c.n_stroke_layers = 1;
    c.n_heads = 2;
    c.vocab = 10;
    c.dropout_p = 0.1;
    c.patch_grid = 2;
    c.backbone_channels = 4;
    c.image_side = 8;
    return c;
}

Dataset tiny_dataset(std::size_t per_class, std::uint64_t seed) {
    GenParams p;
    p.n_per_class = per_class;
    p.seed = seed;
    p.image_side = 8;
    p.resample_points = 12;
    return generate_dataset(builtin_templates(), p);
}

TrainConfig quick_train(std::size_t epochs, Mode mode = Mode::Both) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 8;
    t.seed = 5;
    t.mode = mode;
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// smoothed cross entropy

TEST(SmoothedCrossEntropy, UniformLogitsGiveLogV) {
    for (double eps : {0.0, 0.1, 0.5}) {
        Tensor logits = Tensor::full({4, 7}, 1.25);
        std::vector<int> labels = {0, 3, 6, 2};
        Tensor loss = cross_entropy_smoothed(logits, labels, eps);
        EXPECT_NEAR(loss.item(), std::log(7.0), 1e-9) << "eps " << eps;
    }
}

TEST(SmoothedCrossEntropy, ClosedFormHardTarget) {
    Tensor logits = Tensor::from_data({1, 3}, {10.0, 0.0, 0.0});
    std::vector<int> labels = {0};
    Tensor loss = cross_entropy_smoothed(logits, labels, 0.0);
    // -log softmax(o)_0 = log(1 + 2 e^-10)
    double expected = std::log1p(2.0 * std::exp(-10.0));
    EXPECT_NEAR(loss.item(), expected, 1e-12);
    EXPECT_NEAR(loss.item(), 9.079e-5, 1e-7);
}

TEST(SmoothedCrossEntropy, LossVanishesMonotonicallyWithMargin) {
    double prev = 1e300;
    for (double margin : {2.0, 5.0, 20.0, 100.0, 600.0}) {
        Tensor logits = Tensor::from_data({1, 3}, {margin, 0.0, 0.0});
        std::vector<int> labels = {0};
        double loss = cross_entropy_smoothed(logits, labels, 0.0).item();
        EXPECT_GE(loss, 0.0);
        EXPECT_LE(loss, prev);
        prev = loss;
    }
    EXPECT_LT(prev, 1e-12);
}

TEST(SmoothedCrossEntropy, LabelOutOfRangeRejected) {
    Tensor logits = Tensor::zeros({1, 3});
    EXPECT_THROW(cross_entropy_smoothed(logits, std::vector<int>{3}, 0.1), std::out_of_range);
    EXPECT_THROW(cross_entropy_smoothed(logits, std::vector<int>{-1}, 0.1), std::out_of_range);
}

TEST(SmoothedCrossEntropy, ZeroSmoothingMatchesPlainCrossEntropyFormula) {
    Rng rng(3);
    Tensor logits = rand_uniform({5, 4}, -2.0, 2.0, rng);
    std::vector<int> labels = {1, 0, 3, 2, 2};
    double loss = cross_entropy_smoothed(logits, labels, 0.0).item();
    // independent evaluation of Eq.-(10)-style mean negative log softmax
    double expected = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        double denom = 0.0;
        for (std::size_t v = 0; v < 4; ++v) denom += std::exp(logits.at({i, v}));
        expected += -std::log(std::exp(logits.at({i, static_cast<std::size_t>(labels[i])})) / denom);
    }
    expected /= 5.0;
    EXPECT_NEAR(loss, expected, 1e-12);
}

// ---------------------------------------------------------------------------
// AdamW

TEST(AdamW, ZeroGradZeroDecayLeavesParamsUntouched) {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    NamedParams params;
    params.emplace_back("w", Tensor::from_data({3}, {1.0, -2.0, 0.5}, true));
    std::vector<double> before = params[0].second.data();
    params[0].second.mutable_grad();  // allocated, all zeros
    AdamWState st;
    st.init(params);
    adamw_step(params, st, 1e-3, cfg);
    EXPECT_EQ(params[0].second.data(), before);
}

TEST(AdamW, FirstStepMatchesHandDerivation) {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    double lr = 2.5e-4;
    NamedParams params;
    params.emplace_back("w", Tensor::from_data({1}, {0.0}, true));
    params[0].second.mutable_grad()[0] = 1.0;
    AdamWState st;
    st.init(params);
    adamw_step(params, st, lr, cfg);
    double expected = -lr * 1.0 / (1.0 + cfg.eps_adam);
    EXPECT_NEAR(params[0].second.data()[0], expected, 1e-10);
}

TEST(AdamW, ZeroGradWithDecayIsGeometric) {
    TrainConfig cfg;  // weight_decay 0.01
    NamedParams params;
    params.emplace_back("w", Tensor::from_data({2}, {2.0, -3.0}, true));
    AdamWState st;
    st.init(params);
    double expected0 = 2.0, expected1 = -3.0;
    std::size_t total = 40;
    for (std::size_t step = 0; step < total; ++step) {
        for (auto& [n, t] : params) t.zero_grad();
        params[0].second.mutable_grad();  // zero gradient, still participating
        double lr_t = cosine_lr(step, total, 1e-2);
        adamw_step(params, st, lr_t, cfg);
        expected0 *= 1.0 - lr_t * cfg.weight_decay;
        expected1 *= 1.0 - lr_t * cfg.weight_decay;
    }
    EXPECT_NEAR(params[0].second.data()[0], expected0, 1e-10);
    EXPECT_NEAR(params[0].second.data()[1], expected1, 1e-10);
}

TEST(AdamW, ParamsWithoutGradAreSkippedEvenWithDecay) {
    TrainConfig cfg;  // decay 0.01 > 0
    NamedParams params;
    params.emplace_back("live", Tensor::from_data({1}, {1.0}, true));
    params.emplace_back("idle", Tensor::from_data({1}, {4.0}, true));
    params[0].second.mutable_grad()[0] = 0.7;
    AdamWState st;
    st.init(params);
    adamw_step(params, st, 1e-3, cfg);
    EXPECT_NE(params[0].second.data()[0], 1.0);
    EXPECT_EQ(params[1].second.data()[0], 4.0);  // bitwise untouched
}

TEST(AdamW, ClippedStepBoundsParameterNormGrowth) {
    // concentrated gradient: post-clip norm 1, so the step moves the
    // parameters by at most lr_t * clip_norm (plus decay shrinkage)
    TrainConfig cfg;
    double lr = 1e-3;
    NamedParams params;
    params.emplace_back("w", Tensor::from_data({4}, {0.3, -0.2, 0.1, 0.05}, true));
    auto& g = params[0].second.mutable_grad();
    g = {2.0, 0.0, 0.0, 0.0};
    double norm_before = 0.0;
    for (double x : params[0].second.data()) norm_before += x * x;
    norm_before = std::sqrt(norm_before);

    AdamWState st;
    st.init(params);
    clip_gradients(params, cfg.clip_norm);
    adamw_step(params, st, lr, cfg);

    double norm_after = 0.0;
    for (double x : params[0].second.data()) norm_after += x * x;
    norm_after = std::sqrt(norm_after);
    EXPECT_LE(norm_after, norm_before + lr * cfg.clip_norm + 1e-12);
}

// ---------------------------------------------------------------------------
// cosine schedule

TEST(CosineLr, EndpointsAndMidpoint) {
    double lr0 = 1e-4;
    EXPECT_EQ(cosine_lr(0, 100, lr0), lr0);
    EXPECT_EQ(cosine_lr(100, 100, lr0), 0.0);
    EXPECT_NEAR(cosine_lr(50, 100, lr0), lr0 / 2.0, 1e-15);
    EXPECT_EQ(cosine_lr(250, 100, lr0), 0.0);  // clamped past the end
}

TEST(CosineLr, MonotoneDecay) {
    double prev = 1e300;
    for (std::size_t s = 0; s <= 64; ++s) {
        double lr = cosine_lr(s, 64, 1.0);
        EXPECT_LT(lr, prev + 1e-18);
        prev = lr;
    }
}

// ---------------------------------------------------------------------------
// gradient clipping

TEST(ClipGradients, ScalesExactlyWhenAboveThreshold) {
    NamedParams params;
    params.emplace_back("a", Tensor::from_data({2}, {0.0, 0.0}, true));
    params.emplace_back("b", Tensor::from_data({2}, {0.0, 0.0}, true));
    params[0].second.mutable_grad() = {1.2, 0.0};
    params[1].second.mutable_grad() = {0.9, 1.2};  // global norm sqrt(1.44+0.81+1.44) ~ 1.923

    double pre = clip_gradients(params, 1.0);
    EXPECT_NEAR(pre, std::sqrt(1.44 + 0.81 + 1.44), 1e-12);
    double post = 0.0;
    for (auto& [n, t] : params)
        for (double g : t.grad()) post += g * g;
    EXPECT_NEAR(std::sqrt(post), 1.0, 1e-12);
}

TEST(ClipGradients, GlobalNormTwoHalvesEverything) {
    NamedParams params;
    params.emplace_back("a", Tensor::from_data({2}, {0.0, 0.0}, true));
    params[0].second.mutable_grad() = {2.0, 0.0};
    clip_gradients(params, 1.0);
    EXPECT_DOUBLE_EQ(params[0].second.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(params[0].second.grad()[1], 0.0);
}

TEST(ClipGradients, BelowThresholdUntouched) {
    NamedParams params;
    params.emplace_back("a", Tensor::from_data({2}, {0.0, 0.0}, true));
    params[0].second.mutable_grad() = {0.3, 0.4};  // norm 0.5
    double pre = clip_gradients(params, 1.0);
    EXPECT_DOUBLE_EQ(pre, 0.5);
    EXPECT_DOUBLE_EQ(params[0].second.grad()[0], 0.3);
    EXPECT_DOUBLE_EQ(params[0].second.grad()[1], 0.4);
}

TEST(ClipGradients, PostClipNormIsMinOfPreAndClip) {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        NamedParams params;
        params.emplace_back("a", Tensor::zeros({5}, true));
        params.emplace_back("b", Tensor::zeros({3}, true));
        for (auto& [n, t] : params)
            for (double& g : t.mutable_grad()) g = rng.uniform(-1.0, 1.0);
        double pre = clip_gradients(params, 1.0);
        double post = 0.0;
        for (auto& [n, t] : params)
            for (double g : t.grad()) post += g * g;
        EXPECT_NEAR(std::sqrt(post), std::min(pre, 1.0), 1e-12);
    }
}

// ---------------------------------------------------------------------------
// metrics

TEST(Metrics, PerfectPredictions) {
    std::vector<int> y = {0, 1, 2, 1, 0};
    Metrics m = compute_metrics(y, y, 3);
    EXPECT_DOUBLE_EQ(m.accuracy, 100.0);
    EXPECT_DOUBLE_EQ(m.macro_precision, 100.0);
    EXPECT_DOUBLE_EQ(m.macro_recall, 100.0);
    EXPECT_DOUBLE_EQ(m.macro_f1, 100.0);
}

TEST(Metrics, HandEnumeratedTwoClassCase) {
    std::vector<int> truth = {0, 0, 1};
    std::vector<int> pred = {0, 1, 1};
    Metrics m = compute_metrics(pred, truth, 2);
    EXPECT_NEAR(m.accuracy, 200.0 / 3.0, 0.05);
    EXPECT_NEAR(m.macro_precision, 75.0, 0.05);
    EXPECT_NEAR(m.macro_recall, 75.0, 0.05);
    EXPECT_NEAR(m.macro_f1, 200.0 / 3.0, 0.05);
}

TEST(Metrics, MatchesBruteForceRecount) {
    Rng rng(11);
    const std::size_t v = 7, n = 1000;
    std::vector<int> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
        pred[i] = static_cast<int>(rng.below(v));
        truth[i] = static_cast<int>(rng.below(v));
    }
    Metrics m = compute_metrics(pred, truth, v);

    // independent recount straight from the pair list
    double macro_f1 = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < n; ++i) {
            bool is_c_true = truth[i] == static_cast<int>(c);
            bool is_c_pred = pred[i] == static_cast<int>(c);
            if (is_c_true && is_c_pred) ++tp;
            if (!is_c_true && is_c_pred) ++fp;
            if (is_c_true && !is_c_pred) ++fn;
        }
        double f1 = (2 * tp + fp + fn) ? 100.0 * 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
        macro_f1 += f1;
    }
    macro_f1 /= v;
    EXPECT_DOUBLE_EQ(m.macro_f1, macro_f1);
}

TEST(Metrics, PermutationInvariant) {
    Rng rng(13);
    const std::size_t n = 200;
    std::vector<int> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
        pred[i] = static_cast<int>(rng.below(5));
        truth[i] = static_cast<int>(rng.below(5));
    }
    Metrics a = compute_metrics(pred, truth, 5);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<int> pred2(n), truth2(n);
    for (std::size_t i = 0; i < n; ++i) {
        pred2[i] = pred[perm[i]];
        truth2[i] = truth[perm[i]];
    }
    Metrics b = compute_metrics(pred2, truth2, 5);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(a.macro_precision, b.macro_precision);
    EXPECT_EQ(a.macro_recall, b.macro_recall);
    EXPECT_EQ(a.macro_f1, b.macro_f1);
    EXPECT_EQ(a.confusion, b.confusion);
}

TEST(Metrics, ConfusionRowSumsEqualSupportAndScoresInRange) {
    Rng rng(17);
    const std::size_t n = 300, v = 4;
    std::vector<int> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
        pred[i] = static_cast<int>(rng.below(v));
        truth[i] = static_cast<int>(rng.below(v));
    }
    Metrics m = compute_metrics(pred, truth, v);
    for (std::size_t c = 0; c < v; ++c) {
        std::size_t support = 0;
        for (std::size_t i = 0; i < n; ++i) support += truth[i] == static_cast<int>(c) ? 1 : 0;
        std::size_t row = std::accumulate(m.confusion[c].begin(), m.confusion[c].end(), std::size_t{0});
        EXPECT_EQ(row, support);
    }
    for (double s : {m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1}) {
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 100.0);
    }
    EXPECT_THROW(compute_metrics(std::vector<int>{}, std::vector<int>{}, 3), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// training loop

TEST(Train, LossAtInitNearLogV) {
    ModelConfig cfg = tiny_config();
    cfg.d = 64;  // default-scale width, matching the documented init scheme
    cfg.backbone_channels = 32;
    cfg.n_heads = 4;
    cfg.l_latent = 16;
    cfg.n_latent_layers = 2;
    cfg.n_stroke_layers = 2;
    HatModel model = build_model(cfg, 9);
    Dataset ds = tiny_dataset(4, 21);  // 40 samples, balanced

    std::vector<const GlyphImage*> images;
    std::vector<const StrokeSequence*> strokes;
    std::vector<int> labels;
    for (const Sample& s : ds.samples) {
        images.push_back(&s.image);
        strokes.push_back(&s.strokes);
        labels.push_back(s.label);
    }
    Tensor patches = pack_patches(images, cfg);
    StrokeBatch sb = pack_strokes(strokes);
    BatchView bv{&patches, &sb};
    ForwardContext ctx;
    ctx.training = true;
    Rng drop_rng(1);
    ctx.dropout_rng = &drop_rng;
    Tensor logits = forward_batch(bv, Mode::Both, model, ctx);
    double loss = cross_entropy_smoothed(logits, labels, 0.1).item();
    EXPECT_NEAR(loss, std::log(10.0), 0.15);
}

TEST(Train, ZeroLearningRateLeavesParametersBitwise) {
    HatModel model = build_model(tiny_config(), 31);
    Dataset ds = tiny_dataset(2, 33);
    TrainConfig cfg = quick_train(2);
    cfg.lr0 = 0.0;
    std::vector<std::vector<double>> before;
    for (auto& [n, t] : model.named_params()) before.push_back(t.data());
    train(model, ds, cfg);
    std::size_t i = 0;
    for (auto& [n, t] : model.named_params()) EXPECT_EQ(t.data(), before[i++]) << n;
}

TEST(Train, FixedSeedRunsAreBitwiseIdentical) {
    Dataset ds = tiny_dataset(2, 35);  // 20 samples
    TrainConfig cfg = quick_train(2);

    HatModel m1 = build_model(tiny_config(), 37);
    TrainResult r1 = train(m1, ds, cfg);
    HatModel m2 = build_model(tiny_config(), 37);
    TrainResult r2 = train(m2, ds, cfg);

    EXPECT_EQ(checkpoint_bytes(m1, cfg.mode), checkpoint_bytes(m2, cfg.mode));
    EXPECT_EQ(r1.best_checkpoint, r2.best_checkpoint);
    ASSERT_EQ(r1.epochs.size(), r2.epochs.size());
    for (std::size_t e = 0; e < r1.epochs.size(); ++e) {
        EXPECT_EQ(report_jsonl_line(r1.epochs[e]), report_jsonl_line(r2.epochs[e]));
    }
}

TEST(Train, StrokeModeLeavesImageBranchBitwise) {
    HatModel model = build_model(tiny_config(), 41);
    Dataset ds = tiny_dataset(2, 43);
    std::vector<std::pair<std::string, std::vector<double>>> before;
    for (auto& [n, t] : model.named_params())
        if (param_branch(n) == Branch::Image || param_branch(n) == Branch::CrossModal)
            before.emplace_back(n, t.data());
    TrainConfig cfg = quick_train(2, Mode::Stroke);
    train(model, ds, cfg);
    auto params = model.named_params();
    for (const auto& [name, data] : before) {
        for (auto& [n, t] : params)
            if (n == name) EXPECT_EQ(t.data(), data) << name;
    }
}

TEST(Train, FrozenBackboneUnchangedAfterStepWhileProjectionMoves) {
    ModelConfig cfg = tiny_config();
    cfg.backbone_frozen = true;
    HatModel model = build_model(cfg, 47);
    Dataset ds = tiny_dataset(2, 49);
    std::vector<double> backbone_before = model.patch_w.data();
    std::vector<double> proj_before = model.img_proj.data();
    TrainConfig tc = quick_train(1, Mode::Image);
    train(model, ds, tc);
    EXPECT_EQ(model.patch_w.data(), backbone_before);
    EXPECT_NE(model.img_proj.data(), proj_before);
}

TEST(Train, ModeMismatchOnStrokeOnlyDataset) {
    Dataset ds = tiny_dataset(2, 51);
    for (Sample& s : ds.samples) s.image = GlyphImage{};  // strip images
    ds.image_side = 0;
    HatModel model = build_model(tiny_config(), 53);
    TrainConfig cfg = quick_train(1, Mode::Both);
    try {
        train(model, ds, cfg);
        FAIL() << "expected mode mismatch";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("both"), std::string::npos) << e.what();
    }
    TrainConfig ok = quick_train(1, Mode::Stroke);
    EXPECT_NO_THROW(train(model, ds, ok));
}

TEST(Train, ReportHasOneLinePerEpochWithExpectedKeys) {
    HatModel model = build_model(tiny_config(), 55);
    Dataset ds = tiny_dataset(2, 57);
    TrainConfig cfg = quick_train(3);
    TrainResult r = train(model, ds, cfg);
    ASSERT_EQ(r.epochs.size(), 3u);
    for (std::size_t e = 0; e < 3; ++e) {
        std::string line = report_jsonl_line(r.epochs[e]);
        EXPECT_NE(line.find("\"epoch\": " + std::to_string(e + 1)), std::string::npos);
        for (const char* key : {"train_loss", "val_acc", "val_macro_p", "val_macro_r", "val_macro_f1", "lr"})
            EXPECT_NE(line.find(key), std::string::npos) << key;
    }
    EXPECT_GE(r.best_epoch, 1u);
    EXPECT_FALSE(r.best_checkpoint.empty());
}

TEST(Train, NonFiniteLossAbortsWithStepDiagnostic) {
    HatModel model = build_model(tiny_config(), 59);
    // poison one parameter so the first forward produces NaN
    model.head_b.data()[0] = std::nan("");
    Dataset ds = tiny_dataset(2, 61);
    TrainConfig cfg = quick_train(1);
    try {
        train(model, ds, cfg);
        FAIL() << "expected abort";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
    }
}

// ---------------------------------------------------------------------------
// modality dropout protocol

TEST(ModalityDropout, ThreeRowsFixedOrderWithZeroBaselineDelta) {
    HatModel model = build_model(tiny_config(), 63);
    Dataset ds = tiny_dataset(10, 65);
    auto rows = evaluate_modality_dropout(model, ds, Split::Test);
    EXPECT_EQ(rows[0].mode, Mode::Both);
    EXPECT_EQ(rows[1].mode, Mode::Image);
    EXPECT_EQ(rows[2].mode, Mode::Stroke);
    EXPECT_EQ(rows[0].delta_acc, 0.0);
    for (const auto& row : rows) {
        EXPECT_GE(row.metrics.accuracy, 0.0);
        EXPECT_LE(row.metrics.accuracy, 100.0);
    }
}

TEST(Evaluate, DeterministicAcrossCalls) {
    HatModel model = build_model(tiny_config(), 67);
    Dataset ds = tiny_dataset(10, 69);
    Metrics a = evaluate(model, ds, Split::Val, Mode::Both);
    Metrics b = evaluate(model, ds, Split::Val, Mode::Both);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(a.confusion, b.confusion);
}
