#include "hat/model.hpp"

#include <cmath>
#include <stdexcept>

#include "hat/rng.hpp"

namespace hat {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr double kLnEps = 1e-5;
constexpr double kMaskNegInf = -1e30;

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

void ModelConfig::validate() const {
    require(d >= 8 && d % 8 == 0, "model.d must be a positive multiple of 8, got " + std::to_string(d));
    require(n_heads >= 1, "model.n_heads must be >= 1");
    require(d % (2 * n_heads) == 0,
            "model.d (" + std::to_string(d) + ") must be divisible by 2*n_heads (" +
                std::to_string(2 * n_heads) + ") for per-head rotary pairs");
    require(l_latent >= 1, "model.l_latent must be >= 1");
    require(n_latent_layers >= 1, "model.n_latent_layers must be >= 1");
    require(n_stroke_layers >= 1, "model.n_stroke_layers must be >= 1");
    require(vocab >= 2, "model.vocab must be >= 2");
    require(dropout_p >= 0.0 && dropout_p < 1.0, "model.dropout_p must be in [0, 1)");
    require(patch_grid >= 1, "model.patch_grid must be >= 1");
    require(image_side >= patch_grid && image_side % patch_grid == 0,
            "model.image_side (" + std::to_string(image_side) + ") must be a positive multiple of patch_grid (" +
                std::to_string(patch_grid) + ")");
    require(backbone_channels >= 1 && backbone_channels % n_heads == 0,
            "model.backbone_channels must be a positive multiple of n_heads");
    require(backbone_layers >= 1 && backbone_layers <= 2, "model.backbone_layers must be 1 or 2");
    require(rope_base > 0.0, "model.rope_base must be positive");
}

// ---------------------------------------------------------------------------
// construction

namespace {

Tensor proj_init(Shape shape, Rng& rng, bool trainable = true, std::size_t fan_in = 0) {
    if (fan_in == 0) fan_in = shape[0];
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rand_uniform(std::move(shape), -bound, bound, rng, trainable);
}

LayerNormParams make_ln(std::size_t f, bool trainable = true) {
    return {Tensor::full({f}, 1.0, trainable), Tensor::zeros({f}, trainable)};
}

MhaParams make_mha(std::size_t d, Rng& rng, bool trainable = true) {
    MhaParams p;
    p.wq = proj_init({d, d}, rng, trainable);
    p.bq = Tensor::zeros({d}, trainable);
    p.wk = proj_init({d, d}, rng, trainable);
    p.bk = Tensor::zeros({d}, trainable);
    p.wv = proj_init({d, d}, rng, trainable);
    p.bv = Tensor::zeros({d}, trainable);
    p.wo = proj_init({d, d}, rng, trainable);
    p.bo = Tensor::zeros({d}, trainable);
    return p;
}

TransformerLayerParams make_layer(std::size_t d, Rng& rng, bool trainable = true) {
    TransformerLayerParams p;
    p.ln1 = make_ln(d, trainable);
    p.attn = make_mha(d, rng, trainable);
    p.ln2 = make_ln(d, trainable);
    p.ffn_w1 = proj_init({d, 4 * d}, rng, trainable);
    p.ffn_b1 = Tensor::zeros({4 * d}, trainable);
    p.ffn_w2 = proj_init({4 * d, d}, rng, trainable);
    p.ffn_b2 = Tensor::zeros({d}, trainable);
    return p;
}

void collect_ln(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                const LayerNormParams& p) {
    out.emplace_back(prefix + ".g", p.gain);
    out.emplace_back(prefix + ".b", p.bias);
}

void collect_mha(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                 const MhaParams& p) {
    out.emplace_back(prefix + ".wq", p.wq);
    out.emplace_back(prefix + ".bq", p.bq);
    out.emplace_back(prefix + ".wk", p.wk);
    out.emplace_back(prefix + ".bk", p.bk);
    out.emplace_back(prefix + ".wv", p.wv);
    out.emplace_back(prefix + ".bv", p.bv);
    out.emplace_back(prefix + ".wo", p.wo);
    out.emplace_back(prefix + ".bo", p.bo);
}

void collect_layer(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                   const TransformerLayerParams& p) {
    collect_ln(out, prefix + ".ln1", p.ln1);
    collect_mha(out, prefix + ".attn", p.attn);
    collect_ln(out, prefix + ".ln2", p.ln2);
    out.emplace_back(prefix + ".ffn.w1", p.ffn_w1);
    out.emplace_back(prefix + ".ffn.b1", p.ffn_b1);
    out.emplace_back(prefix + ".ffn.w2", p.ffn_w2);
    out.emplace_back(prefix + ".ffn.b2", p.ffn_b2);
}

}  // namespace

HatModel build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "init", 0));
    HatModel m;
    m.cfg = cfg;

    const bool bb = !cfg.backbone_frozen;  // backbone trainability
    m.patch_w = proj_init({cfg.patch_pixels(), cfg.backbone_channels}, rng, bb);
    m.patch_b = Tensor::zeros({cfg.backbone_channels}, bb);
    for (std::size_t i = 0; i < cfg.backbone_layers; ++i)
        m.backbone_blocks.push_back(make_layer(cfg.backbone_channels, rng, bb));

    m.img_proj = proj_init({cfg.backbone_channels, cfg.d}, rng);
    m.latents = rand_normal({cfg.l_latent, cfg.d}, 0.0, 0.02, rng, true);
    for (std::size_t i = 0; i < cfg.n_latent_layers; ++i)
        m.latent_blocks.push_back({make_mha(cfg.d, rng), make_layer(cfg.d, rng)});
    m.latent_out_ln = make_ln(cfg.d);

    m.pen_table = rand_normal({2, cfg.pen_width()}, 0.0, 0.02, rng, true);
    m.stroke_proj = proj_init({2 + cfg.pen_width(), cfg.d}, rng);
    m.stroke_bn.gain = Tensor::full({cfg.d}, 1.0, true);
    m.stroke_bn.bias = Tensor::zeros({cfg.d}, true);
    m.stroke_bn.running_mean.assign(cfg.d, 0.0);
    m.stroke_bn.running_var.assign(cfg.d, 1.0);

    m.rope_pair_angles.resize(cfg.d / 2);
    for (std::size_t j = 0; j < cfg.d / 2; ++j)
        m.rope_pair_angles[j] =
            std::pow(cfg.rope_base, -2.0 * static_cast<double>(j) / static_cast<double>(cfg.d));

    for (std::size_t i = 0; i < cfg.n_stroke_layers; ++i)
        m.stroke_blocks.push_back(make_layer(cfg.d, rng));
    m.refine_ln = make_ln(cfg.d);
    m.refine_w1 = proj_init({cfg.d, 4 * cfg.d}, rng);
    m.refine_b1 = Tensor::zeros({4 * cfg.d}, true);
    m.refine_w2 = proj_init({4 * cfg.d, cfg.d}, rng);
    m.refine_b2 = Tensor::zeros({cfg.d}, true);

    m.cross_modal = make_mha(cfg.d, rng);
    m.cross_modal_layer = make_layer(cfg.d, rng);
    m.pool_w1 = proj_init({cfg.d, cfg.d}, rng);
    m.pool_w2 = proj_init({cfg.d}, rng);
    // stored [V, d] and applied transposed, so fan-in is d
    m.head_w = proj_init({cfg.vocab, cfg.d}, rng, true, cfg.d);
    m.head_b = Tensor::zeros({cfg.vocab}, true);
    return m;
}

std::vector<std::pair<std::string, Tensor>> HatModel::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("backbone.patch.w", patch_w);
    out.emplace_back("backbone.patch.b", patch_b);
    for (std::size_t i = 0; i < backbone_blocks.size(); ++i)
        collect_layer(out, "backbone.mix" + std::to_string(i), backbone_blocks[i]);
    out.emplace_back("img_proj.w", img_proj);
    out.emplace_back("latents", latents);
    for (std::size_t i = 0; i < latent_blocks.size(); ++i) {
        collect_mha(out, "latent" + std::to_string(i) + ".cross", latent_blocks[i].cross);
        collect_layer(out, "latent" + std::to_string(i) + ".layer", latent_blocks[i].layer);
    }
    collect_ln(out, "latent_out_ln", latent_out_ln);
    out.emplace_back("pen_table", pen_table);
    out.emplace_back("stroke_proj.w", stroke_proj);
    out.emplace_back("stroke_bn.g", stroke_bn.gain);
    out.emplace_back("stroke_bn.b", stroke_bn.bias);
    for (std::size_t i = 0; i < stroke_blocks.size(); ++i)
        collect_layer(out, "temporal" + std::to_string(i), stroke_blocks[i]);
    collect_ln(out, "refine.ln", refine_ln);
    out.emplace_back("refine.w1", refine_w1);
    out.emplace_back("refine.b1", refine_b1);
    out.emplace_back("refine.w2", refine_w2);
    out.emplace_back("refine.b2", refine_b2);
    collect_mha(out, "cross_modal.attn", cross_modal);
    collect_layer(out, "cross_modal.layer", cross_modal_layer);
    out.emplace_back("pool.w1", pool_w1);
    out.emplace_back("pool.w2", pool_w2);
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    return out;
}

std::vector<std::pair<std::string, Tensor>> HatModel::named_params() const {
    return const_cast<HatModel*>(this)->named_params();
}

Branch param_branch(const std::string& name) {
    if (name.starts_with("backbone.") || name.starts_with("img_proj") || name.starts_with("latent"))
        return Branch::Image;
    if (name.starts_with("pen_table") || name.starts_with("stroke_") || name.starts_with("temporal") ||
        name.starts_with("refine."))
        return Branch::Stroke;
    if (name.starts_with("cross_modal.")) return Branch::CrossModal;
    return Branch::Shared;
}

// ---------------------------------------------------------------------------
// packing

bool TokenMask::all_valid() const {
    for (std::uint8_t v : valid)
        if (!v) return false;
    return true;
}

StrokeBatch pack_strokes(const std::vector<const StrokeSequence*>& seqs) {
    if (seqs.empty()) throw std::invalid_argument("pack_strokes: empty batch");
    StrokeBatch sb;
    sb.batch = seqs.size();
    for (const StrokeSequence* s : seqs) {
        if (!s || s->points.empty()) throw std::invalid_argument("pack_strokes: stroke sequence must have T >= 1");
        sb.len = std::max(sb.len, s->points.size());
    }
    std::vector<double> coords(sb.batch * sb.len * 2, 0.0);
    sb.pen.assign(sb.batch * sb.len, 0);  // pads are pen-up zero points
    sb.mask.batch = sb.batch;
    sb.mask.len = sb.len;
    sb.mask.valid.assign(sb.batch * sb.len, 0);
    for (std::size_t b = 0; b < sb.batch; ++b) {
        const auto& pts = seqs[b]->points;
        for (std::size_t t = 0; t < pts.size(); ++t) {
            if (pts[t].pen != 0 && pts[t].pen != 1)
                throw std::invalid_argument("pack_strokes: pen value " + std::to_string(pts[t].pen) +
                                            " outside {0,1}");
            coords[(b * sb.len + t) * 2 + 0] = pts[t].x;
            coords[(b * sb.len + t) * 2 + 1] = pts[t].y;
            sb.pen[b * sb.len + t] = pts[t].pen;
            sb.mask.valid[b * sb.len + t] = 1;
        }
    }
    sb.coords = Tensor::from_data({sb.batch, sb.len, 2}, std::move(coords));
    return sb;
}

Tensor pack_patches(const std::vector<const GlyphImage*>& images, const ModelConfig& cfg) {
    if (images.empty()) throw std::invalid_argument("pack_patches: empty batch");
    const std::size_t n = cfg.patch_count();
    const std::size_t ps = cfg.patch_side();
    const std::size_t pp = cfg.patch_pixels();
    std::vector<double> out(images.size() * n * pp);
    for (std::size_t b = 0; b < images.size(); ++b) {
        const GlyphImage* img = images[b];
        if (!img || img->side != cfg.image_side)
            throw std::invalid_argument("pack_patches: image side " +
                                        std::to_string(img ? img->side : 0) + " does not match configured side " +
                                        std::to_string(cfg.image_side));
        for (std::size_t gy = 0; gy < cfg.patch_grid; ++gy)
            for (std::size_t gx = 0; gx < cfg.patch_grid; ++gx) {
                double* dst = out.data() + (b * n + gy * cfg.patch_grid + gx) * pp;
                for (std::size_t py = 0; py < ps; ++py)
                    for (std::size_t px = 0; px < ps; ++px)
                        dst[py * ps + px] = img->at(gy * ps + py, gx * ps + px);
            }
    }
    return Tensor::from_data({images.size(), n, pp}, std::move(out));
}

// ---------------------------------------------------------------------------
// attention

namespace {

// Adapts [T,d] inputs to the batched [1,T,d] layout and back.
struct Unbatched {
    bool squeeze = false;
    Tensor operator()(const Tensor& x) {
        if (x.rank() == 2) {
            squeeze = true;
            return x.reshape({1, x.dim(0), x.dim(1)});
        }
        return x;
    }
    Tensor restore(const Tensor& y) const {
        if (squeeze) return y.reshape({y.dim(1), y.dim(2)});
        return y;
    }
};

}  // namespace

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const MhaParams& p,
                            std::size_t n_heads, double dropout_p, const TokenMask* key_mask,
                            const ForwardContext& ctx, const char* trace_tag) {
    Unbatched uq, uk;
    Tensor q_in = uq(queries);
    Tensor kv_in = uk(keys_values);

    Tensor q = linear(q_in, p.wq, p.bq);
    Tensor k = linear(kv_in, p.wk, p.bk);
    Tensor v = linear(kv_in, p.wv, p.bv);

    std::span<const std::uint8_t> key_valid;
    if (key_mask && !key_mask->all_valid()) key_valid = key_mask->valid;
    Tensor probs;
    Tensor mixed = multi_head_attention_core(q, k, v, n_heads, key_valid, ctx.trace ? &probs : nullptr);
    if (ctx.trace) ctx.trace->attention.emplace_back(trace_tag, probs);

    Tensor out = dropout(linear(mixed, p.wo, p.bo), dropout_p, ctx.training, ctx.dropout_rng);
    return uq.restore(out);
}

Tensor transformer_layer(const Tensor& x, const TransformerLayerParams& p, std::size_t n_heads,
                         double dropout_p, const TokenMask* key_mask, const ForwardContext& ctx,
                         const char* trace_tag) {
    Unbatched ub;
    Tensor h = ub(x);
    Tensor normed = layer_norm(h, p.ln1.gain, p.ln1.bias, kLnEps);
    h = add(h, multi_head_attention(normed, normed, p.attn, n_heads, dropout_p, key_mask, ctx, trace_tag));
    Tensor normed2 = layer_norm(h, p.ln2.gain, p.ln2.bias, kLnEps);
    Tensor ffn = linear(normed2, p.ffn_w1, p.ffn_b1).gelu();
    ffn = linear(ffn, p.ffn_w2, p.ffn_b2);
    ffn = dropout(ffn, dropout_p, ctx.training, ctx.dropout_rng);
    h = add(h, ffn);
    return ub.restore(h);
}

// ---------------------------------------------------------------------------
// blocks

Tensor encode_image_patches(const Tensor& patches, const HatModel& m, const ForwardContext& ctx) {
    Unbatched ub;
    Tensor x = ub(patches);
    if (x.dim(1) != m.cfg.patch_count() || x.dim(2) != m.cfg.patch_pixels())
        throw std::invalid_argument("encode_image_patches: expected [B," + std::to_string(m.cfg.patch_count()) +
                                    "," + std::to_string(m.cfg.patch_pixels()) + "], got " + shape_str(patches.shape()));
    Tensor tokens = linear(x, m.patch_w, m.patch_b);
    for (const auto& layer : m.backbone_blocks)
        tokens = transformer_layer(tokens, layer, m.cfg.n_heads, m.cfg.dropout_p, nullptr, ctx, "backbone");
    Tensor ep = matmul(tokens, m.img_proj);
    return ub.restore(ep);
}

Tensor latent_cross_attend(const Tensor& patch_tokens, const HatModel& m, const ForwardContext& ctx) {
    Unbatched ub;
    Tensor ep = ub(patch_tokens);
    std::size_t b = ep.dim(0);
    Tensor z = broadcast_batch(m.latents, b);
    for (const auto& block : m.latent_blocks) {
        Tensor queried = multi_head_attention(z, ep, block.cross, m.cfg.n_heads, m.cfg.dropout_p,
                                              nullptr, ctx, "latent_cross");
        z = transformer_layer(add(z, queried), block.layer, m.cfg.n_heads, m.cfg.dropout_p, nullptr,
                              ctx, "latent_self");
    }
    z = layer_norm(z, m.latent_out_ln.gain, m.latent_out_ln.bias, kLnEps);
    return ub.restore(z);
}

Tensor encode_strokes(const StrokeBatch& sb, HatModel& m, const ForwardContext& ctx) {
    std::size_t rows = sb.batch * sb.len;
    Tensor pen_vecs = embedding_lookup(m.pen_table, sb.pen);
    Tensor per_point = concat(sb.coords.reshape({rows, 2}), pen_vecs, 1);
    Tensor projected = matmul(per_point, m.stroke_proj);
    Tensor normed = batch_norm(projected, m.stroke_bn.gain, m.stroke_bn.bias, m.stroke_bn.running_mean,
                               m.stroke_bn.running_var, kBnEps, kBnMomentum, ctx.training, sb.mask.valid);
    Tensor dropped = dropout(normed, m.cfg.dropout_p, ctx.training, ctx.dropout_rng);
    return dropped.reshape({sb.batch, sb.len, m.cfg.d});
}

Tensor apply_rope(const Tensor& tokens, std::span<const double> pair_angles) {
    return rope(tokens, pair_angles);
}

Tensor temporal_transform(const Tensor& tokens, const TokenMask* mask, const HatModel& m,
                          const ForwardContext& ctx) {
    Unbatched ub;
    Tensor h = ub(tokens);
    for (const auto& layer : m.stroke_blocks)
        h = transformer_layer(h, layer, m.cfg.n_heads, m.cfg.dropout_p, mask, ctx, "temporal");
    Tensor normed = layer_norm(h, m.refine_ln.gain, m.refine_ln.bias, kLnEps);
    Tensor refined = linear(normed, m.refine_w1, m.refine_b1).gelu();
    refined = linear(refined, m.refine_w2, m.refine_b2);
    return ub.restore(add(h, refined));
}

Tensor cross_modal_query(const Tensor& stroke_tokens, const Tensor& latent_tokens, const TokenMask* mask,
                         const HatModel& m, const ForwardContext& ctx) {
    Unbatched us, uz;
    Tensor es = us(stroke_tokens);
    Tensor z = uz(latent_tokens);
    Tensor queried = multi_head_attention(es, z, m.cross_modal, m.cfg.n_heads, m.cfg.dropout_p,
                                          nullptr, ctx, "cross_modal");
    Tensor fused = transformer_layer(add(es, queried), m.cross_modal_layer, m.cfg.n_heads,
                                     m.cfg.dropout_p, mask, ctx, "cross_modal_self");
    return us.restore(fused);
}

Tensor attention_pool(const Tensor& tokens, const TokenMask* mask, const HatModel& m,
                      const ForwardContext& ctx) {
    bool single = tokens.rank() == 2;
    Unbatched ub;
    Tensor tk = ub(tokens);
    std::size_t b = tk.dim(0), nt = tk.dim(1), d = tk.dim(2);

    Tensor hidden = matmul(tk, m.pool_w1.transpose(0, 1)).tanh();
    Tensor scores = matmul(hidden, m.pool_w2.reshape({d, 1})).reshape({b, nt});
    if (mask && !mask->all_valid()) {
        std::vector<double> add_mask(b * nt, 0.0);
        for (std::size_t i = 0; i < b * nt; ++i)
            if (!mask->valid[i]) add_mask[i] = kMaskNegInf;
        scores = add(scores, Tensor::from_data({b, nt}, std::move(add_mask)));
    }
    Tensor alpha = softmax(scores, -1);
    if (ctx.trace) ctx.trace->pool_weights.emplace_back("pool", alpha);

    Tensor pooled = matmul(alpha.reshape({b, std::size_t{1}, nt}), tk).reshape({b, d});
    if (single) return pooled.reshape({d});
    return pooled;
}

Tensor classify(const Tensor& pooled, const HatModel& m) {
    bool single = pooled.rank() == 1;
    Tensor g = single ? pooled.reshape({1, pooled.dim(0)}) : pooled;
    Tensor logits = linear(g, m.head_w.transpose(0, 1), m.head_b);
    if (single) return logits.reshape({m.cfg.vocab});
    return logits;
}

Tensor encode_image_patches(const GlyphImage& img, const HatModel& m, const ForwardContext& ctx) {
    Tensor patches = pack_patches({&img}, m.cfg);
    return encode_image_patches(patches.reshape({m.cfg.patch_count(), m.cfg.patch_pixels()}), m, ctx);
}

Tensor encode_strokes(const StrokeSequence& s, HatModel& m, const ForwardContext& ctx) {
    StrokeBatch sb = pack_strokes({&s});
    return encode_strokes(sb, m, ctx).reshape({sb.len, m.cfg.d});
}

// ---------------------------------------------------------------------------
// full forward

Tensor forward_batch(const BatchView& input, Mode mode, HatModel& m, const ForwardContext& ctx) {
    if (mode != Mode::Stroke && input.patches == nullptr)
        throw std::invalid_argument(std::string("forward: mode ") + to_string(mode) +
                                    " requires the image modality, which is missing");
    if (mode != Mode::Image && input.strokes == nullptr)
        throw std::invalid_argument(std::string("forward: mode ") + to_string(mode) +
                                    " requires the stroke modality, which is missing");

    Tensor z;
    if (mode != Mode::Stroke) {
        Tensor ep = encode_image_patches(*input.patches, m, ctx);
        z = latent_cross_attend(ep, m, ctx);
    }
    Tensor e_stroke;
    const TokenMask* mask = nullptr;
    if (mode != Mode::Image) {
        mask = &input.strokes->mask;
        Tensor es = encode_strokes(*input.strokes, m, ctx);
        Tensor rotated = apply_rope(es, m.rope_pair_angles);
        e_stroke = temporal_transform(rotated, mask, m, ctx);
    }

    Tensor pooled;
    switch (mode) {
        case Mode::Image:
            pooled = attention_pool(z, nullptr, m, ctx);
            break;
        case Mode::Stroke:
            pooled = attention_pool(e_stroke, mask, m, ctx);
            break;
        case Mode::Both:
            if (m.cfg.fusion_level == FusionLevel::Early) {
                Tensor fused = cross_modal_query(e_stroke, z, mask, m, ctx);
                pooled = attention_pool(fused, mask, m, ctx);
            } else {
                pooled = add(attention_pool(z, nullptr, m, ctx), attention_pool(e_stroke, mask, m, ctx));
            }
            break;
    }
    return classify(pooled, m);
}

Tensor forward(const SampleView& sample, Mode mode, HatModel& m, const ForwardContext& ctx) {
    BatchView bv;
    Tensor patches;
    StrokeBatch sb;
    if (sample.image != nullptr && mode != Mode::Stroke) {
        patches = pack_patches({sample.image}, m.cfg);
        bv.patches = &patches;
    }
    if (sample.strokes != nullptr && mode != Mode::Image) {
        sb = pack_strokes({sample.strokes});
        bv.strokes = &sb;
    }
    Tensor logits = forward_batch(bv, mode, m, ctx);
    return logits.reshape({m.cfg.vocab});
}

}  // namespace hat
