#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hat/tensor.hpp"
#include "hat/types.hpp"

namespace hat {

class Rng;

struct ModelConfig {
    std::size_t d = 64;               // shared token width
    std::size_t l_latent = 16;        // learnable latent tokens
    std::size_t n_latent_layers = 2;  // latent cross-attention depth
    std::size_t n_stroke_layers = 2;  // temporal transformer depth
    std::size_t n_heads = 4;
    std::size_t vocab = 10;
    double dropout_p = 0.1;
    FusionLevel fusion_level = FusionLevel::Early;
    bool backbone_frozen = false;
    std::size_t patch_grid = 7;          // backbone output grid side
    std::size_t backbone_channels = 32;  // backbone feature channels
    std::size_t backbone_layers = 1;     // mixing layers after patchify
    std::size_t image_side = 56;
    double rope_base = 10000.0;

    void validate() const;  // throws invalid_argument with the offending field

    std::size_t patch_count() const { return patch_grid * patch_grid; }
    std::size_t patch_side() const { return image_side / patch_grid; }
    std::size_t patch_pixels() const { return patch_side() * patch_side(); }
    std::size_t pen_width() const { return d / 8; }
};

struct LayerNormParams {
    Tensor gain, bias;
};

struct MhaParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct TransformerLayerParams {
    LayerNormParams ln1;
    MhaParams attn;
    LayerNormParams ln2;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct LatentBlockParams {
    MhaParams cross;
    TransformerLayerParams layer;
};

struct BatchNormState {
    Tensor gain, bias;
    std::vector<double> running_mean, running_var;
};

struct HatModel {
    ModelConfig cfg;

    // image branch
    Tensor patch_w, patch_b;  // patchify projection
    std::vector<TransformerLayerParams> backbone_blocks;
    Tensor img_proj;  // backbone_channels -> d
    Tensor latents;   // [L, d]
    std::vector<LatentBlockParams> latent_blocks;
    LayerNormParams latent_out_ln;

    // stroke branch
    Tensor pen_table;    // [2, d/8]
    Tensor stroke_proj;  // [2 + d/8, d]
    BatchNormState stroke_bn;
    std::vector<double> rope_pair_angles;  // d/2, derived from cfg
    std::vector<TransformerLayerParams> stroke_blocks;
    LayerNormParams refine_ln;
    Tensor refine_w1, refine_b1, refine_w2, refine_b2;

    // fusion + head
    MhaParams cross_modal;
    TransformerLayerParams cross_modal_layer;
    Tensor pool_w1, pool_w2;  // [d,d], [d]
    Tensor head_w, head_b;    // [V,d], [V]

    // Parameters in a fixed order; names are stable and used by the
    // checkpoint format and the optimizer.
    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<std::pair<std::string, Tensor>> named_params() const;
};

enum class Branch { Image, Stroke, CrossModal, Shared };
Branch param_branch(const std::string& name);

HatModel build_model(const ModelConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// forward machinery

// Validity flags for padded token positions, row-major [batch, len].
struct TokenMask {
    std::size_t batch = 0, len = 0;
    std::vector<std::uint8_t> valid;

    bool all_valid() const;
};

struct ForwardTrace {
    // post-softmax attention tensors [B*h, Tq, Tk], tagged by site
    std::vector<std::pair<std::string, Tensor>> attention;
    // pooling weights [B, Nt]
    std::vector<std::pair<std::string, Tensor>> pool_weights;
};

struct ForwardContext {
    bool training = false;
    Rng* dropout_rng = nullptr;
    ForwardTrace* trace = nullptr;
};

// Padded batch of stroke sequences.
struct StrokeBatch {
    std::size_t batch = 0, len = 0;
    Tensor coords;         // [B, len, 2], constant
    std::vector<int> pen;  // B*len
    TokenMask mask;
};

StrokeBatch pack_strokes(const std::vector<const StrokeSequence*>& seqs);
// [B, N, patch_pixels], constant; rejects images of the wrong side
Tensor pack_patches(const std::vector<const GlyphImage*>& images, const ModelConfig& cfg);

// Core attention; queries [B,Tq,d] (or [Tq,d]), keys/values [B,Tk,d].
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const MhaParams& p,
                            std::size_t n_heads, double dropout_p, const TokenMask* key_mask,
                            const ForwardContext& ctx, const char* trace_tag);
// Pre-norm: x + MHA(LN(x)) self-attention, then x + FFN(LN(x)), FFN width 4d.
Tensor transformer_layer(const Tensor& x, const TransformerLayerParams& p, std::size_t n_heads,
                         double dropout_p, const TokenMask* key_mask, const ForwardContext& ctx,
                         const char* trace_tag);

// Blocks accept [B, ...] inputs or the unbatched per-sample shapes from the
// matching overloads below.
Tensor encode_image_patches(const Tensor& patches, const HatModel& m, const ForwardContext& ctx);
Tensor latent_cross_attend(const Tensor& patch_tokens, const HatModel& m, const ForwardContext& ctx);
Tensor encode_strokes(const StrokeBatch& sb, HatModel& m, const ForwardContext& ctx);
Tensor apply_rope(const Tensor& tokens, std::span<const double> pair_angles);
Tensor temporal_transform(const Tensor& tokens, const TokenMask* mask, const HatModel& m,
                          const ForwardContext& ctx);
Tensor cross_modal_query(const Tensor& stroke_tokens, const Tensor& latent_tokens, const TokenMask* mask,
                         const HatModel& m, const ForwardContext& ctx);
Tensor attention_pool(const Tensor& tokens, const TokenMask* mask, const HatModel& m,
                      const ForwardContext& ctx);
Tensor classify(const Tensor& pooled, const HatModel& m);

// per-sample conveniences
Tensor encode_image_patches(const GlyphImage& img, const HatModel& m, const ForwardContext& ctx);
Tensor encode_strokes(const StrokeSequence& s, HatModel& m, const ForwardContext& ctx);

struct BatchView {
    const Tensor* patches = nullptr;      // [B, N, patch_pixels]
    const StrokeBatch* strokes = nullptr;
};

struct SampleView {
    const GlyphImage* image = nullptr;
    const StrokeSequence* strokes = nullptr;
};

// Mode-dispatched full forward pass; returns logits [B, V] / [V].
Tensor forward_batch(const BatchView& input, Mode mode, HatModel& m, const ForwardContext& ctx);
Tensor forward(const SampleView& sample, Mode mode, HatModel& m, const ForwardContext& ctx);

}  // namespace hat
