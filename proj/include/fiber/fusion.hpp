#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fiber/nn.hpp"
#include "fiber/tensor.hpp"

namespace fiber {

// ---------------------------------------------------------------------------
// The fiber architecture: a windowed-attention image backbone and a
// transformer text backbone whose top M layers exchange information through
// cross-attention inserted *inside* the backbones. A scalar gate per inserted
// block (initialized to 0) lets the fused model start exactly equal to the
// plain dual encoder. Three fusion strategies are supported for ablation.
// ---------------------------------------------------------------------------

enum class Strategy { MergedAttention, CoAttentionUngated, CoAttentionGated };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);  // ConfigError on unknown names

struct FusionConfig {
    Strategy strategy = Strategy::CoAttentionGated;
    int64_t fused_layers = 2;  // M: how many top layers of each backbone fuse

    // Text backbone: token + learned position embeddings, pre-norm blocks.
    int64_t text_depth = 6;
    int64_t text_width = 128;
    int64_t max_tokens = 32;
    int64_t vocab_size = 40;

    // Image backbone: 64x64 pixels, patch embedding, windowed-attention
    // stages with patch merging between them (width doubles per stage).
    int64_t image_size = 64;
    int64_t patch = 4;
    std::vector<int64_t> stage_depths{2, 2, 2};
    std::vector<int64_t> stage_widths{32, 64, 128};
    int64_t window = 4;

    int64_t heads = 4;       // all attention blocks
    int64_t embed_dim = 64;  // shared contrastive space for pooled embeddings
    int64_t fpn_width = 64;  // detection pyramid width
    double alpha_init = 0.0;
    Dtype dtype = Dtype::F32;
};

// Throws ConfigError when the pieces cannot form a model: M larger than the
// backbone tops, mismatched stage lists, widths indivisible by heads, a
// non-square patch grid, or merged attention at a stage whose grid is wider
// than one window.
void validate_config(const FusionConfig& cfg);

// One pre-norm transformer block: x += Att(LN(x)); x += FFN(LN(x)).
struct Block {
    Norm n1;
    AttentionParams attn;
    Norm n2;
    Ffn ffn;
};

// Cross-attention inserted into one backbone block (co-attention
// strategies): queries from the block's self-attention output (normalized),
// keys/values from the other modality's raw stream. `alpha` is the scalar
// gate; undefined for the ungated variant.
struct CrossBlock {
    Norm norm;
    AttentionParams attn;
    Tensor alpha;
};

// Extra key/value projections for the merged-attention strategy: the block's
// own attention supplies q/k/v/o for its own tokens, these supply k/v for the
// other modality's tokens appended to the sequence.
struct MergedKv {
    Linear k, v;
};

// Per fused layer, the cross-modal pieces consumed by each backbone.
// Strategy decides which members are populated.
struct FusedPair {
    CrossBlock img, txt;
    MergedKv img_kv, txt_kv;
};

struct ImageStage {
    std::vector<Block> blocks;
    Linear merge;  // 2x2 patch merging into the next stage; undefined for the last
};

struct Detector {
    bool built = false;
    FpnParams fpn;
    std::vector<Conv3x3> tower;  // shared across levels, relu between layers
    Conv3x3 box;                 // 4 channels: distances l, t, r, b (in strides)
    Conv3x3 ctr;                 // 1 channel: centerness logit
    Conv3x3 region;              // text_width channels: region features
};

struct Classifier {
    bool built = false;
    Linear fc1, fc2;
};

struct PassCounter {
    int64_t dual = 0;   // one uni-modal backbone pass
    int64_t fused = 0;  // one joint pass over an (image, text) pair
    void reset() { dual = fused = 0; }
};

struct Model {
    FusionConfig cfg;

    // txt.*
    Tensor tok_embed;  // [V, text_width]
    Tensor txt_pos;    // [max_tokens, text_width]
    std::vector<Block> txt_blocks;
    Norm txt_final;

    // img.*
    Linear patch_embed;  // [w0, patch*patch*3]
    Tensor img_pos;      // [grid*grid, w0]
    std::vector<ImageStage> img_stages;
    Norm img_final;

    // fusion.* — size M, index 0 = deepest-minus-(M-1) layer pair
    std::vector<FusedPair> fusion;

    // head.*
    Linear img_proj, txt_proj;  // pooled features -> shared embed space
    Tensor itc_temp;            // scalar t with 1/tau = exp(t)
    Linear mlm;                 // [V, text_width]; also the captioning vocabulary head
    Linear itm_fc1, itm_fc2;    // matching head over concatenated pooled features

    // det.* / cls.* — optional task parts
    Detector det;
    Classifier cls;

    mutable PassCounter passes;
};

struct ModelParts {
    bool detector = false;
    bool classifier = false;
    int64_t num_labels = 9;
};

// Deterministic: the same config and seed rebuild identical parameters, and
// optional parts never perturb the shared ones (each section initializes
// from its own fork of `rng`).
Model build_model(const FusionConfig& cfg, const Rng& rng, const ModelParts& parts = {});

// Every parameter as (unique name, shared handle), in a stable order. The
// handles alias the model's tensors, so optimizers and checkpoint loaders
// mutate the model through them.
std::vector<std::pair<std::string, Tensor>> named_params(const Model& m);

enum class EncodeMode { Dual, Fused };

struct EncoderOutput {
    EncodeMode mode = EncodeMode::Dual;
    // Fused mode: text-aware image features per scale (finest first; the top
    // scale carries the final norm) and image-aware token features.
    std::vector<Tensor> image_scales;
    Tensor text_features;  // [L, text_width]
    // Dual mode: L2-normalized pooled embeddings in the shared space.
    Tensor image_pooled;  // [embed_dim]
    Tensor text_pooled;
};

// Dual mode encodes whichever inputs are present (undefined image / empty
// tokens skip that side) with every cross-modal block inert, and bumps the
// dual pass counter once per side. Fused mode requires both inputs, runs the
// configured strategy in the top M layers, and bumps the fused counter once.
// Token sequences longer than cfg.max_tokens raise DataError.
EncoderOutput encode(const Model& m, const Tensor& image, const std::vector<int64_t>& tokens,
                     EncodeMode mode);

// One fused co-attention layer on consumer stream x with producer stream y:
//   x~ = Att(LN1(x));  x = x + x~ + alpha * CrossAtt(LN_c(x~), y);  x = x + FFN(LN2(x))
// An undefined `alpha` (ungated variant) drops the gate factor. `self_keep`
// optionally masks the self-attention (causal decoding).
Tensor fused_coattention_layer(const Block& b, const CrossBlock& c, const Tensor& x,
                               const Tensor& y, const std::vector<uint8_t>* self_keep = nullptr);

// One merged-attention layer pair: both streams update simultaneously, each
// attending over its own (normalized) tokens concatenated with the other
// stream's raw tokens through its per-modality k/v projections.
std::pair<Tensor, Tensor> merged_attention_layer(const Block& bx, const MergedKv& kvx,
                                                 const Block& by, const MergedKv& kvy,
                                                 const Tensor& x, const Tensor& y);

// Analytic count of the parameters the fusion blocks add on top of the two
// uni-modal backbones (cross projections, their norms, gates — both
// modalities). Matches the instantiated model's census exactly.
int64_t count_fusion_params(const FusionConfig& cfg);

// ---------------------------------------------------------------------------
// Captioning forward pass: the text backbone re-run as a causal decoder with
// only the image-to-text cross-attention kept. `seq2seq` feeds the image
// backbone's final features to every cross block; `ladder` feeds each cross
// block the image stream snapshot its layer would see in fused mode.
// ---------------------------------------------------------------------------

enum class CaptionVariant { Seq2Seq, Ladder };

// Logits [L, V] predicting token t+1 at row t. ContractError when the model
// has no fused layers (no image pathway into the decoder).
Tensor caption_logits(const Model& m, CaptionVariant variant, const Tensor& image,
                      const std::vector<int64_t>& tokens);

}  // namespace fiber
