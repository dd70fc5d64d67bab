#pragma once

#include <vector>

#include "fiber/tensor.hpp"

namespace fiber {

// ---------------------------------------------------------------------------
// Parameterized building blocks. Structs hold parameter tensors only; all
// forward functions are pure and record onto the active tape. Naming and
// checkpoint registration happen where models are assembled.
// ---------------------------------------------------------------------------

struct Linear {
    Tensor weight;  // [d_out, d_in]
    Tensor bias;    // [d_out]
};

// Xavier-uniform weight (limit sqrt(6/(d_in+d_out))), zero bias.
Linear linear_init(int64_t d_out, int64_t d_in, Rng& rng, Dtype dtype = Dtype::F64);

// x: [..., d_in] -> [..., d_out], computed as x·Wᵀ + b.
Tensor linear_forward(const Linear& p, const Tensor& x);

struct AttentionParams {
    Linear q;  // [d, d]       consumer-side query projection
    Linear k;  // [d, d_kv]    producer features projected into consumer width
    Linear v;  // [d, d_kv]
    Linear o;  // [d, d]
    int64_t heads = 1;
};

// d must divide by heads; d_kv is the key/value source width (equal to d for
// self-attention).
AttentionParams attention_init(int64_t d, int64_t d_kv, int64_t heads, Rng& rng,
                               Dtype dtype = Dtype::F64);

// Scaled dot-product attention, q_src: [Lq, d], kv_src: [Lk, d_kv] -> [Lq, d].
// keep, when given, has Lq*Lk entries; keep[i*Lk + j] == 1 lets query i attend
// key j. Excluded keys contribute nothing (not even to the softmax max), so
// masked-out positions can hold arbitrary values. A query with every key
// excluded is a contract violation.
Tensor multi_head_attention(const AttentionParams& p, const Tensor& q_src, const Tensor& kv_src,
                            const std::vector<uint8_t>* keep = nullptr);

// The core of multi_head_attention after the q/k/v projections: q [Lq, d],
// k and v [Lk, d] already in model width, split into heads, attended with
// scale 1/sqrt(d/heads), heads re-concatenated. No output projection. Lets
// callers assemble k/v from several sources (e.g. per-modality projections
// over a concatenated sequence).
Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads,
                        const std::vector<uint8_t>* keep = nullptr);

struct Ffn {
    Linear in;   // [4d, d]
    Linear out;  // [d, 4d]
};

Ffn ffn_init(int64_t d, Rng& rng, Dtype dtype = Dtype::F64);

// linear -> gelu -> linear; the caller owns any residual add.
Tensor ffn_forward(const Ffn& p, const Tensor& x);

// Affine layer-norm parameters (gain 1, bias 0 at init).
struct Norm {
    Tensor gain;  // [d]
    Tensor bias;  // [d]
};

Norm norm_init(int64_t d, Dtype dtype = Dtype::F64);

Tensor norm_forward(const Norm& p, const Tensor& x);

// ---------------------------------------------------------------------------
// Windowed attention over a [H, W, d] grid.
// ---------------------------------------------------------------------------

struct WindowConfig {
    int64_t window = 4;  // window side, in grid cells
    int64_t shift = 0;   // cyclic shift; 0 or window/2
};

// Attention confined to window×window tiles. With shift > 0 the grid is
// cyclically rolled by (-shift, -shift) first, and attention within each tile
// is additionally restricted to cells from the same pre-roll window, then the
// roll is undone. H and W must divide by the window side.
Tensor window_attention(const WindowConfig& cfg, const AttentionParams& p, const Tensor& grid);

// [H, W, d] -> [H/2, W/2, 2d]: each 2×2 neighborhood is concatenated in
// reading order (top-left, top-right, bottom-left, bottom-right) to 4d and
// projected by p (which must be [2d, 4d]).
Tensor patch_merging(const Tensor& grid, const Linear& p);

// ---------------------------------------------------------------------------
// Convolution as an explicit gather + matmul, and the FPN built from it.
// ---------------------------------------------------------------------------

struct Conv3x3 {
    Linear proj;  // [d_out, 9*d_in]; input blocks ordered (dy,dx) row-major
};

Conv3x3 conv3x3_init(int64_t d_out, int64_t d_in, Rng& rng, Dtype dtype = Dtype::F64);

// [H, W, d_in] -> [H, W, d_out], zero padding at the border.
Tensor conv3x3_forward(const Conv3x3& p, const Tensor& grid);

// Nearest-neighbor 2× upsample of a [H, W, d] grid.
Tensor upsample2x(const Tensor& grid);

struct FpnParams {
    std::vector<Linear> lateral;  // per level: [d_fpn, d_level] 1×1 projection
    std::vector<Conv3x3> smooth;  // per level: [d_fpn, 9*d_fpn]
};

FpnParams fpn_init(const std::vector<int64_t>& level_widths, int64_t d_fpn, Rng& rng,
                   Dtype dtype = Dtype::F64);

// features: finest level first, each following level exactly half the
// resolution. Lateral 1×1 projections to a common width, a top-down pathway
// adding the nearest-upsampled coarser map, then per-level 3×3 smoothing.
std::vector<Tensor> fpn_combine(const FpnParams& p, const std::vector<Tensor>& features);

}  // namespace fiber
