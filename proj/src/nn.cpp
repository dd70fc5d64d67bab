#include "fiber/nn.hpp"

#include <cmath>

namespace fiber {

namespace {

// Indices flattening a [H, W] grid row-major.
int64_t at(int64_t r, int64_t c, int64_t w) { return r * w + c; }

void require_grid(const Tensor& grid, const char* op) {
    if (grid.ndim() != 3) {
        throw ShapeError(std::string(op) + ": expected a [H, W, d] grid, got " +
                         shape_str(grid.shape()));
    }
}

}  // namespace

Linear linear_init(int64_t d_out, int64_t d_in, Rng& rng, Dtype dtype) {
    const double limit = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
    Linear p;
    p.weight = Tensor::uniform({d_out, d_in}, -limit, limit, rng, dtype, true);
    p.bias = Tensor::zeros({d_out}, dtype, true);
    return p;
}

Tensor linear_forward(const Linear& p, const Tensor& x) {
    const int64_t d_in = p.weight.dim(1);
    if (x.dim(-1) != d_in) {
        throw ShapeError("linear_forward: input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(p.weight.shape()));
    }
    if (x.ndim() == 1) {
        return reshape(linear_forward(p, reshape(x, {1, d_in})), {p.weight.dim(0)});
    }
    return add(matmul_nt(x, p.weight), p.bias);
}

AttentionParams attention_init(int64_t d, int64_t d_kv, int64_t heads, Rng& rng, Dtype dtype) {
    if (heads <= 0 || d % heads != 0) {
        throw ShapeError("attention_init: width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
    }
    AttentionParams p;
    p.q = linear_init(d, d, rng, dtype);
    p.k = linear_init(d, d_kv, rng, dtype);
    p.v = linear_init(d, d_kv, rng, dtype);
    p.o = linear_init(d, d, rng, dtype);
    p.heads = heads;
    return p;
}

Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads,
                        const std::vector<uint8_t>* keep) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.dim(1) != k.dim(1) ||
        k.shape() != v.shape()) {
        throw ShapeError("scaled_attention: got q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    }
    const int64_t d = q.dim(1);
    if (heads <= 0 || d % heads != 0) {
        throw ShapeError("scaled_attention: width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
    }
    const int64_t dh = d / heads;
    const int64_t lq = q.dim(0);
    const int64_t lk = k.dim(0);
    if (keep != nullptr && static_cast<int64_t>(keep->size()) != lq * lk) {
        throw ShapeError("scaled_attention: mask has " + std::to_string(keep->size()) +
                         " entries for " + std::to_string(lq) + "x" + std::to_string(lk));
    }

    // [L, d] -> [h, L, dh]
    auto split_heads = [&](const Tensor& t, int64_t l) {
        return transpose(reshape(t, {l, heads, dh}), 0, 1);
    };
    Tensor scores = mul_scalar(matmul_nt(split_heads(q, lq), split_heads(k, lk)),
                               1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn;
    if (keep != nullptr) {
        std::vector<uint8_t> tiled(static_cast<size_t>(heads * lq * lk));
        for (int64_t head = 0; head < heads; ++head) {
            std::copy(keep->begin(), keep->end(), tiled.begin() + head * lq * lk);
        }
        attn = masked_softmax(scores, -1, tiled);
    } else {
        attn = softmax(scores, -1);
    }
    Tensor ctx = matmul(attn, split_heads(v, lk));  // [h, Lq, dh]
    return reshape(transpose(ctx, 0, 1), {lq, d});
}

Tensor multi_head_attention(const AttentionParams& p, const Tensor& q_src, const Tensor& kv_src,
                            const std::vector<uint8_t>* keep) {
    if (q_src.ndim() != 2 || kv_src.ndim() != 2) {
        throw ShapeError("multi_head_attention: expected [L, d] inputs, got " +
                         shape_str(q_src.shape()) + " and " + shape_str(kv_src.shape()));
    }
    Tensor ctx = scaled_attention(linear_forward(p.q, q_src), linear_forward(p.k, kv_src),
                                  linear_forward(p.v, kv_src), p.heads, keep);
    return linear_forward(p.o, ctx);
}

Ffn ffn_init(int64_t d, Rng& rng, Dtype dtype) {
    Ffn p;
    p.in = linear_init(4 * d, d, rng, dtype);
    p.out = linear_init(d, 4 * d, rng, dtype);
    return p;
}

Tensor ffn_forward(const Ffn& p, const Tensor& x) {
    return linear_forward(p.out, gelu(linear_forward(p.in, x)));
}

Norm norm_init(int64_t d, Dtype dtype) {
    Norm p;
    p.gain = Tensor::full({d}, 1.0, dtype).set_requires_grad(true);
    p.bias = Tensor::zeros({d}, dtype, true);
    return p;
}

Tensor norm_forward(const Norm& p, const Tensor& x) { return layer_norm(x, p.gain, p.bias); }

Tensor window_attention(const WindowConfig& cfg, const AttentionParams& p, const Tensor& grid) {
    require_grid(grid, "window_attention");
    const int64_t H = grid.dim(0), W = grid.dim(1), d = grid.dim(2);
    const int64_t w = cfg.window, s = cfg.shift;
    if (w <= 0 || H % w != 0 || W % w != 0) {
        throw ShapeError("window_attention: grid " + shape_str(grid.shape()) +
                         " not divisible by window " + std::to_string(w));
    }
    if (s < 0 || s >= w) {
        throw ShapeError("window_attention: shift " + std::to_string(s) +
                         " must lie in [0, window)");
    }
    Tensor flat = reshape(grid, {H * W, d});

    // Partition the (rolled) grid into w×w tiles, window-major; the same
    // table also records each cell's pre-roll window id for the shift mask.
    const int64_t tiles_r = H / w, tiles_c = W / w;
    const int64_t win_len = w * w;
    std::vector<int64_t> part(static_cast<size_t>(H * W));
    std::vector<int64_t> origin_window(static_cast<size_t>(H * W));
    int64_t write = 0;
    for (int64_t tr = 0; tr < tiles_r; ++tr) {
        for (int64_t tc = 0; tc < tiles_c; ++tc) {
            for (int64_t r = 0; r < w; ++r) {
                for (int64_t c = 0; c < w; ++c) {
                    const int64_t rolled_r = tr * w + r;
                    const int64_t rolled_c = tc * w + c;
                    const int64_t orig_r = (rolled_r + s) % H;
                    const int64_t orig_c = (rolled_c + s) % W;
                    part[static_cast<size_t>(write)] = at(orig_r, orig_c, W);
                    origin_window[static_cast<size_t>(write)] =
                        (orig_r / w) * tiles_c + (orig_c / w);
                    ++write;
                }
            }
        }
    }

    const int64_t h = p.heads;
    if (h <= 0 || d % h != 0) {
        throw ShapeError("window_attention: width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(h));
    }
    const int64_t dh = d / h;
    const int64_t tiles = tiles_r * tiles_c;

    // All windows attend in one batched pass: project once over the gathered
    // rows, then fold (tile, head) into the batch axis.
    Tensor windows = gather_rows(flat, part);  // [tiles*w*w, d], window-major
    auto to_batched = [&](const Tensor& t) {  // [tiles*w*w, d] -> [tiles*h, w*w, dh]
        return reshape(transpose(reshape(t, {tiles, win_len, h, dh}), 1, 2),
                       {tiles * h, win_len, dh});
    };
    Tensor qb = to_batched(linear_forward(p.q, windows));
    Tensor kb = to_batched(linear_forward(p.k, windows));
    Tensor vb = to_batched(linear_forward(p.v, windows));
    Tensor scores =
        mul_scalar(matmul_nt(qb, kb), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn;
    if (s == 0) {
        attn = softmax(scores, -1);
    } else {
        // Rolled tiles mix cells from different pre-roll windows; keep only
        // pairs that shared a window before the roll. Same mask every head.
        std::vector<uint8_t> keep(static_cast<size_t>(tiles * h * win_len * win_len));
        std::vector<uint8_t> wmask(static_cast<size_t>(win_len * win_len));
        for (int64_t t = 0; t < tiles; ++t) {
            for (int64_t a = 0; a < win_len; ++a) {
                for (int64_t b = 0; b < win_len; ++b) {
                    wmask[static_cast<size_t>(a * win_len + b)] =
                        origin_window[static_cast<size_t>(t * win_len + a)] ==
                                origin_window[static_cast<size_t>(t * win_len + b)]
                            ? 1
                            : 0;
                }
            }
            for (int64_t head = 0; head < h; ++head) {
                std::copy(wmask.begin(), wmask.end(),
                          keep.begin() + (t * h + head) * win_len * win_len);
            }
        }
        attn = masked_softmax(scores, -1, keep);
    }
    Tensor ctx = matmul(attn, vb);  // [tiles*h, w*w, dh]
    Tensor merged = reshape(transpose(reshape(ctx, {tiles, h, win_len, dh}), 1, 2),
                            {tiles * win_len, d});
    Tensor stacked = linear_forward(p.o, merged);  // window-major, same order as `part`

    // Scatter back: output row part[i] gets stacked row i.
    std::vector<int64_t> inverse(static_cast<size_t>(H * W));
    for (int64_t i = 0; i < H * W; ++i) inverse[static_cast<size_t>(part[static_cast<size_t>(i)])] = i;
    return reshape(gather_rows(stacked, inverse), {H, W, d});
}

Tensor patch_merging(const Tensor& grid, const Linear& p) {
    require_grid(grid, "patch_merging");
    const int64_t H = grid.dim(0), W = grid.dim(1), d = grid.dim(2);
    if (H % 2 != 0 || W % 2 != 0) {
        throw ShapeError("patch_merging: odd grid " + shape_str(grid.shape()));
    }
    if (p.weight.dim(1) != 4 * d || p.weight.dim(0) != 2 * d) {
        throw ShapeError("patch_merging: projection " + shape_str(p.weight.shape()) +
                         " does not map 4*" + std::to_string(d) + " to 2*" + std::to_string(d));
    }
    Tensor flat = reshape(grid, {H * W, d});
    const int64_t oh = H / 2, ow = W / 2;
    auto quadrant = [&](int64_t dr, int64_t dc) {
        std::vector<int64_t> idx(static_cast<size_t>(oh * ow));
        for (int64_t r = 0; r < oh; ++r) {
            for (int64_t c = 0; c < ow; ++c) {
                idx[static_cast<size_t>(at(r, c, ow))] = at(2 * r + dr, 2 * c + dc, W);
            }
        }
        return gather_rows(flat, idx);
    };
    std::vector<Tensor> quads{quadrant(0, 0), quadrant(0, 1), quadrant(1, 0), quadrant(1, 1)};
    Tensor merged = concat(quads, 1);  // [oh*ow, 4d]
    return reshape(linear_forward(p, merged), {oh, ow, 2 * d});
}

Conv3x3 conv3x3_init(int64_t d_out, int64_t d_in, Rng& rng, Dtype dtype) {
    return Conv3x3{linear_init(d_out, 9 * d_in, rng, dtype)};
}

Tensor conv3x3_forward(const Conv3x3& p, const Tensor& grid) {
    require_grid(grid, "conv3x3_forward");
    const int64_t H = grid.dim(0), W = grid.dim(1), d = grid.dim(2);
    if (p.proj.weight.dim(1) != 9 * d) {
        throw ShapeError("conv3x3_forward: projection " + shape_str(p.proj.weight.shape()) +
                         " does not take 9*" + std::to_string(d) + " inputs");
    }
    // Zero padding via an extra all-zero row that every out-of-bounds
    // neighbor indexes into.
    Tensor flat = reshape(grid, {H * W, d});
    std::vector<Tensor> padded_parts{flat, Tensor::zeros({1, d}, grid.dtype())};
    Tensor padded = concat(padded_parts, 0);
    const int64_t zero_row = H * W;
    std::vector<int64_t> idx(static_cast<size_t>(H * W * 9));
    int64_t write = 0;
    for (int64_t r = 0; r < H; ++r) {
        for (int64_t c = 0; c < W; ++c) {
            for (int64_t dy = -1; dy <= 1; ++dy) {
                for (int64_t dx = -1; dx <= 1; ++dx) {
                    const int64_t rr = r + dy, cc = c + dx;
                    idx[static_cast<size_t>(write++)] =
                        (rr < 0 || rr >= H || cc < 0 || cc >= W) ? zero_row : at(rr, cc, W);
                }
            }
        }
    }
    Tensor patches = reshape(gather_rows(padded, idx), {H * W, 9 * d});
    return reshape(linear_forward(p.proj, patches), {H, W, p.proj.weight.dim(0)});
}

Tensor upsample2x(const Tensor& grid) {
    require_grid(grid, "upsample2x");
    const int64_t H = grid.dim(0), W = grid.dim(1), d = grid.dim(2);
    Tensor flat = reshape(grid, {H * W, d});
    std::vector<int64_t> idx(static_cast<size_t>(4 * H * W));
    for (int64_t r = 0; r < 2 * H; ++r) {
        for (int64_t c = 0; c < 2 * W; ++c) {
            idx[static_cast<size_t>(at(r, c, 2 * W))] = at(r / 2, c / 2, W);
        }
    }
    return reshape(gather_rows(flat, idx), {2 * H, 2 * W, d});
}

FpnParams fpn_init(const std::vector<int64_t>& level_widths, int64_t d_fpn, Rng& rng, Dtype dtype) {
    FpnParams p;
    for (int64_t w : level_widths) {
        p.lateral.push_back(linear_init(d_fpn, w, rng, dtype));
        p.smooth.push_back(conv3x3_init(d_fpn, d_fpn, rng, dtype));
    }
    return p;
}

std::vector<Tensor> fpn_combine(const FpnParams& p, const std::vector<Tensor>& features) {
    if (features.empty()) throw ShapeError("fpn_combine: no levels");
    if (features.size() != p.lateral.size()) {
        throw ShapeError("fpn_combine: " + std::to_string(features.size()) + " levels for " +
                         std::to_string(p.lateral.size()) + " parameter sets");
    }
    for (size_t i = 0; i + 1 < features.size(); ++i) {
        require_grid(features[i], "fpn_combine");
        if (features[i].dim(0) != 2 * features[i + 1].dim(0) ||
            features[i].dim(1) != 2 * features[i + 1].dim(1)) {
            throw ShapeError("fpn_combine: level " + std::to_string(i + 1) + " " +
                             shape_str(features[i + 1].shape()) + " is not half of " +
                             shape_str(features[i].shape()));
        }
    }
    require_grid(features.back(), "fpn_combine");

    const size_t n = features.size();
    std::vector<Tensor> merged(n);
    for (size_t i = 0; i < n; ++i) {
        const Tensor& f = features[i];
        Tensor lat = linear_forward(p.lateral[i], reshape(f, {f.dim(0) * f.dim(1), f.dim(2)}));
        merged[i] = reshape(lat, {f.dim(0), f.dim(1), p.lateral[i].weight.dim(0)});
    }
    for (size_t i = n - 1; i-- > 0;) {
        merged[i] = add(merged[i], upsample2x(merged[i + 1]));
    }
    std::vector<Tensor> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = conv3x3_forward(p.smooth[i], merged[i]);
    return out;
}

}  // namespace fiber
