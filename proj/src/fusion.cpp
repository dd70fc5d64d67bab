#include "fiber/fusion.hpp"

#include <array>
#include <cmath>
#include <numeric>

namespace fiber {

namespace {

constexpr double kInitialInvTau = 14.3;

std::vector<int64_t> iota_ids(int64_t n) {
    std::vector<int64_t> ids(static_cast<size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

Tensor embedding_table(int64_t rows, int64_t d, Rng& rng, Dtype dtype) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + d));
    return Tensor::uniform({rows, d}, -limit, limit, rng, dtype, true);
}

Tensor l2_normalize(const Tensor& v) {
    return divide(v, sqrt(reduce_sum_all(mul(v, v))));
}

Tensor mean_rows(const Tensor& x) { return reduce_mean(x, 0); }

std::vector<uint8_t> causal_keep(int64_t n) {
    std::vector<uint8_t> keep(static_cast<size_t>(n * n), 0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j <= i; ++j) keep[static_cast<size_t>(i * n + j)] = 1;
    }
    return keep;
}

// Plain pre-norm block over a token sequence [L, d].
Tensor seq_block(const Block& b, const Tensor& x, const std::vector<uint8_t>* keep) {
    Tensor xn = norm_forward(b.n1, x);
    Tensor t = add(x, multi_head_attention(b.attn, xn, xn, keep));
    return add(t, ffn_forward(b.ffn, norm_forward(b.n2, t)));
}

// Plain pre-norm block over a [H, W, d] grid with windowed attention.
Tensor grid_block(const Block& b, const Tensor& grid, const WindowConfig& wc) {
    Tensor t = add(grid, window_attention(wc, b.attn, norm_forward(b.n1, grid)));
    return add(t, ffn_forward(b.ffn, norm_forward(b.n2, t)));
}

// One consumer's half of a merged-attention update: queries from its own
// normalized tokens, keys/values over [own normalized tokens; other stream's
// raw tokens], own tokens through the block's k/v, the rest through `kv`.
// `self_keep` (Lx×Lx) masks only the own-token keys; producer tokens stay
// visible to every query.
Tensor merged_side(const Block& b, const MergedKv& kv, const Tensor& x, const Tensor& y,
                   const std::vector<uint8_t>* self_keep) {
    Tensor xn = norm_forward(b.n1, x);
    Tensor q = linear_forward(b.attn.q, xn);
    const std::array<Tensor, 2> ks{linear_forward(b.attn.k, xn), linear_forward(kv.k, y)};
    const std::array<Tensor, 2> vs{linear_forward(b.attn.v, xn), linear_forward(kv.v, y)};
    Tensor k = concat(ks, 0);
    Tensor v = concat(vs, 0);
    const std::vector<uint8_t>* keep = nullptr;
    std::vector<uint8_t> widened;
    if (self_keep != nullptr) {
        const int64_t lx = x.dim(0), ly = y.dim(0);
        widened.assign(static_cast<size_t>(lx * (lx + ly)), 1);
        for (int64_t i = 0; i < lx; ++i) {
            for (int64_t j = 0; j < lx; ++j) {
                widened[static_cast<size_t>(i * (lx + ly) + j)] =
                    (*self_keep)[static_cast<size_t>(i * lx + j)];
            }
        }
        keep = &widened;
    }
    Tensor att = linear_forward(b.attn.o, scaled_attention(q, k, v, b.attn.heads, keep));
    Tensor t = add(x, att);
    return add(t, ffn_forward(b.ffn, norm_forward(b.n2, t)));
}

int64_t final_grid_side(const FusionConfig& cfg) {
    int64_t g = cfg.image_size / cfg.patch;
    for (size_t s = 1; s < cfg.stage_depths.size(); ++s) g /= 2;
    return g;
}

int64_t linear_numel(int64_t d_out, int64_t d_in) { return d_out * d_in + d_out; }

}  // namespace

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::MergedAttention: return "merged_attention";
        case Strategy::CoAttentionUngated: return "co_attention_ungated";
        case Strategy::CoAttentionGated: return "co_attention_gated";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    for (Strategy s : {Strategy::MergedAttention, Strategy::CoAttentionUngated,
                       Strategy::CoAttentionGated}) {
        if (name == strategy_name(s)) return s;
    }
    throw ConfigError("unknown fusion strategy '" + name + "'");
}

void validate_config(const FusionConfig& cfg) {
    if (cfg.stage_depths.empty() || cfg.stage_depths.size() != cfg.stage_widths.size()) {
        throw ConfigError("stage_depths and stage_widths must be non-empty and equal length");
    }
    if (cfg.image_size % cfg.patch != 0) throw ConfigError("patch must divide image size");
    int64_t grid = cfg.image_size / cfg.patch;
    for (size_t s = 0; s < cfg.stage_depths.size(); ++s) {
        if (cfg.stage_depths[s] <= 0) throw ConfigError("stage depths must be positive");
        if (cfg.stage_widths[s] % cfg.heads != 0) {
            throw ConfigError("stage width " + std::to_string(cfg.stage_widths[s]) +
                              " not divisible by " + std::to_string(cfg.heads) + " heads");
        }
        if (s + 1 < cfg.stage_widths.size() && cfg.stage_widths[s + 1] != 2 * cfg.stage_widths[s]) {
            throw ConfigError("stage widths must double between stages");
        }
        if (grid % cfg.window != 0) {
            throw ConfigError("stage " + std::to_string(s) + " grid " + std::to_string(grid) +
                              " not divisible by window " + std::to_string(cfg.window));
        }
        if (s + 1 < cfg.stage_depths.size()) {
            if (grid % 2 != 0) throw ConfigError("grid must stay even for patch merging");
            grid /= 2;
        }
    }
    if (cfg.text_width % cfg.heads != 0) {
        throw ConfigError("text width not divisible by heads");
    }
    if (cfg.fused_layers < 0 ||
        cfg.fused_layers > std::min(cfg.text_depth, cfg.stage_depths.back())) {
        throw ConfigError("fused layer count must satisfy 0 <= M <= min(text depth, top stage "
                          "depth)");
    }
    if (cfg.fused_layers > 0 && grid != cfg.window) {
        // Fused layers treat the top stage as one flat token sequence, which
        // is only equivalent to the windowed computation when the whole grid
        // is a single window.
        throw ConfigError("fusion requires the top stage grid to equal one window");
    }
    if (cfg.vocab_size <= 0 || cfg.max_tokens <= 0 || cfg.embed_dim <= 0 || cfg.fpn_width <= 0 ||
        cfg.text_depth <= 0) {
        throw ConfigError("model dimensions must be positive");
    }
}

Model build_model(const FusionConfig& cfg, const Rng& rng, const ModelParts& parts) {
    validate_config(cfg);
    Model m;
    m.cfg = cfg;
    const Dtype dt = cfg.dtype;
    const int64_t d_txt = cfg.text_width;
    const int64_t d_top = cfg.stage_widths.back();

    Rng r_txt = rng.fork(1);
    m.tok_embed = embedding_table(cfg.vocab_size, d_txt, r_txt, dt);
    m.txt_pos = embedding_table(cfg.max_tokens, d_txt, r_txt, dt);
    for (int64_t i = 0; i < cfg.text_depth; ++i) {
        Block b;
        b.n1 = norm_init(d_txt, dt);
        b.attn = attention_init(d_txt, d_txt, cfg.heads, r_txt, dt);
        b.n2 = norm_init(d_txt, dt);
        b.ffn = ffn_init(d_txt, r_txt, dt);
        m.txt_blocks.push_back(std::move(b));
    }
    m.txt_final = norm_init(d_txt, dt);

    Rng r_img = rng.fork(2);
    const int64_t grid0 = cfg.image_size / cfg.patch;
    m.patch_embed = linear_init(cfg.stage_widths[0], cfg.patch * cfg.patch * 3, r_img, dt);
    m.img_pos = embedding_table(grid0 * grid0, cfg.stage_widths[0], r_img, dt);
    for (size_t s = 0; s < cfg.stage_depths.size(); ++s) {
        ImageStage stage;
        const int64_t w = cfg.stage_widths[s];
        for (int64_t i = 0; i < cfg.stage_depths[s]; ++i) {
            Block b;
            b.n1 = norm_init(w, dt);
            b.attn = attention_init(w, w, cfg.heads, r_img, dt);
            b.n2 = norm_init(w, dt);
            b.ffn = ffn_init(w, r_img, dt);
            stage.blocks.push_back(std::move(b));
        }
        if (s + 1 < cfg.stage_depths.size()) {
            stage.merge = linear_init(2 * w, 4 * w, r_img, dt);
        }
        m.img_stages.push_back(std::move(stage));
    }
    m.img_final = norm_init(d_top, dt);

    Rng r_fus = rng.fork(3);
    for (int64_t j = 0; j < cfg.fused_layers; ++j) {
        FusedPair fp;
        if (cfg.strategy == Strategy::MergedAttention) {
            fp.img_kv.k = linear_init(d_top, d_txt, r_fus, dt);
            fp.img_kv.v = linear_init(d_top, d_txt, r_fus, dt);
            fp.txt_kv.k = linear_init(d_txt, d_top, r_fus, dt);
            fp.txt_kv.v = linear_init(d_txt, d_top, r_fus, dt);
        } else {
            fp.img.norm = norm_init(d_top, dt);
            fp.img.attn = attention_init(d_top, d_txt, cfg.heads, r_fus, dt);
            fp.txt.norm = norm_init(d_txt, dt);
            fp.txt.attn = attention_init(d_txt, d_top, cfg.heads, r_fus, dt);
            if (cfg.strategy == Strategy::CoAttentionGated) {
                fp.img.alpha = Tensor::full({1}, cfg.alpha_init, dt).set_requires_grad(true);
                fp.txt.alpha = Tensor::full({1}, cfg.alpha_init, dt).set_requires_grad(true);
            }
        }
        m.fusion.push_back(std::move(fp));
    }

    Rng r_head = rng.fork(4);
    m.img_proj = linear_init(cfg.embed_dim, d_top, r_head, dt);
    m.txt_proj = linear_init(cfg.embed_dim, d_txt, r_head, dt);
    m.itc_temp = Tensor::full({1}, std::log(kInitialInvTau), dt).set_requires_grad(true);
    m.mlm = linear_init(cfg.vocab_size, d_txt, r_head, dt);
    m.itm_fc1 = linear_init(d_txt, d_txt + d_top, r_head, dt);
    m.itm_fc2 = linear_init(2, d_txt, r_head, dt);

    if (parts.detector) {
        Rng r_det = rng.fork(5);
        m.det.built = true;
        m.det.fpn = fpn_init(cfg.stage_widths, cfg.fpn_width, r_det, dt);
        for (int t = 0; t < 4; ++t) {
            m.det.tower.push_back(conv3x3_init(cfg.fpn_width, cfg.fpn_width, r_det, dt));
        }
        m.det.box = conv3x3_init(4, cfg.fpn_width, r_det, dt);
        m.det.ctr = conv3x3_init(1, cfg.fpn_width, r_det, dt);
        m.det.region = conv3x3_init(d_txt, cfg.fpn_width, r_det, dt);
    }
    if (parts.classifier) {
        Rng r_cls = rng.fork(6);
        m.cls.built = true;
        m.cls.fc1 = linear_init(d_txt, d_txt + d_top, r_cls, dt);
        m.cls.fc2 = linear_init(parts.num_labels, d_txt, r_cls, dt);
    }
    return m;
}

std::vector<std::pair<std::string, Tensor>> named_params(const Model& m) {
    std::vector<std::pair<std::string, Tensor>> out;
    auto put = [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); };
    auto put_linear = [&](const std::string& p, const Linear& l) {
        put(p + ".w", l.weight);
        put(p + ".b", l.bias);
    };
    auto put_norm = [&](const std::string& p, const Norm& n) {
        put(p + ".g", n.gain);
        put(p + ".b", n.bias);
    };
    auto put_attn = [&](const std::string& p, const AttentionParams& a) {
        put_linear(p + ".q", a.q);
        put_linear(p + ".k", a.k);
        put_linear(p + ".v", a.v);
        put_linear(p + ".o", a.o);
    };
    auto put_block = [&](const std::string& p, const Block& b) {
        put_norm(p + ".n1", b.n1);
        put_attn(p + ".attn", b.attn);
        put_norm(p + ".n2", b.n2);
        put_linear(p + ".ffn.in", b.ffn.in);
        put_linear(p + ".ffn.out", b.ffn.out);
    };

    put("txt.tok_embed", m.tok_embed);
    put("txt.pos_embed", m.txt_pos);
    for (size_t i = 0; i < m.txt_blocks.size(); ++i) {
        put_block("txt.b" + std::to_string(i), m.txt_blocks[i]);
    }
    put_norm("txt.final", m.txt_final);

    put_linear("img.patch", m.patch_embed);
    put("img.pos_embed", m.img_pos);
    for (size_t s = 0; s < m.img_stages.size(); ++s) {
        const std::string sp = "img.s" + std::to_string(s);
        for (size_t i = 0; i < m.img_stages[s].blocks.size(); ++i) {
            put_block(sp + ".b" + std::to_string(i), m.img_stages[s].blocks[i]);
        }
        if (m.img_stages[s].merge.weight.defined()) {
            put_linear(sp + ".merge", m.img_stages[s].merge);
        }
    }
    put_norm("img.final", m.img_final);

    for (size_t j = 0; j < m.fusion.size(); ++j) {
        const FusedPair& fp = m.fusion[j];
        const std::string ip = "fusion.i" + std::to_string(j);
        const std::string tp = "fusion.t" + std::to_string(j);
        if (m.cfg.strategy == Strategy::MergedAttention) {
            put_linear(ip + ".kv.k", fp.img_kv.k);
            put_linear(ip + ".kv.v", fp.img_kv.v);
            put_linear(tp + ".kv.k", fp.txt_kv.k);
            put_linear(tp + ".kv.v", fp.txt_kv.v);
        } else {
            put_norm(ip + ".norm", fp.img.norm);
            put_attn(ip + ".cross", fp.img.attn);
            if (fp.img.alpha.defined()) put(ip + ".alpha", fp.img.alpha);
            put_norm(tp + ".norm", fp.txt.norm);
            put_attn(tp + ".cross", fp.txt.attn);
            if (fp.txt.alpha.defined()) put(tp + ".alpha", fp.txt.alpha);
        }
    }

    put_linear("head.img_proj", m.img_proj);
    put_linear("head.txt_proj", m.txt_proj);
    put("head.itc_temp", m.itc_temp);
    put_linear("head.mlm", m.mlm);
    put_linear("head.itm.fc1", m.itm_fc1);
    put_linear("head.itm.fc2", m.itm_fc2);

    if (m.det.built) {
        for (size_t l = 0; l < m.det.fpn.lateral.size(); ++l) {
            put_linear("det.fpn.lat" + std::to_string(l), m.det.fpn.lateral[l]);
            put_linear("det.fpn.smooth" + std::to_string(l), m.det.fpn.smooth[l].proj);
        }
        for (size_t t = 0; t < m.det.tower.size(); ++t) {
            put_linear("det.tower" + std::to_string(t), m.det.tower[t].proj);
        }
        put_linear("det.box", m.det.box.proj);
        put_linear("det.ctr", m.det.ctr.proj);
        put_linear("det.region", m.det.region.proj);
    }
    if (m.cls.built) {
        put_linear("cls.fc1", m.cls.fc1);
        put_linear("cls.fc2", m.cls.fc2);
    }
    return out;
}

Tensor fused_coattention_layer(const Block& b, const CrossBlock& c, const Tensor& x,
                               const Tensor& y, const std::vector<uint8_t>* self_keep) {
    Tensor xn = norm_forward(b.n1, x);
    Tensor xt = multi_head_attention(b.attn, xn, xn, self_keep);
    Tensor cross = multi_head_attention(c.attn, norm_forward(c.norm, xt), y);
    if (c.alpha.defined()) cross = mul(cross, c.alpha);
    Tensor t = add(add(x, xt), cross);
    return add(t, ffn_forward(b.ffn, norm_forward(b.n2, t)));
}

std::pair<Tensor, Tensor> merged_attention_layer(const Block& bx, const MergedKv& kvx,
                                                 const Block& by, const MergedKv& kvy,
                                                 const Tensor& x, const Tensor& y) {
    if (!y.defined() || y.dim(0) == 0) {
        return {seq_block(bx, x, nullptr), y};
    }
    // Both sides read the other's pre-update tokens (a simultaneous step).
    return {merged_side(bx, kvx, x, y, nullptr), merged_side(by, kvy, y, x, nullptr)};
}

int64_t count_fusion_params(const FusionConfig& cfg) {
    validate_config(cfg);
    const int64_t d_i = cfg.stage_widths.back();
    const int64_t d_t = cfg.text_width;
    int64_t per_layer = 0;
    if (cfg.strategy == Strategy::MergedAttention) {
        // Two extra k/v projections per consumer.
        per_layer += 2 * linear_numel(d_i, d_t);  // image consumes text tokens
        per_layer += 2 * linear_numel(d_t, d_i);  // text consumes image tokens
    } else {
        // Full cross-attention (q from own width, k/v from the producer's,
        // output projection) plus a query-side norm per consumer.
        per_layer += linear_numel(d_i, d_i) + 2 * linear_numel(d_i, d_t) +
                     linear_numel(d_i, d_i) + 2 * d_i;
        per_layer += linear_numel(d_t, d_t) + 2 * linear_numel(d_t, d_i) +
                     linear_numel(d_t, d_t) + 2 * d_t;
        if (cfg.strategy == Strategy::CoAttentionGated) per_layer += 2;  // one gate per side
    }
    return cfg.fused_layers * per_layer;
}

namespace {

// Shared forward machinery. The image stream runs stage by stage; the top
// stage is processed as a flat [G*G, d] sequence (its grid equals one window,
// so windowed attention there IS full attention). `txt_snapshots`, when
// non-null, receives the flat image stream right before each fused block —
// exactly what the aligned text block cross-attends to.
struct ImageRun {
    std::vector<Tensor> scales;      // per stage, pre-merge; top scale raw (pre final norm)
    std::vector<Tensor> snapshots;   // per fused layer: flat stream before its image block
    Tensor top_flat;                 // final stage output, flat, pre final norm
};

Tensor patchify(const Model& m, const Tensor& image) {
    const FusionConfig& cfg = m.cfg;
    if (image.ndim() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
        image.dim(2) != 3) {
        throw ShapeError("encode: expected a [" + std::to_string(cfg.image_size) + ", " +
                         std::to_string(cfg.image_size) + ", 3] image, got " +
                         shape_str(image.shape()));
    }
    const int64_t g = cfg.image_size / cfg.patch, p = cfg.patch;
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(g * g * p * p));
    for (int64_t pr = 0; pr < g; ++pr) {
        for (int64_t pc = 0; pc < g; ++pc) {
            for (int64_t py = 0; py < p; ++py) {
                for (int64_t px = 0; px < p; ++px) {
                    idx.push_back((pr * p + py) * cfg.image_size + pc * p + px);
                }
            }
        }
    }
    Tensor flat = gather_rows(reshape(image, {cfg.image_size * cfg.image_size, 3}), idx);
    Tensor tokens = linear_forward(m.patch_embed, reshape(flat, {g * g, p * p * 3}));
    return add(tokens, m.img_pos);  // [g*g, w0]
}

// Runs the image backbone up to (not including) the fused blocks of the top
// stage, recording the lower-stage scale outputs.
ImageRun image_prefix(const Model& m, const Tensor& image, int64_t fused) {
    const FusionConfig& cfg = m.cfg;
    const int64_t g0 = cfg.image_size / cfg.patch;
    ImageRun run;
    Tensor x = reshape(patchify(m, image), {g0, g0, cfg.stage_widths[0]});
    const size_t last = cfg.stage_depths.size() - 1;
    for (size_t s = 0; s < last; ++s) {
        const int64_t grid = x.dim(0);
        for (int64_t i = 0; i < cfg.stage_depths[s]; ++i) {
            WindowConfig wc{cfg.window,
                            (i % 2 == 1 && grid > cfg.window) ? cfg.window / 2 : 0};
            x = grid_block(m.img_stages[s].blocks[i], x, wc);
        }
        run.scales.push_back(x);
        x = patch_merging(x, m.img_stages[s].merge);
    }
    const int64_t g = x.dim(0);
    const int64_t depth = cfg.stage_depths[last];
    if (g == cfg.window) {
        // One window covers the whole grid, so windowed attention is plain
        // attention over the flattened tokens — the form the fused blocks use.
        Tensor flat = reshape(x, {g * g, cfg.stage_widths[last]});
        for (int64_t i = 0; i < depth - fused; ++i) {
            flat = seq_block(m.img_stages[last].blocks[i], flat, nullptr);
        }
        run.top_flat = flat;
    } else {
        if (fused > 0) {
            throw ContractError("image_prefix: fused blocks need a single-window top stage");
        }
        for (int64_t i = 0; i < depth; ++i) {
            WindowConfig wc{cfg.window, (i % 2 == 1 && g > cfg.window) ? cfg.window / 2 : 0};
            x = grid_block(m.img_stages[last].blocks[i], x, wc);
        }
        run.top_flat = reshape(x, {g * g, cfg.stage_widths[last]});
    }
    return run;
}

Tensor finish_top_scale(const Model& m, const ImageRun& run) {
    const int64_t g = final_grid_side(m.cfg);
    return norm_forward(m.img_final, reshape(run.top_flat, {g, g, m.cfg.stage_widths.back()}));
}

Tensor text_embed(const Model& m, const std::vector<int64_t>& tokens) {
    if (static_cast<int64_t>(tokens.size()) > m.cfg.max_tokens) {
        throw DataError("token sequence of length " + std::to_string(tokens.size()) +
                        " exceeds the configured maximum " + std::to_string(m.cfg.max_tokens));
    }
    if (tokens.empty()) throw DataError("cannot encode an empty token sequence");
    for (int64_t id : tokens) {
        if (id < 0 || id >= m.cfg.vocab_size) {
            throw DataError("token id " + std::to_string(id) + " outside the vocabulary");
        }
    }
    Tensor x = gather_rows(m.tok_embed, tokens);
    return add(x, gather_rows(m.txt_pos, iota_ids(static_cast<int64_t>(tokens.size()))));
}

Tensor pooled_image(const Model& m, const ImageRun& run) {
    Tensor top = norm_forward(m.img_final, run.top_flat);
    return l2_normalize(linear_forward(m.img_proj, mean_rows(top)));
}

Tensor pooled_text(const Model& m, const Tensor& txt_stream) {
    Tensor fin = norm_forward(m.txt_final, txt_stream);
    return l2_normalize(linear_forward(m.txt_proj, mean_rows(fin)));
}

}  // namespace

EncoderOutput encode(const Model& m, const Tensor& image, const std::vector<int64_t>& tokens,
                     EncodeMode mode) {
    const FusionConfig& cfg = m.cfg;
    EncoderOutput out;
    out.mode = mode;
    if (mode == EncodeMode::Dual) {
        if (!image.defined() && tokens.empty()) {
            throw ContractError("encode: dual mode needs at least one modality");
        }
        if (image.defined()) {
            ImageRun run = image_prefix(m, image, 0);
            out.image_pooled = pooled_image(m, run);
            m.passes.dual += 1;
        }
        if (!tokens.empty()) {
            Tensor x = text_embed(m, tokens);
            for (const Block& b : m.txt_blocks) x = seq_block(b, x, nullptr);
            out.text_pooled = pooled_text(m, x);
            m.passes.dual += 1;
        }
        return out;
    }

    if (!image.defined() || tokens.empty()) {
        throw ContractError("encode: fused mode needs both an image and tokens");
    }
    m.passes.fused += 1;
    const int64_t M = cfg.fused_layers;

    ImageRun run = image_prefix(m, image, M);
    Tensor ig = run.top_flat;
    Tensor tx = text_embed(m, tokens);
    for (int64_t i = 0; i < cfg.text_depth - M; ++i) tx = seq_block(m.txt_blocks[i], tx, nullptr);

    const size_t last = cfg.stage_depths.size() - 1;
    for (int64_t j = 0; j < M; ++j) {
        const Block& ib = m.img_stages[last].blocks[static_cast<size_t>(cfg.stage_depths[last] -
                                                                        M + j)];
        const Block& tb = m.txt_blocks[static_cast<size_t>(cfg.text_depth - M + j)];
        const FusedPair& fp = m.fusion[static_cast<size_t>(j)];
        if (cfg.strategy == Strategy::MergedAttention) {
            auto [ig2, tx2] = merged_attention_layer(ib, fp.img_kv, tb, fp.txt_kv, ig, tx);
            ig = ig2;
            tx = tx2;
        } else {
            Tensor snap_i = ig;
            ig = fused_coattention_layer(ib, fp.img, ig, tx);
            tx = fused_coattention_layer(tb, fp.txt, tx, snap_i);
        }
    }
    run.top_flat = ig;
    out.image_scales = run.scales;
    out.image_scales.push_back(finish_top_scale(m, run));
    out.text_features = norm_forward(m.txt_final, tx);
    return out;
}

Tensor caption_logits(const Model& m, CaptionVariant variant, const Tensor& image,
                      const std::vector<int64_t>& tokens) {
    const FusionConfig& cfg = m.cfg;
    const int64_t M = cfg.fused_layers;
    if (M <= 0) {
        throw ContractError("caption_logits: the model has no fused layers, so no image "
                            "information can reach the decoder");
    }
    m.passes.fused += 1;

    // Image side runs plain (text-to-image cross-attention is dropped),
    // capturing what each decoder cross block should read.
    ImageRun run = image_prefix(m, image, M);
    const size_t last = cfg.stage_depths.size() - 1;
    Tensor ig = run.top_flat;
    for (int64_t j = 0; j < M; ++j) {
        run.snapshots.push_back(ig);
        ig = seq_block(m.img_stages[last].blocks[static_cast<size_t>(cfg.stage_depths[last] -
                                                                     M + j)],
                       ig, nullptr);
    }

    const int64_t L = static_cast<int64_t>(tokens.size());
    Tensor tx = text_embed(m, tokens);
    const std::vector<uint8_t> keep = causal_keep(L);
    for (int64_t i = 0; i < cfg.text_depth - M; ++i) tx = seq_block(m.txt_blocks[i], tx, &keep);
    for (int64_t j = 0; j < M; ++j) {
        const Block& tb = m.txt_blocks[static_cast<size_t>(cfg.text_depth - M + j)];
        const FusedPair& fp = m.fusion[static_cast<size_t>(j)];
        const Tensor& producer =
            variant == CaptionVariant::Seq2Seq ? ig : run.snapshots[static_cast<size_t>(j)];
        if (cfg.strategy == Strategy::MergedAttention) {
            tx = merged_side(tb, fp.txt_kv, tx, producer, &keep);
        } else {
            tx = fused_coattention_layer(tb, fp.txt, tx, producer, &keep);
        }
    }
    return linear_forward(m.mlm, norm_forward(m.txt_final, tx));
}

}  // namespace fiber
