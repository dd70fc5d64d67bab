#include "fiber/adapters.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "fiber/error.hpp"
#include "fiber/geometry.hpp"
#include "fiber/nn.hpp"

namespace fiber {

namespace {

double stable_sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Pooled fused features, text half first — the shared input layout of the
// matching and classification heads.
Tensor fused_pooled(const EncoderOutput& enc) {
    Tensor txt = reduce_mean(enc.text_features, 0);
    const Tensor& top = enc.image_scales.back();
    Tensor img = reduce_mean(reshape(top, {top.dim(0) * top.dim(1), top.dim(2)}), 0);
    const std::array<Tensor, 2> halves{txt, img};
    return concat(halves, 0);
}

// Column `c` of a rank-2 tensor as a rank-1 tensor, differentiably.
Tensor column(const Tensor& t, int64_t c) {
    return reshape(gather_rows(transpose(t, 0, 1), {c}), {t.dim(0)});
}

// Sorts candidate indices by (score desc, index asc); exact comparisons keep
// the order deterministic.
std::vector<int64_t> rank_desc(const std::vector<double>& scores) {
    std::vector<int64_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        const double sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
        return sa != sb ? sa > sb : a < b;
    });
    return idx;
}

}  // namespace

Tensor classify(const Model& m, const EncoderOutput& enc) {
    if (!m.cls.built) throw ContractError("classify: model was built without a classifier");
    if (enc.mode != EncodeMode::Fused || !enc.text_features.defined() || enc.image_scales.empty())
        throw ContractError("classify: label logits need a fused encoding");
    return linear_forward(m.cls.fc2, gelu(linear_forward(m.cls.fc1, fused_pooled(enc))));
}

RegionFeatures od_head(const Model& m, const EncoderOutput& enc) {
    if (!m.det.built) throw ContractError("od_head: model was built without a detector");
    if (enc.mode != EncodeMode::Fused || enc.image_scales.empty())
        throw ContractError("od_head: detection needs a fused encoding");

    std::vector<Tensor> pyramid = fpn_combine(m.det.fpn, enc.image_scales);
    std::vector<int64_t> grids;
    std::vector<Tensor> rows_parts, ctr_parts, x1p, y1p, x2p, y2p;
    for (const Tensor& level : pyramid) {
        Tensor t = level;
        for (const Conv3x3& conv : m.det.tower) t = relu(conv3x3_forward(conv, t));
        const int64_t H = t.dim(0), W = t.dim(1);
        grids.push_back(H);
        const double stride = static_cast<double>(m.cfg.image_size) / static_cast<double>(H);

        Tensor box = reshape(conv3x3_forward(m.det.box, t), {H * W, 4});
        Tensor ctr = reshape(conv3x3_forward(m.det.ctr, t), {H * W});
        Tensor region = reshape(conv3x3_forward(m.det.region, t), {H * W, m.cfg.text_width});

        // Cell centers as constants; distances decode through exp * stride,
        // keeping every predicted box strictly positive in extent.
        std::vector<double> cx(static_cast<size_t>(H * W)), cy(static_cast<size_t>(H * W));
        for (int64_t r = 0; r < H; ++r) {
            for (int64_t c = 0; c < W; ++c) {
                cx[static_cast<size_t>(r * W + c)] = (static_cast<double>(c) + 0.5) * stride;
                cy[static_cast<size_t>(r * W + c)] = (static_cast<double>(r) + 0.5) * stride;
            }
        }
        Tensor cxs = Tensor::from_values({H * W}, cx, box.dtype());
        Tensor cys = Tensor::from_values({H * W}, cy, box.dtype());
        Tensor dl = mul_scalar(exp(column(box, 0)), stride);
        Tensor dt = mul_scalar(exp(column(box, 1)), stride);
        Tensor dr = mul_scalar(exp(column(box, 2)), stride);
        Tensor db = mul_scalar(exp(column(box, 3)), stride);
        x1p.push_back(sub(cxs, dl));
        y1p.push_back(sub(cys, dt));
        x2p.push_back(add(cxs, dr));
        y2p.push_back(add(cys, db));
        rows_parts.push_back(region);
        ctr_parts.push_back(ctr);
    }

    RegionFeatures rf;
    rf.locations = fpn_locations(m.cfg.image_size, grids);
    rf.rows = concat(rows_parts, 0);
    rf.ctr_logits = concat(ctr_parts, 0);
    rf.boxes = BoxesT{concat(x1p, 0), concat(y1p, 0), concat(x2p, 0), concat(y2p, 0)};
    return rf;
}

Tensor grounding_score(const RegionFeatures& regions, const EncoderOutput& enc) {
    if (!enc.text_features.defined())
        throw ContractError("grounding_score: encoding carries no token features");
    if (regions.rows.dim(1) != enc.text_features.dim(1)) {
        throw ShapeError("grounding_score: region width " + std::to_string(regions.rows.dim(1)) +
                         " vs token width " + std::to_string(enc.text_features.dim(1)));
    }
    return matmul_nt(regions.rows, enc.text_features);
}

std::vector<Detection> detect(const Model& m, const EncoderOutput& enc,
                              const std::vector<std::pair<int64_t, int64_t>>& spans,
                              double score_thresh, double nms_iou) {
    if (spans.empty()) throw ContractError("detect: an empty caption grounds nothing");
    RegionFeatures rf = od_head(m, enc);
    Tensor S = grounding_score(rf, enc);
    const int64_t R = S.dim(0), L = S.dim(1);
    const std::vector<double> sv = S.to_doubles();
    const std::vector<double> ctr = rf.ctr_logits.to_doubles();
    const std::vector<double> bx1 = rf.boxes.x1.to_doubles();
    const std::vector<double> by1 = rf.boxes.y1.to_doubles();
    const std::vector<double> bx2 = rf.boxes.x2.to_doubles();
    const std::vector<double> by2 = rf.boxes.y2.to_doubles();
    const double size = static_cast<double>(m.cfg.image_size);

    std::vector<Detection> out;
    for (const auto& [start, end] : spans) {
        if (start < 0 || start >= end || end > L) {
            throw ContractError("detect: span [" + std::to_string(start) + "," +
                                std::to_string(end) + ") outside the " + std::to_string(L) +
                                " encoded tokens");
        }
        std::vector<double> scores(static_cast<size_t>(R));
        for (int64_t r = 0; r < R; ++r) {
            double mean = 0;
            for (int64_t l = start; l < end; ++l) mean += sv[static_cast<size_t>(r * L + l)];
            mean /= static_cast<double>(end - start);
            scores[static_cast<size_t>(r)] =
                stable_sigmoid(mean) * stable_sigmoid(ctr[static_cast<size_t>(r)]);
        }
        std::vector<Detection> kept;
        for (int64_t r : rank_desc(scores)) {
            if (!(scores[static_cast<size_t>(r)] > score_thresh)) break;
            Box b{std::clamp(bx1[static_cast<size_t>(r)], 0.0, size),
                  std::clamp(by1[static_cast<size_t>(r)], 0.0, size),
                  std::clamp(bx2[static_cast<size_t>(r)], 0.0, size),
                  std::clamp(by2[static_cast<size_t>(r)], 0.0, size)};
            bool suppressed = false;
            for (const Detection& k : kept) {
                if (iou(k.box, b) >= nms_iou) {
                    suppressed = true;
                    break;
                }
            }
            if (!suppressed) kept.push_back({b, start, end, scores[static_cast<size_t>(r)]});
        }
        out.insert(out.end(), kept.begin(), kept.end());
    }
    return out;
}

std::string format_detections(const std::string& image_id, const std::vector<Detection>& dets) {
    std::string out;
    char line[256];
    for (const Detection& d : dets) {
        std::snprintf(line, sizeof(line), "%s %.3f %.3f %.3f %.3f %lld %lld %.6f\n",
                      image_id.c_str(), d.box.x1, d.box.y1, d.box.x2, d.box.y2,
                      static_cast<long long>(d.span_start), static_cast<long long>(d.span_end),
                      d.score);
        out += line;
    }
    return out;
}

RankResult retrieve_dual(const Tensor& queries, const Tensor& corpus, int64_t k) {
    if (queries.ndim() != 2 || corpus.ndim() != 2 || queries.dim(1) != corpus.dim(1)) {
        throw ShapeError("retrieve_dual: got " + shape_str(queries.shape()) + " queries and " +
                         shape_str(corpus.shape()) + " corpus");
    }
    if (k < 0) throw ContractError("retrieve_dual: negative k");
    auto check_unit = [](const Tensor& t, const char* side) {
        const std::vector<double> v = t.to_doubles();
        const int64_t n = t.dim(0), d = t.dim(1);
        for (int64_t i = 0; i < n; ++i) {
            double s = 0;
            for (int64_t j = 0; j < d; ++j) {
                const double x = v[static_cast<size_t>(i * d + j)];
                s += x * x;
            }
            if (std::abs(s - 1.0) > 1e-3) {
                throw ContractError(std::string("retrieve_dual: ") + side + " row " +
                                    std::to_string(i) + " is not L2-normalized");
            }
        }
    };
    check_unit(queries, "query");
    check_unit(corpus, "corpus");

    RankResult res;
    const int64_t n = queries.dim(0), c = corpus.dim(0);
    int64_t kk = k;
    if (kk > c) {
        kk = c;
        res.k_clamped = true;
    }
    const std::vector<double> sims = matmul_nt(queries, corpus).to_doubles();
    res.order.resize(static_cast<size_t>(n));
    res.scores.resize(static_cast<size_t>(n));
    for (int64_t q = 0; q < n; ++q) {
        std::vector<double> row(sims.begin() + q * c, sims.begin() + (q + 1) * c);
        std::vector<int64_t> idx = rank_desc(row);
        idx.resize(static_cast<size_t>(kk));
        for (int64_t i : idx) res.scores[static_cast<size_t>(q)].push_back(row[static_cast<size_t>(i)]);
        res.order[static_cast<size_t>(q)] = std::move(idx);
    }
    return res;
}

RankResult rerank_topk(const Tensor& dual_scores,
                       const std::function<double(int64_t, int64_t)>& fused_score, int64_t k) {
    if (dual_scores.ndim() != 2) {
        throw ShapeError("rerank_topk: expected a [queries, corpus] score matrix, got " +
                         shape_str(dual_scores.shape()));
    }
    if (k < 0) throw ContractError("rerank_topk: negative k");
    const int64_t n = dual_scores.dim(0), c = dual_scores.dim(1);
    int64_t kk = k;
    RankResult res;
    if (kk > c) {
        kk = c;
        res.k_clamped = true;
    }
    const std::vector<double> dual = dual_scores.to_doubles();
    res.order.resize(static_cast<size_t>(n));
    res.scores.resize(static_cast<size_t>(n));
    for (int64_t q = 0; q < n; ++q) {
        std::vector<double> drow(dual.begin() + q * c, dual.begin() + (q + 1) * c);
        std::vector<int64_t> by_dual = rank_desc(drow);

        // Re-score the dual shortlist; everything else keeps its dual score
        // and stays below the re-ranked set, in dual order.
        std::vector<double> final_score(drow);
        for (int64_t i = 0; i < kk; ++i) {
            const int64_t cand = by_dual[static_cast<size_t>(i)];
            final_score[static_cast<size_t>(cand)] += fused_score(q, cand);
        }
        std::vector<int64_t> head(by_dual.begin(), by_dual.begin() + kk);
        std::sort(head.begin(), head.end(), [&](int64_t a, int64_t b) {
            const double sa = final_score[static_cast<size_t>(a)];
            const double sb = final_score[static_cast<size_t>(b)];
            return sa != sb ? sa > sb : a < b;
        });
        auto& order = res.order[static_cast<size_t>(q)];
        auto& scores = res.scores[static_cast<size_t>(q)];
        for (int64_t i : head) {
            order.push_back(i);
            scores.push_back(final_score[static_cast<size_t>(i)]);
        }
        for (int64_t i = kk; i < c; ++i) {
            const int64_t cand = by_dual[static_cast<size_t>(i)];
            order.push_back(cand);
            scores.push_back(drow[static_cast<size_t>(cand)]);
        }
    }
    return res;
}

RankResult ensemble_rank(const Tensor& dual_scores, const Tensor& fused_scores) {
    if (dual_scores.ndim() != 2 || dual_scores.shape() != fused_scores.shape()) {
        throw ShapeError("ensemble_rank: score shapes " + shape_str(dual_scores.shape()) +
                         " and " + shape_str(fused_scores.shape()) + " differ");
    }
    const int64_t n = dual_scores.dim(0), c = dual_scores.dim(1);
    const std::vector<double> dual = dual_scores.to_doubles();
    const std::vector<double> fused = fused_scores.to_doubles();
    RankResult res;
    res.order.resize(static_cast<size_t>(n));
    res.scores.resize(static_cast<size_t>(n));
    for (int64_t q = 0; q < n; ++q) {
        std::vector<double> row(static_cast<size_t>(c));
        for (int64_t i = 0; i < c; ++i) {
            row[static_cast<size_t>(i)] =
                dual[static_cast<size_t>(q * c + i)] + fused[static_cast<size_t>(q * c + i)];
        }
        std::vector<int64_t> idx = rank_desc(row);
        for (int64_t i : idx) res.scores[static_cast<size_t>(q)].push_back(row[static_cast<size_t>(i)]);
        res.order[static_cast<size_t>(q)] = std::move(idx);
    }
    return res;
}

Tensor caption_loss(const Model& m, CaptionVariant variant, const Tensor& image,
                    const std::vector<int64_t>& tokens) {
    const int64_t L = static_cast<int64_t>(tokens.size());
    if (L < 2) throw ContractError("caption_loss: need at least bos and one following token");
    Tensor lsm = log_softmax(caption_logits(m, variant, image, tokens), -1);
    std::vector<int64_t> rows(static_cast<size_t>(L - 1));
    std::vector<double> onehot(static_cast<size_t>((L - 1) * m.cfg.vocab_size), 0.0);
    for (int64_t t = 0; t + 1 < L; ++t) {
        rows[static_cast<size_t>(t)] = t;
        onehot[static_cast<size_t>(t * m.cfg.vocab_size + tokens[static_cast<size_t>(t + 1)])] = 1.0;
    }
    Tensor picked = mul(gather_rows(lsm, rows),
                        Tensor::from_values({L - 1, m.cfg.vocab_size}, onehot, lsm.dtype()));
    return mul_scalar(reduce_sum_all(picked), -1.0 / static_cast<double>(L - 1));
}

std::vector<int64_t> caption_decode(const Model& m, const CaptionerConfig& cfg,
                                    const Tensor& image) {
    if (cfg.beam < 1) throw ContractError("caption_decode: beam must be at least 1");
    const int64_t maxlen =
        cfg.max_len > 0 ? std::min(cfg.max_len, m.cfg.max_tokens) : m.cfg.max_tokens;
    const int64_t V = m.cfg.vocab_size;

    struct Hyp {
        std::vector<int64_t> seq;
        double logp = 0;
    };
    std::vector<Hyp> active{{{Vocab::kBos}, 0.0}};
    std::vector<std::pair<double, std::vector<int64_t>>> finished;  // (normalized, sequence)
    auto finish = [&](Hyp&& h) {
        const double norm = h.logp / static_cast<double>(h.seq.size() - 1);
        finished.emplace_back(norm, std::move(h.seq));
    };

    while (!active.empty()) {
        if (static_cast<int64_t>(active.front().seq.size()) >= maxlen) {
            for (Hyp& h : active) finish(std::move(h));
            break;
        }
        struct Cand {
            size_t parent;
            int64_t token;
            double logp;
        };
        std::vector<Cand> cands;
        cands.reserve(active.size() * static_cast<size_t>(V));
        for (size_t a = 0; a < active.size(); ++a) {
            Tensor logits = caption_logits(m, cfg.variant, image, active[a].seq);
            const int64_t last = logits.dim(0) - 1;
            // Log-softmax of the last row, in doubles for a stable ranking.
            std::vector<double> row(static_cast<size_t>(V));
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t v = 0; v < V; ++v) {
                row[static_cast<size_t>(v)] = logits.value_at(last * V + v);
                mx = std::max(mx, row[static_cast<size_t>(v)]);
            }
            double denom = 0;
            for (double x : row) denom += std::exp(x - mx);
            const double lse = mx + std::log(denom);
            for (int64_t v = 0; v < V; ++v) {
                cands.push_back({a, v, active[a].logp + row[static_cast<size_t>(v)] - lse});
            }
        }
        // Stable sort keeps (parent asc, token asc) among equal scores.
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Cand& a, const Cand& b) { return a.logp > b.logp; });
        std::vector<Hyp> next;
        for (size_t i = 0; i < cands.size() && i < static_cast<size_t>(cfg.beam); ++i) {
            Hyp h;
            h.seq = active[cands[i].parent].seq;
            h.seq.push_back(cands[i].token);
            h.logp = cands[i].logp;
            if (cands[i].token == Vocab::kEos) {
                finish(std::move(h));
            } else {
                next.push_back(std::move(h));
            }
        }
        active = std::move(next);
    }

    size_t best = 0;
    for (size_t i = 1; i < finished.size(); ++i) {
        if (finished[i].first > finished[best].first) best = i;
    }
    if (finished.empty()) throw ContractError("caption_decode: no hypothesis finished");
    return finished[best].second;
}

}  // namespace fiber
