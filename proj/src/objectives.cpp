#include "fiber/objectives.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "fiber/nn.hpp"

namespace fiber {

Tensor itc_loss(const Tensor& sim, const Tensor& log_inv_tau) {
    if (sim.ndim() != 2 || sim.dim(0) != sim.dim(1))
        throw ShapeError("itc_loss: similarity must be square, got " + shape_str(sim.shape()));
    const int64_t n = sim.dim(0);
    if (n < 2)
        throw ContractError("itc_loss: contrast needs at least 2 pairs, got " + std::to_string(n));
    if (log_inv_tau.numel() != 1) throw ShapeError("itc_loss: temperature must be a scalar");

    Tensor logits = mul(sim, exp(log_inv_tau));
    std::vector<double> eye(static_cast<size_t>(n) * n, 0.0);
    for (int64_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    Tensor diag = Tensor::from_values({n, n}, eye, sim.dtype());

    // Rows: each image against all texts; columns: each text against all
    // images. The positives sit on the diagonal in both views.
    Tensor picked = add(mul(log_softmax(logits, -1), diag), mul(log_softmax(logits, 0), diag));
    return mul_scalar(reduce_sum_all(picked), -0.5 / static_cast<double>(n));
}

MlmBatch mask_tokens(const std::vector<int64_t>& ids, Rng& rng, double rate, int64_t vocab_size,
                     int64_t mask_id, int64_t num_special) {
    if (rate < 0.0 || rate > 1.0) throw ContractError("mask_tokens: rate must lie in [0, 1]");
    if (vocab_size <= num_special)
        throw ContractError("mask_tokens: vocabulary has no regular tokens");
    if (mask_id < 0 || mask_id >= num_special)
        throw ContractError("mask_tokens: mask id must be a special token");

    MlmBatch batch;
    batch.input_ids = ids;
    batch.labels = ids;
    batch.masked.assign(ids.size(), 0);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab_size)
            throw DataError("mask_tokens: token id " + std::to_string(ids[i]) + " out of range");
        if (ids[i] < num_special) continue;  // specials are never corrupted
        if (rng.uniform() >= rate) continue;
        batch.masked[i] = 1;
        const double u = rng.uniform();
        if (u < 0.8) {
            batch.input_ids[i] = mask_id;
        } else if (u < 0.9) {
            batch.input_ids[i] =
                num_special + static_cast<int64_t>(rng.uniform_int(
                                  static_cast<uint64_t>(vocab_size - num_special)));
        }
        // else: keep the original token, but it still contributes to the loss
    }
    return batch;
}

Tensor mlm_loss(const Tensor& logits, const MlmBatch& batch, bool* empty) {
    if (logits.ndim() != 2)
        throw ShapeError("mlm_loss: logits must be [tokens, vocab], got " +
                         shape_str(logits.shape()));
    const int64_t len = logits.dim(0);
    const int64_t vocab = logits.dim(1);
    if (static_cast<int64_t>(batch.input_ids.size()) != len ||
        static_cast<int64_t>(batch.labels.size()) != len ||
        static_cast<int64_t>(batch.masked.size()) != len)
        throw ShapeError("mlm_loss: batch length does not match logits rows");

    std::vector<int64_t> positions;
    for (int64_t i = 0; i < len; ++i)
        if (batch.masked[i]) positions.push_back(i);
    if (empty) *empty = positions.empty();
    if (positions.empty()) return Tensor::zeros({1}, logits.dtype());

    std::vector<double> onehot(positions.size() * static_cast<size_t>(vocab), 0.0);
    for (size_t k = 0; k < positions.size(); ++k) {
        const int64_t label = batch.labels[positions[k]];
        if (label < 0 || label >= vocab)
            throw DataError("mlm_loss: label id " + std::to_string(label) + " out of range");
        onehot[k * vocab + label] = 1.0;
    }
    Tensor rows = gather_rows(log_softmax(logits, -1), positions);
    Tensor select =
        Tensor::from_values({static_cast<int64_t>(positions.size()), vocab}, onehot, logits.dtype());
    return mul_scalar(reduce_sum_all(mul(rows, select)),
                      -1.0 / static_cast<double>(positions.size()));
}

std::vector<int64_t> sample_hard_negatives(const Tensor& sim, Rng& rng) {
    if (sim.ndim() != 2 || sim.dim(0) != sim.dim(1))
        throw ShapeError("sample_hard_negatives: similarity must be square");
    const int64_t n = sim.dim(0);
    if (n < 2) throw ContractError("sample_hard_negatives: needs at least 2 pairs");

    const std::vector<double> s = sim.to_doubles();
    std::vector<int64_t> picks(n);
    std::vector<double> prob(n);
    for (int64_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < n; ++j)
            if (j != i) mx = std::max(mx, s[i * n + j]);
        double z = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            prob[j] = j == i ? 0.0 : std::exp(s[i * n + j] - mx);
            z += prob[j];
        }
        const double u = rng.uniform() * z;
        double cum = 0.0;
        int64_t pick = i == n - 1 ? n - 2 : n - 1;  // fallback for rounding at the top end
        for (int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            cum += prob[j];
            if (u < cum) {
                pick = j;
                break;
            }
        }
        picks[i] = pick;
    }
    return picks;
}

Tensor itm_loss(const Tensor& pair_logits, bool is_match) {
    if (pair_logits.ndim() != 1 || pair_logits.dim(0) != 2)
        throw ShapeError("itm_loss: expected [2] logits, got " + shape_str(pair_logits.shape()));
    const std::array<double, 2> onehot = is_match ? std::array<double, 2>{0.0, 1.0}
                                                  : std::array<double, 2>{1.0, 0.0};
    Tensor select = Tensor::from_values({2}, onehot, pair_logits.dtype());
    return mul_scalar(reduce_sum_all(mul(log_softmax(pair_logits, -1), select)), -1.0);
}

Tensor itm_logits(const Model& m, const EncoderOutput& enc) {
    if (enc.mode != EncodeMode::Fused || !enc.text_features.defined() || enc.image_scales.empty())
        throw ContractError("itm_logits: matching scores need a fused encoding");
    Tensor txt = reduce_mean(enc.text_features, 0);
    const Tensor& top = enc.image_scales.back();
    Tensor img = reduce_mean(reshape(top, {top.dim(0) * top.dim(1), top.dim(2)}), 0);
    const std::array<Tensor, 2> halves{txt, img};
    return linear_forward(m.itm_fc2, gelu(linear_forward(m.itm_fc1, concat(halves, 0))));
}

std::vector<FpnLocation> fpn_locations(int64_t image_size, const std::vector<int64_t>& grids) {
    std::vector<FpnLocation> out;
    for (size_t level = 0; level < grids.size(); ++level) {
        const int64_t g = grids[level];
        if (g <= 0 || image_size % g != 0)
            throw ShapeError("fpn_locations: grid " + std::to_string(g) +
                             " does not divide image size " + std::to_string(image_size));
        const double stride = static_cast<double>(image_size / g);
        for (int64_t r = 0; r < g; ++r)
            for (int64_t c = 0; c < g; ++c)
                out.push_back({static_cast<int64_t>(level), (c + 0.5) * stride, (r + 0.5) * stride,
                               stride});
    }
    return out;
}

std::vector<std::pair<double, double>> default_scale_ranges(int64_t levels) {
    if (levels <= 0) throw ContractError("default_scale_ranges: need at least one level");
    // Doubling bands over the longer box side: the finest level takes
    // everything up to 16 px, each next level the following octave, the
    // coarsest everything beyond its lower bound.
    std::vector<std::pair<double, double>> out;
    const double inf = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < levels; ++i) {
        const double lo = i == 0 ? 0.0 : 16.0 * static_cast<double>(1LL << (i - 1));
        const double hi = i == levels - 1 ? inf : 16.0 * static_cast<double>(1LL << i);
        out.emplace_back(lo, hi);
    }
    return out;
}

std::vector<int64_t> assign_targets(const std::vector<FpnLocation>& locations,
                                    const std::vector<Box>& targets, double radius,
                                    const std::vector<std::pair<double, double>>* ranges) {
    int64_t levels = 0;
    for (const auto& loc : locations) levels = std::max(levels, loc.level + 1);
    const std::vector<std::pair<double, double>> bands =
        ranges ? *ranges : default_scale_ranges(std::max<int64_t>(levels, 1));
    if (static_cast<int64_t>(bands.size()) < levels)
        throw ContractError("assign_targets: missing scale range for some level");
    for (const Box& b : targets)
        if (!b.valid()) throw ContractError("assign_targets: degenerate target box");

    std::vector<int64_t> out(locations.size(), -1);
    for (size_t i = 0; i < locations.size(); ++i) {
        const FpnLocation& loc = locations[i];
        const auto& [lo, hi] = bands[loc.level];
        int64_t best = -1;
        double best_area = std::numeric_limits<double>::infinity();
        for (size_t t = 0; t < targets.size(); ++t) {
            const Box& b = targets[t];
            const double longer = std::max(b.width(), b.height());
            if (longer <= lo || longer > hi) continue;
            if (loc.x < b.x1 || loc.x > b.x2 || loc.y < b.y1 || loc.y > b.y2) continue;
            const double r = radius * loc.stride;
            if (std::abs(loc.x - (b.x1 + b.x2) / 2) > r ||
                std::abs(loc.y - (b.y1 + b.y2) / 2) > r)
                continue;
            if (b.area() < best_area) {
                best = static_cast<int64_t>(t);
                best_area = b.area();
            }
        }
        out[i] = best;
    }
    return out;
}

Tensor grounding_loss(const Tensor& S, const std::vector<GroundingTarget>& targets,
                      const std::vector<int64_t>& assignment) {
    if (S.ndim() != 2)
        throw ShapeError("grounding_loss: scores must be [regions, tokens], got " +
                         shape_str(S.shape()));
    const int64_t regions = S.dim(0);
    const int64_t tokens = S.dim(1);
    if (static_cast<int64_t>(assignment.size()) != regions)
        throw ShapeError("grounding_loss: one assignment per region required");

    std::vector<double> pos(static_cast<size_t>(regions) * tokens, 0.0);
    std::vector<double> neg(static_cast<size_t>(regions) * tokens, 1.0);
    int64_t npos = 0;
    for (int64_t r = 0; r < regions; ++r) {
        const int64_t t = assignment[r];
        if (t < 0) continue;
        if (t >= static_cast<int64_t>(targets.size()))
            throw ContractError("grounding_loss: assignment names a missing target");
        const GroundingTarget& g = targets[t];
        if (g.span_start < 0 || g.span_end > tokens || g.span_start >= g.span_end)
            throw ContractError("grounding_loss: span does not fit the token axis");
        for (int64_t l = g.span_start; l < g.span_end; ++l) {
            pos[r * tokens + l] = 1.0;
            neg[r * tokens + l] = 0.0;
            ++npos;
        }
    }
    Tensor pos_mask = Tensor::from_values({regions, tokens}, pos, S.dtype());
    Tensor neg_mask = Tensor::from_values({regions, tokens}, neg, S.dtype());

    // Stable focal terms: -log sigmoid(s) = softplus(-s), -log(1 - sigmoid(s))
    // = softplus(s); the modulating factor downweights easy entries.
    Tensor p = sigmoid(S);
    Tensor one_minus_p = add_scalar(mul_scalar(p, -1.0), 1.0);
    Tensor pos_term = mul(mul(one_minus_p, one_minus_p), softplus(mul_scalar(S, -1.0)));
    Tensor neg_term = mul(mul(p, p), softplus(S));
    Tensor focal = add(mul_scalar(mul(pos_mask, pos_term), 0.25),
                       mul_scalar(mul(neg_mask, neg_term), 0.75));
    return mul_scalar(reduce_sum_all(focal), 1.0 / static_cast<double>(std::max<int64_t>(npos, 1)));
}

double giou(const Box& a, const Box& b) {
    if (!a.valid() || !b.valid()) throw ContractError("giou: degenerate box");
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    const double enclose = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) *
                           (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
    return inter / uni - (enclose - uni) / enclose;
}

Tensor giou_loss(const BoxesT& pred, const BoxesT& gold) {
    const std::array<const Tensor*, 8> coords = {&pred.x1, &pred.y1, &pred.x2, &pred.y2,
                                                 &gold.x1, &gold.y1, &gold.x2, &gold.y2};
    for (const Tensor* c : coords)
        if (!c->defined() || c->ndim() != 1 || c->dim(0) != pred.x1.dim(0))
            throw ShapeError("giou_loss: coordinates must be matching [n] tensors");
    {
        // The regression decode produces strictly ordered corners; anything
        // else means the caller fed raw offsets.
        const auto pw = sub(pred.x2, pred.x1).to_doubles();
        const auto ph = sub(pred.y2, pred.y1).to_doubles();
        const auto gw = sub(gold.x2, gold.x1).to_doubles();
        const auto gh = sub(gold.y2, gold.y1).to_doubles();
        for (size_t i = 0; i < pw.size(); ++i)
            if (pw[i] <= 0 || ph[i] <= 0 || gw[i] <= 0 || gh[i] <= 0)
                throw ContractError("giou_loss: degenerate box at row " + std::to_string(i));
    }

    Tensor zero = Tensor::zeros({1}, pred.x1.dtype());
    Tensor area_p = mul(sub(pred.x2, pred.x1), sub(pred.y2, pred.y1));
    Tensor area_g = mul(sub(gold.x2, gold.x1), sub(gold.y2, gold.y1));
    Tensor iw = maximum(sub(minimum(pred.x2, gold.x2), maximum(pred.x1, gold.x1)), zero);
    Tensor ih = maximum(sub(minimum(pred.y2, gold.y2), maximum(pred.y1, gold.y1)), zero);
    Tensor inter = mul(iw, ih);
    Tensor uni = sub(add(area_p, area_g), inter);
    Tensor ew = sub(maximum(pred.x2, gold.x2), minimum(pred.x1, gold.x1));
    Tensor eh = sub(maximum(pred.y2, gold.y2), minimum(pred.y1, gold.y1));
    Tensor enclose = mul(ew, eh);
    Tensor g = sub(divide(inter, uni), divide(sub(enclose, uni), enclose));
    return reduce_mean_all(add_scalar(mul_scalar(g, -1.0), 1.0));
}

double centerness(double x, double y, const Box& box) {
    if (!box.valid()) throw ContractError("centerness: degenerate box");
    const double l = x - box.x1, r = box.x2 - x, t = y - box.y1, b = box.y2 - y;
    if (l < 0 || r < 0 || t < 0 || b < 0)
        throw ContractError("centerness: location outside the box");
    return std::sqrt((std::min(l, r) / std::max(l, r)) * (std::min(t, b) / std::max(t, b)));
}

Tensor centerness_bce(const Tensor& logits, const Tensor& targets) {
    if (logits.ndim() != 1 || targets.ndim() != 1 || logits.dim(0) != targets.dim(0))
        throw ShapeError("centerness_bce: logits and targets must be matching [n] tensors");
    for (double c : targets.to_doubles())
        if (c < 0.0 || c > 1.0) throw ContractError("centerness_bce: target outside [0, 1]");
    // -c log sigmoid(z) - (1-c) log(1-sigmoid(z)) == softplus(z) - c z
    return reduce_mean_all(sub(softplus(logits), mul(targets.detached_clone(), logits)));
}

}  // namespace fiber
