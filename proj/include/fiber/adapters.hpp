#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fiber/data.hpp"
#include "fiber/fusion.hpp"
#include "fiber/objectives.hpp"
#include "fiber/tensor.hpp"

namespace fiber {

// ---------------------------------------------------------------------------
// Task adapters: classification, detection/grounding over an FPN head,
// dual-encoder retrieval with fused re-ranking, and captioning.
// ---------------------------------------------------------------------------

// Label logits from a fused encoding: mean-pooled token features and
// mean-pooled top-scale image features, concatenated (text half first) into
// a two-layer MLP. ContractError on a dual-mode encoding or a model built
// without the classifier part.
Tensor classify(const Model& m, const EncoderOutput& enc);

// Per-location outputs of the detection head applied to the FPN pyramid over
// a fused encoding's image scales: a shared 4-layer conv tower per level,
// then three sibling 3x3 convs for box distances, centerness, and region
// features. Rows run over locations, finest level first, matching
// fpn_locations(image_size, grids).
struct RegionFeatures {
    std::vector<FpnLocation> locations;
    Tensor rows;        // [R, text_width] region features
    BoxesT boxes;       // decoded predictions, [R] per coordinate (unclamped)
    Tensor ctr_logits;  // [R]
};

// ContractError on dual encodings or a model without the detector part. Box
// decode: distance = exp(raw) * stride on each side of the cell center, so
// predicted boxes always have positive extent.
RegionFeatures od_head(const Model& m, const EncoderOutput& enc);

// Word-region alignment scores S = rows · text_featuresᵀ, shape [R, L].
// ShapeError when the region and token widths disagree.
Tensor grounding_score(const RegionFeatures& regions, const EncoderOutput& enc);

struct Detection {
    Box box;  // clamped to image bounds
    int64_t span_start = 0, span_end = 0;
    double score = 0;
};

// Scores every FPN location against each caption token span:
//   score = sigmoid(mean of S over the span) * sigmoid(centerness logit),
// keeps scores strictly above `score_thresh`, and applies greedy per-span
// NMS at `nms_iou`. Detections come back grouped by span (input order),
// best first within a span. ContractError when `spans` is empty (an empty
// caption grounds nothing) or a span exceeds the encoded token range.
std::vector<Detection> detect(const Model& m, const EncoderOutput& enc,
                              const std::vector<std::pair<int64_t, int64_t>>& spans,
                              double score_thresh, double nms_iou = 0.6);

// Newline-delimited serialization: "image_id x1 y1 x2 y2 span_start span_end score".
std::string format_detections(const std::string& image_id, const std::vector<Detection>& dets);

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

struct RankResult {
    std::vector<std::vector<int64_t>> order;  // per query, candidate indices best first
    std::vector<std::vector<double>> scores;  // aligned with `order`
    bool k_clamped = false;                   // k exceeded the corpus and was clamped
};

// Exact top-k cosine retrieval over L2-normalized rows; ties break toward
// the lower index. Run once per direction (swap the arguments for the other
// one). ShapeError on rank or width mismatches; ContractError when rows are
// not unit length.
RankResult retrieve_dual(const Tensor& queries, const Tensor& corpus, int64_t k);

// Re-ranks each query's dual top-k by final = dual + fused score, leaving
// the tail in dual order below the re-ranked set. `fused_score(q, c)` is
// consulted exactly k times per query. k = 0 reproduces the dual ranking;
// k = corpus reproduces ensemble_rank.
RankResult rerank_topk(const Tensor& dual_scores,
                       const std::function<double(int64_t, int64_t)>& fused_score, int64_t k);

// Full ranking by elementwise dual + fused sums. ShapeError on mismatch.
RankResult ensemble_rank(const Tensor& dual_scores, const Tensor& fused_scores);

// ---------------------------------------------------------------------------
// Captioning
// ---------------------------------------------------------------------------

struct CaptionerConfig {
    CaptionVariant variant = CaptionVariant::Seq2Seq;
    int64_t beam = 5;
    int64_t max_len = 0;  // 0: the model's max_tokens
};

// Teacher-forced mean cross-entropy of next-token prediction over the
// caption (bos ... eos). ContractError on fewer than two tokens.
Tensor caption_loss(const Model& m, CaptionVariant variant, const Tensor& image,
                    const std::vector<int64_t>& tokens);

// Beam-search decode from bos, ranking finished beams by length-normalized
// log-probability (sum divided by generated-token count). beam = 1 is exact
// greedy decoding. Deterministic; ties prefer the lower token id.
std::vector<int64_t> caption_decode(const Model& m, const CaptionerConfig& cfg,
                                    const Tensor& image);

}  // namespace fiber
