#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fiber/data.hpp"
#include "fiber/fusion.hpp"
#include "fiber/tensor.hpp"

namespace fiber {

// ---------------------------------------------------------------------------
// Training losses: contrastive alignment, masked-language modeling,
// image-text matching with hard negatives, word-region grounding, and the
// anchor-free localization losses with their target assignment.
// ---------------------------------------------------------------------------

// Symmetric InfoNCE over an [N, N] matrix of raw cosine similarities whose
// diagonal holds the positive pairs. `log_inv_tau` is the learnable scalar t
// with 1/tau = exp(t), so tau stays positive. Mean of the image-to-text and
// text-to-image cross-entropies. N < 2 is a contract violation.
Tensor itc_loss(const Tensor& sim, const Tensor& log_inv_tau);

struct MlmBatch {
    std::vector<int64_t> input_ids;  // ids after corruption
    std::vector<int64_t> labels;     // original ids (meaningful where masked)
    std::vector<uint8_t> masked;     // 1 at positions contributing to the loss
};

// Independently masks each eligible token (id >= num_special) with
// probability `rate`; masked positions get the mask token 80% of the time, a
// random regular token 10%, and keep their value 10%. Deterministic given
// the rng state.
MlmBatch mask_tokens(const std::vector<int64_t>& ids, Rng& rng, double rate = 0.15,
                     int64_t vocab_size = 40, int64_t mask_id = 3, int64_t num_special = 4);

// Mean cross-entropy of `logits` [L, V] against batch.labels at masked
// positions. Zero masked positions yield a loss of exactly 0 and set *empty.
Tensor mlm_loss(const Tensor& logits, const MlmBatch& batch, bool* empty = nullptr);

// For each row of the scaled similarity matrix, draws one negative column
// from the softmax over that row's off-diagonal entries (the positive is
// never drawn). Call with the transpose for the other direction.
std::vector<int64_t> sample_hard_negatives(const Tensor& sim, Rng& rng);

// Binary cross-entropy of a matching head's [2] logits (index 1 = match).
Tensor itm_loss(const Tensor& pair_logits, bool is_match);

// The matching head itself: concatenated mean-pooled text and top-scale
// image features -> two-layer MLP -> [2] logits. Requires a fused encoding.
Tensor itm_logits(const Model& m, const EncoderOutput& enc);

// ---------------------------------------------------------------------------
// Grounding and localization
// ---------------------------------------------------------------------------

// One grid-cell center of a feature pyramid level, in pixel units.
struct FpnLocation {
    int64_t level = 0;
    double x = 0, y = 0;
    double stride = 0;
};

// Cell centers for each pyramid level, finest first; stride is derived from
// the grid side (image_size / grid).
std::vector<FpnLocation> fpn_locations(int64_t image_size, const std::vector<int64_t>& grids);

// [min, max) range of the longer box side each level is responsible for.
std::vector<std::pair<double, double>> default_scale_ranges(int64_t levels);

// For every location: index of the target box it is positive for, or -1.
// A location is positive when it lies inside the box, within radius*stride
// of the box center (per axis), and the box's longer side falls in its
// level's scale range. Ties go to the smaller box.
std::vector<int64_t> assign_targets(const std::vector<FpnLocation>& locations,
                                    const std::vector<Box>& targets, double radius = 1.5,
                                    const std::vector<std::pair<double, double>>* ranges = nullptr);

// Focal binary cross-entropy (gamma = 2, positive balance 0.25) over the
// region-by-token score matrix S [R, L]. Entry (r, l) is positive when
// assignment[r] names a target whose token span contains l. Sum over all
// entries divided by max(1, #positive entries).
Tensor grounding_loss(const Tensor& S, const std::vector<GroundingTarget>& targets,
                      const std::vector<int64_t>& assignment);

// Generalized IoU in [-1, 1]: IoU minus the enclosing-box penalty.
// Degenerate (zero-area) boxes are a contract violation.
double giou(const Box& a, const Box& b);

// Differentiable boxes: four parallel [N] coordinate tensors.
struct BoxesT {
    Tensor x1, y1, x2, y2;
};

// Mean over rows of (1 - giou(pred, gold)). Both sides must be valid boxes
// (the regression decode guarantees this for predictions).
Tensor giou_loss(const BoxesT& pred, const BoxesT& gold);

// sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b))) for a location inside the
// box; 1 at the center, 0 on an edge, ContractError outside.
double centerness(double x, double y, const Box& box);

// Binary cross-entropy of centerness logits [N] against soft targets [N] in
// [0, 1], mean over rows (softplus(z) - c*z form, numerically stable).
Tensor centerness_bce(const Tensor& logits, const Tensor& targets);

}  // namespace fiber
