#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fiber/geometry.hpp"
#include "fiber/tensor.hpp"

namespace fiber {

// ---------------------------------------------------------------------------
// Synthetic scenes: 1-4 colored shapes on a 64×64 canvas with exact boxes,
// templated captions with recorded phrase spans, and a closed-world
// whitespace tokenizer. Everything derives deterministically from a seed.
// ---------------------------------------------------------------------------

constexpr int64_t kCanvas = 64;

enum class ShapeKind : int { Square = 0, Circle = 1, Triangle = 2 };
constexpr int kNumShapes = 3;
const char* shape_name(ShapeKind s);

constexpr int kNumColors = 6;
const char* color_name(int color);
// RGB in [0,1] for rendering.
void color_rgb(int color, double rgb[3]);

struct SceneObject {
    ShapeKind shape = ShapeKind::Square;
    int color = 0;
    int cx = 0, cy = 0;  // center, integer pixels
    int size = 0;        // full side / diameter, even

    Box box() const {
        return Box{static_cast<double>(cx - size / 2), static_cast<double>(cy - size / 2),
                   static_cast<double>(cx + size / 2), static_cast<double>(cy + size / 2)};
    }
};

struct SceneSpec {
    std::vector<SceneObject> objects;  // 1-4, pairwise box IoU < 0.1
};

// Token span [start, end) into the tokenized caption (bos included in the
// indexing), naming exactly the object's color and shape words.
struct GroundingTarget {
    Box box;
    int64_t span_start = 0;
    int64_t span_end = 0;
};

struct Vocab {
    std::vector<std::string> words;
    std::unordered_map<std::string, int64_t> index;

    static constexpr int64_t kPad = 0, kBos = 1, kEos = 2, kMask = 3;

    // The fixed closed-world vocabulary (specials first, then words).
    static Vocab standard();
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    int64_t size() const { return static_cast<int64_t>(words.size()); }
    int64_t id(const std::string& word) const;  // DataError on unknown words
    const std::string& word(int64_t id) const;
    bool is_special(int64_t id) const { return id >= 0 && id <= kMask; }
};

// Whitespace tokenization over the closed vocabulary, bos/eos framed.
std::vector<int64_t> tokenize(const Vocab& v, const std::string& text);
std::string detokenize(const Vocab& v, const std::vector<int64_t>& ids);

// Classification labels: the six colors then the three shapes.
int64_t num_labels();
const char* label_name(int64_t label);

struct Record {
    SceneSpec scene;
    std::string caption;
    std::vector<int64_t> tokens;  // tokenize(caption)
    std::vector<GroundingTarget> targets;
    std::string question;
    std::vector<int64_t> question_tokens;
    int64_t label = 0;  // answer to `question`
};

SceneSpec generate_scene(Rng& rng);

// Deterministic rasterization at pixel centers -> [64, 64, 3] in [0,1].
Tensor render(const SceneSpec& spec, Dtype dtype = Dtype::F32);

// Caption string plus one grounding target per object; spans index into
// tokenize(caption).
std::pair<std::string, std::vector<GroundingTarget>> make_caption(const SceneSpec& spec,
                                                                  const Vocab& v);

// Question and label derived from the scene: asks the color of a
// uniquely-shaped object when one exists, otherwise the shape of the first
// object's (unique) color.
std::pair<std::string, int64_t> make_question(const SceneSpec& spec);

// Record `index` of the dataset owned by `seed`; pure function of both.
Record make_record(uint64_t seed, uint64_t index, const Vocab& v);

struct Dataset {
    std::vector<Record> records;
};

Dataset generate_dataset(uint64_t seed, int64_t count, const Vocab& v);

// Newline-delimited records; pixels are not embedded (a `pixels` flag marks
// them re-renderable from the scene).
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path, const Vocab& v);

uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64_file(const std::string& path);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Fraction of queries whose gold index appears in the top k of its ranking.
double recall_at_k(const std::vector<std::vector<int64_t>>& rankings,
                   const std::vector<int64_t>& gold, int64_t k);

struct GroundingRecall {
    double r1 = 0, r5 = 0, r10 = 0;
};

// Per phrase: hit at k if any of the top-k ranked boxes reaches IoU >= thresh
// (inclusive) with the gold box.
GroundingRecall grounding_recall(const std::vector<std::vector<Box>>& ranked_boxes,
                                 const std::vector<Box>& gold, double iou_thresh = 0.5);

// All-point AP over score-sorted predictions; each gold matches at most once.
double average_precision(std::vector<std::pair<double, Box>> preds, const std::vector<Box>& golds,
                         double iou_thresh);

// Corpus BLEU with uniform 4-gram weights and brevity penalty, no smoothing;
// any zero n-gram precision gives 0.
double bleu4(const std::vector<std::vector<int64_t>>& candidates,
             const std::vector<std::vector<int64_t>>& references);

}  // namespace fiber
