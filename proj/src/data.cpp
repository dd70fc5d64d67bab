#include "fiber/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace fiber {

namespace {

using nlohmann::json;

const std::array<const char*, kNumShapes> kShapeNames{"square", "circle", "triangle"};
const std::array<const char*, kNumColors> kColorNames{"red",    "green",  "blue",
                                                      "yellow", "purple", "orange"};
const std::array<std::array<double, 3>, kNumColors> kColorRgb{{{1.0, 0.1, 0.1},
                                                               {0.1, 0.9, 0.1},
                                                               {0.1, 0.2, 1.0},
                                                               {1.0, 0.9, 0.1},
                                                               {0.7, 0.1, 0.9},
                                                               {1.0, 0.55, 0.1}}};
constexpr double kBackground = 0.05;

int shape_index(const std::string& name) {
    for (int i = 0; i < kNumShapes; ++i) {
        if (name == kShapeNames[static_cast<size_t>(i)]) return i;
    }
    throw DataError("unknown shape '" + name + "'");
}

int color_index(const std::string& name) {
    for (int i = 0; i < kNumColors; ++i) {
        if (name == kColorNames[static_cast<size_t>(i)]) return i;
    }
    throw DataError("unknown color '" + name + "'");
}

// Relation word describing object a's position relative to object b.
const char* relation_word(const SceneObject& a, const SceneObject& b) {
    const int dx = b.cx - a.cx, dy = b.cy - a.cy;
    if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? "left" : "right";
    return dy > 0 ? "above" : "below";
}

bool point_in_object(const SceneObject& o, double x, double y) {
    const Box b = o.box();
    switch (o.shape) {
        case ShapeKind::Square:
            return x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
        case ShapeKind::Circle: {
            const double r = o.size / 2.0;
            const double dx = x - o.cx, dy = y - o.cy;
            return dx * dx + dy * dy <= r * r;
        }
        case ShapeKind::Triangle: {
            // Apex top-center, base along the bottom edge of the box.
            const double ax = o.cx, ay = b.y1;
            const double bx = b.x1, by = b.y2;
            const double cx2 = b.x2, cy2 = b.y2;
            auto side = [](double px, double py, double qx, double qy, double rx, double ry) {
                return (qx - px) * (ry - py) - (qy - py) * (rx - px);
            };
            const double s1 = side(ax, ay, bx, by, x, y);
            const double s2 = side(bx, by, cx2, cy2, x, y);
            const double s3 = side(cx2, cy2, ax, ay, x, y);
            const bool has_neg = s1 < 0 || s2 < 0 || s3 < 0;
            const bool has_pos = s1 > 0 || s2 > 0 || s3 > 0;
            return !(has_neg && has_pos);
        }
    }
    return false;
}

}  // namespace

const char* shape_name(ShapeKind s) { return kShapeNames[static_cast<size_t>(s)]; }
const char* color_name(int color) { return kColorNames[static_cast<size_t>(color)]; }
void color_rgb(int color, double rgb[3]) {
    for (int i = 0; i < 3; ++i) rgb[i] = kColorRgb[static_cast<size_t>(color)][static_cast<size_t>(i)];
}

Vocab Vocab::standard() {
    Vocab v;
    v.words = {"<pad>", "<bos>", "<eos>", "<mask>",
               // colors
               "red", "green", "blue", "yellow", "purple", "orange",
               // shapes
               "square", "circle", "triangle",
               // spatial
               "left", "right", "above", "below", "near",
               // glue
               "a", "of", "and", "the", "is",
               // question words
               "what", "color", "shape", "object", "how", "many",
               // numbers
               "one", "two", "three", "four",
               // misc
               "small", "large", "with", "scene", "contains", "shows", "picture"};
    for (size_t i = 0; i < v.words.size(); ++i) v.index[v.words[i]] = static_cast<int64_t>(i);
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write vocab file " + path);
    for (const std::string& w : words) f << w << "\n";
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read vocab file " + path);
    Vocab v;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        v.index[line] = static_cast<int64_t>(v.words.size());
        v.words.push_back(line);
    }
    if (v.size() <= kMask) throw DataError("vocab file " + path + " is missing special tokens");
    return v;
}

int64_t Vocab::id(const std::string& word) const {
    auto it = index.find(word);
    if (it == index.end()) throw DataError("word '" + word + "' is not in the closed vocabulary");
    return it->second;
}

const std::string& Vocab::word(int64_t id) const {
    if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " out of range");
    return words[static_cast<size_t>(id)];
}

std::vector<int64_t> tokenize(const Vocab& v, const std::string& text) {
    std::vector<int64_t> ids{Vocab::kBos};
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) ids.push_back(v.id(w));
    ids.push_back(Vocab::kEos);
    return ids;
}

std::string detokenize(const Vocab& v, const std::vector<int64_t>& ids) {
    std::string out;
    for (int64_t id : ids) {
        if (v.is_special(id)) continue;
        if (!out.empty()) out += ' ';
        out += v.word(id);
    }
    return out;
}

int64_t num_labels() { return kNumColors + kNumShapes; }

const char* label_name(int64_t label) {
    if (label < 0 || label >= num_labels()) throw DataError("label out of range");
    return label < kNumColors ? kColorNames[static_cast<size_t>(label)]
                              : kShapeNames[static_cast<size_t>(label - kNumColors)];
}

SceneSpec generate_scene(Rng& rng) {
    for (;;) {
        const int count = 1 + static_cast<int>(rng.uniform_int(4));
        // Distinct colors keep every object phrase unambiguous.
        std::array<int, kNumColors> colors{0, 1, 2, 3, 4, 5};
        for (int i = kNumColors - 1; i > 0; --i) {
            const int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i + 1)));
            std::swap(colors[static_cast<size_t>(i)], colors[static_cast<size_t>(j)]);
        }
        SceneSpec spec;
        bool ok = true;
        for (int i = 0; i < count && ok; ++i) {
            SceneObject o;
            o.shape = static_cast<ShapeKind>(rng.uniform_int(kNumShapes));
            o.color = colors[static_cast<size_t>(i)];
            o.size = 10 + 2 * static_cast<int>(rng.uniform_int(7));  // 10..22, even
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                const int half = o.size / 2;
                o.cx = half + static_cast<int>(rng.uniform_int(
                                 static_cast<uint64_t>(kCanvas - o.size + 1)));
                o.cy = half + static_cast<int>(rng.uniform_int(
                                 static_cast<uint64_t>(kCanvas - o.size + 1)));
                placed = true;
                for (const SceneObject& prev : spec.objects) {
                    if (iou(o.box(), prev.box()) >= 0.1) {
                        placed = false;
                        break;
                    }
                }
            }
            if (placed) {
                spec.objects.push_back(o);
            } else {
                ok = false;  // regenerate the whole scene with fresh sizes
            }
        }
        if (ok) return spec;
    }
}

Tensor render(const SceneSpec& spec, Dtype dtype) {
    Tensor img = Tensor::full({kCanvas, kCanvas, 3}, kBackground, dtype);
    auto paint = [&](int64_t r, int64_t c, const double rgb[3]) {
        const int64_t base = (r * kCanvas + c) * 3;
        if (dtype == Dtype::F32) {
            auto d = img.mutable_data<float>();
            for (int64_t i = 0; i < 3; ++i) d[base + i] = static_cast<float>(rgb[i]);
        } else {
            auto d = img.mutable_data<double>();
            for (int64_t i = 0; i < 3; ++i) d[base + i] = rgb[i];
        }
    };
    for (const SceneObject& o : spec.objects) {
        double rgb[3];
        color_rgb(o.color, rgb);
        const Box b = o.box();
        const int64_t r0 = std::max<int64_t>(0, static_cast<int64_t>(b.y1));
        const int64_t r1 = std::min<int64_t>(kCanvas, static_cast<int64_t>(b.y2) + 1);
        const int64_t c0 = std::max<int64_t>(0, static_cast<int64_t>(b.x1));
        const int64_t c1 = std::min<int64_t>(kCanvas, static_cast<int64_t>(b.x2) + 1);
        for (int64_t r = r0; r < r1; ++r) {
            for (int64_t c = c0; c < c1; ++c) {
                if (point_in_object(o, c + 0.5, r + 0.5)) paint(r, c, rgb);
            }
        }
    }
    return img;
}

std::pair<std::string, std::vector<GroundingTarget>> make_caption(const SceneSpec& spec,
                                                                  const Vocab& v) {
    std::vector<std::string> words;
    std::vector<GroundingTarget> targets;
    auto phrase = [&](const SceneObject& o) {
        words.emplace_back("a");
        const auto start = static_cast<int64_t>(words.size());
        words.emplace_back(color_name(o.color));
        words.emplace_back(shape_name(o.shape));
        // +1 for the bos token at position 0 of the tokenized caption.
        targets.push_back(GroundingTarget{o.box(), start + 1, start + 3});
    };
    phrase(spec.objects[0]);
    if (spec.objects.size() >= 2) {
        const std::string rel = relation_word(spec.objects[0], spec.objects[1]);
        words.push_back(rel);
        if (rel == "left" || rel == "right") words.emplace_back("of");
        phrase(spec.objects[1]);
        for (size_t i = 2; i < spec.objects.size(); ++i) {
            words.emplace_back("and");
            phrase(spec.objects[i]);
        }
    }
    std::string caption;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) caption += ' ';
        caption += words[i];
    }
    (void)v;  // vocabulary is closed; every template word is in it by construction
    return {caption, targets};
}

std::pair<std::string, int64_t> make_question(const SceneSpec& spec) {
    std::array<int, kNumShapes> shape_count{0, 0, 0};
    for (const SceneObject& o : spec.objects) shape_count[static_cast<size_t>(o.shape)]++;
    for (const SceneObject& o : spec.objects) {
        if (shape_count[static_cast<size_t>(o.shape)] == 1) {
            return {std::string("what color is the ") + shape_name(o.shape),
                    static_cast<int64_t>(o.color)};
        }
    }
    const SceneObject& o = spec.objects[0];
    return {std::string("what shape is the ") + color_name(o.color) + " object",
            static_cast<int64_t>(kNumColors + static_cast<int>(o.shape))};
}

Record make_record(uint64_t seed, uint64_t index, const Vocab& v) {
    Rng rng(hash_combine(seed, index));
    Record r;
    r.scene = generate_scene(rng);
    auto [caption, targets] = make_caption(r.scene, v);
    r.caption = std::move(caption);
    r.targets = std::move(targets);
    r.tokens = tokenize(v, r.caption);
    auto [question, label] = make_question(r.scene);
    r.question = std::move(question);
    r.question_tokens = tokenize(v, r.question);
    r.label = label;
    return r;
}

Dataset generate_dataset(uint64_t seed, int64_t count, const Vocab& v) {
    Dataset d;
    d.records.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        d.records.push_back(make_record(seed, static_cast<uint64_t>(i), v));
    }
    return d;
}

void save_dataset(const Dataset& d, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write dataset file " + path);
    for (const Record& r : d.records) {
        json scene = json::array();
        for (const SceneObject& o : r.scene.objects) {
            scene.push_back({{"shape", shape_name(o.shape)},
                             {"color", color_name(o.color)},
                             {"cx", o.cx},
                             {"cy", o.cy},
                             {"size", o.size}});
        }
        json targets = json::array();
        for (const GroundingTarget& t : r.targets) {
            targets.push_back({{"box", {t.box.x1, t.box.y1, t.box.x2, t.box.y2}},
                               {"span", {t.span_start, t.span_end}}});
        }
        json rec{{"scene", scene},
                 {"caption", r.caption},
                 {"tokens", r.tokens},
                 {"targets", targets},
                 {"question", r.question},
                 {"question_tokens", r.question_tokens},
                 {"label", label_name(r.label)},
                 {"pixels", "from_scene"}};
        f << rec.dump() << "\n";
    }
}

Dataset load_dataset(const std::string& path, const Vocab& v) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read dataset file " + path);
    Dataset d;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("dataset " + path + " line " + std::to_string(line_no) + ": " +
                            e.what());
        }
        try {
            Record r;
            for (const json& jo : rec.at("scene")) {
                SceneObject o;
                o.shape = static_cast<ShapeKind>(shape_index(jo.at("shape").get<std::string>()));
                o.color = color_index(jo.at("color").get<std::string>());
                o.cx = jo.at("cx").get<int>();
                o.cy = jo.at("cy").get<int>();
                o.size = jo.at("size").get<int>();
                r.scene.objects.push_back(o);
            }
            r.caption = rec.at("caption").get<std::string>();
            r.tokens = rec.at("tokens").get<std::vector<int64_t>>();
            for (const json& jt : rec.at("targets")) {
                GroundingTarget t;
                const auto& b = jt.at("box");
                t.box = Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                            b.at(3).get<double>()};
                t.span_start = jt.at("span").at(0).get<int64_t>();
                t.span_end = jt.at("span").at(1).get<int64_t>();
                r.targets.push_back(t);
            }
            r.question = rec.at("question").get<std::string>();
            r.question_tokens = rec.at("question_tokens").get<std::vector<int64_t>>();
            const std::string label = rec.at("label").get<std::string>();
            r.label = -1;
            for (int64_t i = 0; i < num_labels(); ++i) {
                if (label == label_name(i)) r.label = i;
            }
            if (r.label < 0) throw DataError("unknown label '" + label + "'");
            if (r.tokens != tokenize(v, r.caption)) {
                throw DataError("caption tokens disagree with the vocabulary");
            }
            d.records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw DataError("dataset " + path + " line " + std::to_string(line_no) + ": " +
                            e.what());
        }
    }
    return d;
}

uint64_t fnv1a64(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 14695981039346656037ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read file " + path);
    std::string contents((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(contents.data(), contents.size());
}

double recall_at_k(const std::vector<std::vector<int64_t>>& rankings,
                   const std::vector<int64_t>& gold, int64_t k) {
    if (rankings.size() != gold.size()) {
        throw ShapeError("recall_at_k: " + std::to_string(rankings.size()) + " rankings for " +
                         std::to_string(gold.size()) + " gold labels");
    }
    if (rankings.empty()) return 0.0;
    int64_t hits = 0;
    for (size_t q = 0; q < rankings.size(); ++q) {
        const auto& r = rankings[q];
        const int64_t depth = std::min<int64_t>(k, static_cast<int64_t>(r.size()));
        for (int64_t i = 0; i < depth; ++i) {
            if (r[static_cast<size_t>(i)] == gold[q]) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

GroundingRecall grounding_recall(const std::vector<std::vector<Box>>& ranked_boxes,
                                 const std::vector<Box>& gold, double iou_thresh) {
    if (ranked_boxes.size() != gold.size()) {
        throw ShapeError("grounding_recall: box lists and gold boxes disagree in count");
    }
    GroundingRecall out;
    if (ranked_boxes.empty()) return out;
    auto hit_at = [&](size_t q, int64_t k) {
        const auto& boxes = ranked_boxes[q];
        const int64_t depth = std::min<int64_t>(k, static_cast<int64_t>(boxes.size()));
        for (int64_t i = 0; i < depth; ++i) {
            if (iou(boxes[static_cast<size_t>(i)], gold[q]) >= iou_thresh) return true;
        }
        return false;
    };
    for (size_t q = 0; q < ranked_boxes.size(); ++q) {
        out.r1 += hit_at(q, 1) ? 1 : 0;
        out.r5 += hit_at(q, 5) ? 1 : 0;
        out.r10 += hit_at(q, 10) ? 1 : 0;
    }
    const auto n = static_cast<double>(ranked_boxes.size());
    out.r1 /= n;
    out.r5 /= n;
    out.r10 /= n;
    return out;
}

double average_precision(std::vector<std::pair<double, Box>> preds, const std::vector<Box>& golds,
                         double iou_thresh) {
    if (golds.empty()) return 0.0;
    std::stable_sort(preds.begin(), preds.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<bool> used(golds.size(), false);
    double ap = 0.0;
    int64_t tp = 0;
    for (size_t rank = 0; rank < preds.size(); ++rank) {
        double best = iou_thresh;
        int64_t best_g = -1;
        for (size_t g = 0; g < golds.size(); ++g) {
            if (used[g]) continue;
            const double v = iou(preds[rank].second, golds[g]);
            if (v >= best) {
                best = v;
                best_g = static_cast<int64_t>(g);
            }
        }
        if (best_g >= 0) {
            used[static_cast<size_t>(best_g)] = true;
            ++tp;
            ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
        }
    }
    return ap / static_cast<double>(golds.size());
}

double bleu4(const std::vector<std::vector<int64_t>>& candidates,
             const std::vector<std::vector<int64_t>>& references) {
    if (candidates.size() != references.size()) {
        throw ShapeError("bleu4: candidate and reference counts differ");
    }
    if (candidates.empty()) return 0.0;
    double cand_len = 0, ref_len = 0;
    std::array<int64_t, 4> matches{0, 0, 0, 0};
    std::array<int64_t, 4> totals{0, 0, 0, 0};
    using Gram = std::vector<int64_t>;
    for (size_t i = 0; i < candidates.size(); ++i) {
        const auto& c = candidates[i];
        const auto& r = references[i];
        cand_len += static_cast<double>(c.size());
        ref_len += static_cast<double>(r.size());
        for (int n = 1; n <= 4; ++n) {
            std::map<Gram, int64_t> ref_counts;
            for (size_t j = 0; j + n <= r.size(); ++j) {
                ref_counts[Gram(r.begin() + static_cast<int64_t>(j),
                                r.begin() + static_cast<int64_t>(j) + n)]++;
            }
            std::map<Gram, int64_t> cand_counts;
            for (size_t j = 0; j + n <= c.size(); ++j) {
                cand_counts[Gram(c.begin() + static_cast<int64_t>(j),
                                 c.begin() + static_cast<int64_t>(j) + n)]++;
            }
            for (const auto& [gram, count] : cand_counts) {
                auto it = ref_counts.find(gram);
                matches[static_cast<size_t>(n - 1)] +=
                    std::min(count, it == ref_counts.end() ? 0 : it->second);
            }
            if (c.size() >= static_cast<size_t>(n)) {
                totals[static_cast<size_t>(n - 1)] += static_cast<int64_t>(c.size()) - n + 1;
            }
        }
    }
    double log_score = 0;
    for (int n = 0; n < 4; ++n) {
        if (matches[static_cast<size_t>(n)] == 0 || totals[static_cast<size_t>(n)] == 0) {
            return 0.0;
        }
        log_score += std::log(static_cast<double>(matches[static_cast<size_t>(n)]) /
                              static_cast<double>(totals[static_cast<size_t>(n)])) /
                     4.0;
    }
    const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    return bp * std::exp(log_score);
}

}  // namespace fiber
