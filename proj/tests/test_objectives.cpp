#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fiber/objectives.hpp"

using namespace fiber;

namespace {

FusionConfig tiny_config() {
    FusionConfig cfg;
    cfg.strategy = Strategy::CoAttentionGated;
    cfg.fused_layers = 1;
    cfg.text_depth = 2;
    cfg.text_width = 16;
    cfg.max_tokens = 8;
    cfg.vocab_size = 12;
    cfg.image_size = 8;
    cfg.patch = 4;
    cfg.stage_depths = {1, 1};
    cfg.stage_widths = {8, 16};
    cfg.window = 1;
    cfg.heads = 2;
    cfg.embed_dim = 8;
    cfg.alpha_init = 0.7;
    cfg.dtype = Dtype::F64;
    return cfg;
}

std::vector<int64_t> some_tokens(Rng& rng, int64_t vocab, int64_t len) {
    std::vector<int64_t> ids{1};
    for (int64_t i = 0; i < len; ++i)
        ids.push_back(4 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(vocab - 4))));
    ids.push_back(2);
    return ids;
}

double sigmoid_d(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

// ---------------------------------------------------------------------------
// Contrastive loss
// ---------------------------------------------------------------------------

TEST_CASE("itc: uniform similarities give ln N at any temperature") {
    for (int64_t n : {2, 3, 5, 8}) {
        Tensor sim = Tensor::full({n, n}, 0.37);
        for (double t : {0.0, std::log(1 / 0.07), -1.5}) {
            Tensor loss = itc_loss(sim, Tensor::scalar(t));
            CHECK(loss.scalar_value() ==
                  doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-12));
        }
    }
}

TEST_CASE("itc: pinned 2x2 identity value at unit temperature") {
    Tensor sim = Tensor::from_values({2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor loss = itc_loss(sim, Tensor::scalar(0.0));
    CHECK(loss.scalar_value() == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-9));
    CHECK(loss.scalar_value() == doctest::Approx(0.3132616875182228).epsilon(1e-9));
}

TEST_CASE("itc: a 20-unit diagonal margin drives the loss below 1e-8") {
    const int64_t n = 4;
    std::vector<double> v(n * n, -20.0);
    for (int64_t i = 0; i < n; ++i) v[i * n + i] = 20.0;
    Tensor loss = itc_loss(Tensor::from_values({n, n}, v), Tensor::scalar(0.0));
    CHECK(loss.scalar_value() >= 0.0);
    CHECK(loss.scalar_value() < 1e-8);
}

TEST_CASE("itc: invariant to a constant shift of the similarities") {
    Rng rng(11);
    Tensor sim = Tensor::uniform({4, 4}, -1, 1, rng);
    const double base = itc_loss(sim, Tensor::scalar(0.4)).scalar_value();
    const double shifted = itc_loss(add_scalar(sim, 7.3), Tensor::scalar(0.4)).scalar_value();
    CHECK(shifted == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("itc: raising one diagonal entry strictly lowers the loss") {
    Rng rng(12);
    Tensor sim = Tensor::uniform({4, 4}, -1, 1, rng);
    const double before = itc_loss(sim, Tensor::scalar(0.0)).scalar_value();
    std::vector<double> v = sim.to_doubles();
    v[2 * 4 + 2] += 0.5;
    const double after =
        itc_loss(Tensor::from_values({4, 4}, v), Tensor::scalar(0.0)).scalar_value();
    CHECK(after < before);
}

TEST_CASE("itc: contracts") {
    CHECK_THROWS_AS(itc_loss(Tensor::full({1, 1}, 1.0), Tensor::scalar(0.0)), ContractError);
    CHECK_THROWS_AS(itc_loss(Tensor::zeros({3, 2}), Tensor::scalar(0.0)), ShapeError);
    CHECK_THROWS_AS(itc_loss(Tensor::zeros({3, 3}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("itc: gradients match finite differences") {
    Rng rng(13);
    Tensor sim = Tensor::uniform({3, 3}, -1, 1, rng);
    Tensor temp = Tensor::scalar(0.3);
    CHECK(finite_diff_check([&](const Tensor& x) { return itc_loss(x, temp); }, sim) < 1e-4);
    CHECK(finite_diff_check([&](const Tensor& t) { return itc_loss(sim, t); }, temp) < 1e-4);
}

// ---------------------------------------------------------------------------
// Token masking and the masked-prediction loss
// ---------------------------------------------------------------------------

TEST_CASE("mask_tokens: rate zero leaves everything alone") {
    Rng rng(21);
    std::vector<int64_t> ids{1, 7, 12, 33, 2};
    MlmBatch b = mask_tokens(ids, rng, 0.0);
    CHECK(b.input_ids == ids);
    CHECK(b.labels == ids);
    CHECK(std::count(b.masked.begin(), b.masked.end(), 1) == 0);
}

TEST_CASE("mask_tokens: rate one masks every regular token, specials survive") {
    Rng rng(22);
    std::vector<int64_t> ids{1, 7, 0, 12, 3, 33, 2};
    MlmBatch b = mask_tokens(ids, rng, 1.0);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 4) {
            CHECK(b.masked[i] == 0);
            CHECK(b.input_ids[i] == ids[i]);
        } else {
            CHECK(b.masked[i] == 1);
        }
        CHECK(b.labels[i] == ids[i]);
    }
}

TEST_CASE("mask_tokens: empirical rate and 80/10/10 split over a million tokens") {
    const size_t n = 1000000;
    std::vector<int64_t> ids(n, 7);
    Rng rng(23);
    MlmBatch b = mask_tokens(ids, rng, 0.15);

    size_t masked = 0, to_mask = 0, kept_same = 0, randomized = 0;
    for (size_t i = 0; i < n; ++i) {
        if (!b.masked[i]) {
            CHECK(b.input_ids[i] == 7);
            continue;
        }
        ++masked;
        if (b.input_ids[i] == 3)
            ++to_mask;
        else if (b.input_ids[i] == 7)
            ++kept_same;  // explicit keep, or the random draw hit the original
        else
            ++randomized;
        CHECK(b.input_ids[i] >= 3);
        CHECK(b.input_ids[i] < 40);
    }
    const double rate = static_cast<double>(masked) / n;
    CHECK(rate >= 0.149);
    CHECK(rate <= 0.151);

    const double f_mask = static_cast<double>(to_mask) / masked;
    const double f_keep = static_cast<double>(kept_same) / masked;
    const double f_rand = static_cast<double>(randomized) / masked;
    CHECK(f_mask == doctest::Approx(0.8).epsilon(0.02));
    // keep = the 10% keep branch plus the 1/36 of random draws that repeat
    // the original token
    CHECK(f_keep == doctest::Approx(0.1 + 0.1 / 36).epsilon(0.1));
    CHECK(f_rand == doctest::Approx(0.1 * 35.0 / 36).epsilon(0.1));
}

TEST_CASE("mask_tokens: deterministic under a fixed seed") {
    std::vector<int64_t> ids;
    Rng gen(24);
    for (int i = 0; i < 10000; ++i)
        ids.push_back(4 + static_cast<int64_t>(gen.uniform_int(36)));
    Rng a(77), b(77), c(78);
    MlmBatch ba = mask_tokens(ids, a);
    MlmBatch bb = mask_tokens(ids, b);
    MlmBatch bc = mask_tokens(ids, c);
    CHECK(ba.input_ids == bb.input_ids);
    CHECK(ba.masked == bb.masked);
    CHECK(ba.input_ids != bc.input_ids);
}

TEST_CASE("mask_tokens: contracts") {
    Rng rng(25);
    std::vector<int64_t> ids{1, 7, 2};
    CHECK_THROWS_AS(mask_tokens(ids, rng, -0.1), ContractError);
    CHECK_THROWS_AS(mask_tokens(ids, rng, 1.5), ContractError);
    CHECK_THROWS_AS(mask_tokens({1, 99, 2}, rng), DataError);
    CHECK_THROWS_AS(mask_tokens(ids, rng, 0.15, 4), ContractError);
}

TEST_CASE("mlm: uniform logits cost ln V") {
    MlmBatch b;
    b.input_ids = {1, 3, 7, 2};
    b.labels = {1, 12, 7, 2};
    b.masked = {0, 1, 0, 0};
    Tensor loss = mlm_loss(Tensor::zeros({4, 40}), b);
    CHECK(loss.scalar_value() == doctest::Approx(std::log(40.0)).epsilon(1e-12));
}

TEST_CASE("mlm: pinned two-way value") {
    // softmax([0, ln 3]) = [0.25, 0.75]; label 1 costs -ln 0.75
    MlmBatch b;
    b.input_ids = {3};
    b.labels = {1};
    b.masked = {1};
    Tensor logits = Tensor::from_values({1, 2}, std::vector<double>{0.0, std::log(3.0)});
    CHECK(mlm_loss(logits, b).scalar_value() ==
          doctest::Approx(-std::log(0.75)).epsilon(1e-9));
    CHECK(mlm_loss(logits, b).scalar_value() == doctest::Approx(0.2876820724517809).epsilon(1e-9));
}

TEST_CASE("mlm: confident correct logits vanish; only masked rows count") {
    MlmBatch b;
    b.input_ids = {1, 3, 3, 2};
    b.labels = {1, 9, 11, 2};
    b.masked = {0, 1, 1, 0};
    std::vector<double> v(4 * 20, 0.0);
    v[1 * 20 + 9] = 25.0;
    v[2 * 20 + 11] = 25.0;
    v[0 * 20 + 5] = 13.0;  // unmasked rows may hold anything
    v[3 * 20 + 2] = -9.0;
    Tensor loss = mlm_loss(Tensor::from_values({4, 20}, v), b);
    CHECK(loss.scalar_value() < 1e-8);
}

TEST_CASE("mlm: zero masked positions give exactly zero and raise the flag") {
    MlmBatch b;
    b.input_ids = {1, 7, 2};
    b.labels = {1, 7, 2};
    b.masked = {0, 0, 0};
    bool empty = false;
    Tensor loss = mlm_loss(Tensor::zeros({3, 10}), b, &empty);
    CHECK(empty);
    CHECK(loss.scalar_value() == 0.0);

    bool flag = true;
    b.masked = {0, 1, 0};
    mlm_loss(Tensor::zeros({3, 10}), b, &flag);
    CHECK(flag == false);
}

TEST_CASE("mlm: gradients and contracts") {
    Rng rng(26);
    MlmBatch b;
    b.input_ids = {1, 3, 7, 3, 2};
    b.labels = {1, 8, 7, 4, 2};
    b.masked = {0, 1, 0, 1, 0};
    Tensor logits = Tensor::uniform({5, 10}, -1, 1, rng);
    CHECK(finite_diff_check([&](const Tensor& x) { return mlm_loss(x, b); }, logits) < 1e-4);

    CHECK_THROWS_AS(mlm_loss(Tensor::zeros({4, 10}), b), ShapeError);
    MlmBatch bad = b;
    bad.labels[1] = 10;
    CHECK_THROWS_AS(mlm_loss(logits, bad), DataError);
}

// ---------------------------------------------------------------------------
// Hard negatives and the matching loss
// ---------------------------------------------------------------------------

TEST_CASE("hard negatives: two pairs always swap") {
    Rng rng(31);
    Tensor sim = Tensor::from_values({2, 2}, std::vector<double>{5, -3, 0.2, 9});
    for (int i = 0; i < 100; ++i) {
        auto picks = sample_hard_negatives(sim, rng);
        CHECK(picks == std::vector<int64_t>{1, 0});
    }
}

TEST_CASE("hard negatives: equal off-diagonals split evenly") {
    Rng rng(32);
    Tensor sim = Tensor::from_values({3, 3}, std::vector<double>{4.2, 0, 0, 0, 1, 0, 0, 0, 1});
    int64_t ones = 0;
    const int64_t trials = 10000;
    for (int64_t i = 0; i < trials; ++i) {
        auto picks = sample_hard_negatives(sim, rng);
        CHECK(picks[0] != 0);
        if (picks[0] == 1) ++ones;
    }
    const double frac = static_cast<double>(ones) / trials;
    CHECK(frac >= 0.48);
    CHECK(frac <= 0.52);
}

TEST_CASE("hard negatives: a +5 margin dominates the draw") {
    Rng rng(33);
    Tensor sim = Tensor::from_values({3, 3}, std::vector<double>{4.2, 0, 5, 0, 1, 0, 0, 0, 1});
    int64_t twos = 0;
    const int64_t trials = 10000;
    for (int64_t i = 0; i < trials; ++i)
        if (sample_hard_negatives(sim, rng)[0] == 2) ++twos;
    CHECK(static_cast<double>(twos) / trials > 0.98);
}

TEST_CASE("hard negatives: never the diagonal, any scale") {
    Rng rng(34);
    for (int trial = 0; trial < 20; ++trial) {
        const int64_t n = 2 + static_cast<int64_t>(rng.uniform_int(6));
        Tensor sim = Tensor::uniform({n, n}, -30, 30, rng);
        auto picks = sample_hard_negatives(sim, rng);
        REQUIRE(static_cast<int64_t>(picks.size()) == n);
        for (int64_t i = 0; i < n; ++i) {
            CHECK(picks[i] != i);
            CHECK(picks[i] >= 0);
            CHECK(picks[i] < n);
        }
    }
    CHECK_THROWS_AS(sample_hard_negatives(Tensor::zeros({1, 1}), rng), ContractError);
}

TEST_CASE("itm: zero logits cost ln 2, confident logits vanish") {
    Tensor zero = Tensor::zeros({2});
    CHECK(itm_loss(zero, true).scalar_value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(itm_loss(zero, false).scalar_value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor confident = Tensor::from_values({2}, std::vector<double>{-20.0, 20.0});
    CHECK(itm_loss(confident, true).scalar_value() < 1e-8);
    CHECK(itm_loss(confident, false).scalar_value() > 10.0);
    CHECK_THROWS_AS(itm_loss(Tensor::zeros({3}), true), ShapeError);
}

TEST_CASE("itm: head logits require a fused encoding") {
    Model m = build_model(tiny_config(), Rng(41));
    Rng rng(42);
    Tensor img = Tensor::uniform({8, 8, 3}, 0, 1, rng);
    const auto toks = some_tokens(rng, 12, 4);

    EncoderOutput dual = encode(m, img, toks, EncodeMode::Dual);
    CHECK_THROWS_AS(itm_logits(m, dual), ContractError);

    EncoderOutput fused = encode(m, img, toks, EncodeMode::Fused);
    Tensor logits = itm_logits(m, fused);
    CHECK(logits.shape() == Shape{2});
}

TEST_CASE("itm: gradient through the fused encoder matches finite differences") {
    Model m = build_model(tiny_config(), Rng(43));
    Rng rng(44);
    Tensor img = Tensor::uniform({8, 8, 3}, 0, 1, rng);
    const auto toks = some_tokens(rng, 12, 4);

    auto through_image = [&](const Tensor& v) {
        return itm_loss(itm_logits(m, encode(m, v, toks, EncodeMode::Fused)), true);
    };
    CHECK(finite_diff_check(through_image, img) < 1e-3);

    auto through_cross = [&](const Tensor& v) {
        Model mm = m;
        mm.fusion[0].txt.attn.k.weight = v;
        return itm_loss(itm_logits(mm, encode(mm, img, toks, EncodeMode::Fused)), false);
    };
    CHECK(finite_diff_check(through_cross, m.fusion[0].txt.attn.k.weight) < 1e-3);
}

// ---------------------------------------------------------------------------
// Grounding
// ---------------------------------------------------------------------------

TEST_CASE("grounding: one confident positive entry vanishes") {
    std::vector<GroundingTarget> targets{{Box{0, 0, 10, 10}, 0, 1}};
    Tensor S = Tensor::from_values({1, 1}, std::vector<double>{20.0});
    CHECK(grounding_loss(S, targets, {0}).scalar_value() < 1e-8);
}

TEST_CASE("grounding: matches a hand-rolled focal computation") {
    // region 0 -> target spanning token 0; region 1 -> background
    std::vector<GroundingTarget> targets{{Box{0, 0, 10, 10}, 0, 1}};
    const std::vector<double> s{2.0, -1.0, 0.5, -3.0};
    Tensor S = Tensor::from_values({2, 2}, s);
    const std::vector<int64_t> assignment{0, -1};

    double expect = 0.0;
    for (int r = 0; r < 2; ++r) {
        for (int l = 0; l < 2; ++l) {
            const double z = s[r * 2 + l];
            const double p = sigmoid_d(z);
            if (r == 0 && l == 0)
                expect += 0.25 * (1 - p) * (1 - p) * -std::log(p);
            else
                expect += 0.75 * p * p * -std::log(1 - p);
        }
    }
    expect /= 1.0;  // one positive entry
    CHECK(grounding_loss(S, targets, assignment).scalar_value() ==
          doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("grounding: no assigned regions still penalizes confident scores") {
    Rng rng(51);
    Tensor S = Tensor::uniform({3, 4}, -2, 2, rng);
    Tensor loss = grounding_loss(S, {}, {-1, -1, -1});
    CHECK(loss.scalar_value() > 0.0);

    // and a span covering several tokens marks each of them positive
    std::vector<GroundingTarget> targets{{Box{0, 0, 4, 4}, 1, 3}};
    std::vector<double> v(1 * 4, -20.0);
    v[1] = 20.0;
    v[2] = 20.0;
    Tensor confident = Tensor::from_values({1, 4}, v);
    CHECK(grounding_loss(confident, targets, {0}).scalar_value() < 1e-8);
}

TEST_CASE("grounding: gradients and contracts") {
    Rng rng(52);
    std::vector<GroundingTarget> targets{{Box{0, 0, 4, 4}, 0, 2}, {Box{4, 4, 8, 8}, 2, 3}};
    const std::vector<int64_t> assignment{0, -1, 1};
    Tensor S = Tensor::uniform({3, 3}, -2, 2, rng);
    auto f = [&](const Tensor& x) { return grounding_loss(x, targets, assignment); };
    CHECK(finite_diff_check(f, S) < 1e-4);

    CHECK_THROWS_AS(grounding_loss(S, targets, {0, -1}), ShapeError);
    CHECK_THROWS_AS(grounding_loss(S, targets, {0, -1, 5}), ContractError);
    std::vector<GroundingTarget> wide{{Box{0, 0, 4, 4}, 0, 9}};  // span exceeds the token axis
    CHECK_THROWS_AS(grounding_loss(S, wide, {0, -1, -1}), ContractError);
}

// ---------------------------------------------------------------------------
// Boxes: giou and centerness
// ---------------------------------------------------------------------------

TEST_CASE("giou: pinned values") {
    CHECK(giou(Box{3, 4, 9, 11}, Box{3, 4, 9, 11}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(giou(Box{0, 0, 1, 1}, Box{1, 1, 2, 2}) == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(giou(Box{0, 0, 2, 2}, Box{0, 0, 1, 1}) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK_THROWS_AS(giou(Box{0, 0, 0, 1}, Box{0, 0, 1, 1}), ContractError);
    CHECK_THROWS_AS(giou(Box{0, 0, 1, 1}, Box{2, 2, 2, 2}), ContractError);
}

TEST_CASE("giou: bounded by iou, symmetric, within [-1, 1]") {
    Rng rng(61);
    for (int trial = 0; trial < 200; ++trial) {
        auto draw = [&]() {
            const double x1 = rng.uniform(0, 8), y1 = rng.uniform(0, 8);
            return Box{x1, y1, x1 + rng.uniform(0.5, 6), y1 + rng.uniform(0.5, 6)};
        };
        const Box a = draw(), b = draw();
        const double g = giou(a, b);
        CHECK(g <= iou(a, b) + 1e-12);
        CHECK(g == doctest::Approx(giou(b, a)).epsilon(1e-12));
        CHECK(g >= -1.0);
        CHECK(g <= 1.0);
    }
}

TEST_CASE("giou loss: tensor form agrees with the scalar oracle") {
    Rng rng(62);
    const int64_t n = 6;
    std::vector<double> px1, py1, px2, py2, gx1, gy1, gx2, gy2;
    double expect = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const Box p{rng.uniform(0, 4), rng.uniform(0, 4), 4 + rng.uniform(0.5, 4),
                    4 + rng.uniform(0.5, 4)};
        const Box g{rng.uniform(0, 4), rng.uniform(0, 4), 4 + rng.uniform(0.5, 4),
                    4 + rng.uniform(0.5, 4)};
        px1.push_back(p.x1), py1.push_back(p.y1), px2.push_back(p.x2), py2.push_back(p.y2);
        gx1.push_back(g.x1), gy1.push_back(g.y1), gx2.push_back(g.x2), gy2.push_back(g.y2);
        expect += 1.0 - giou(p, g);
    }
    expect /= n;
    BoxesT pred{Tensor::from_values({n}, px1), Tensor::from_values({n}, py1),
                Tensor::from_values({n}, px2), Tensor::from_values({n}, py2)};
    BoxesT gold{Tensor::from_values({n}, gx1), Tensor::from_values({n}, gy1),
                Tensor::from_values({n}, gx2), Tensor::from_values({n}, gy2)};
    CHECK(giou_loss(pred, gold).scalar_value() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("giou loss: gradients for every coordinate") {
    // coordinates chosen away from min/max ties so central differences stay
    // on one branch
    BoxesT gold{Tensor::from_values({2}, std::vector<double>{2.0, 10.0}),
                Tensor::from_values({2}, std::vector<double>{2.0, 10.0}),
                Tensor::from_values({2}, std::vector<double>{6.0, 14.0}),
                Tensor::from_values({2}, std::vector<double>{7.0, 13.0})};
    BoxesT pred{Tensor::from_values({2}, std::vector<double>{1.0, 10.5}),
                Tensor::from_values({2}, std::vector<double>{1.0, 10.8}),
                Tensor::from_values({2}, std::vector<double>{4.0, 12.7}),
                Tensor::from_values({2}, std::vector<double>{5.0, 12.2})};

    auto probe = [&](Tensor BoxesT::* field) {
        auto f = [&](const Tensor& v) {
            BoxesT p = pred;
            p.*field = v;
            return giou_loss(p, gold);
        };
        return finite_diff_check(f, pred.*field);
    };
    CHECK(probe(&BoxesT::x1) < 1e-4);
    CHECK(probe(&BoxesT::y1) < 1e-4);
    CHECK(probe(&BoxesT::x2) < 1e-4);
    CHECK(probe(&BoxesT::y2) < 1e-4);

    BoxesT bad = pred;
    bad.x2 = Tensor::from_values({2}, std::vector<double>{0.5, 12.7});  // x2 < x1 in row 0
    CHECK_THROWS_AS(giou_loss(bad, gold), ContractError);
}

TEST_CASE("centerness: pinned values and contracts") {
    const Box box{0, 0, 4, 4};
    CHECK(centerness(2, 2, box) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(centerness(1, 1, box) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(centerness(0, 2, box) == 0.0);
    CHECK(centerness(2, 4, box) == 0.0);
    CHECK_THROWS_AS(centerness(5, 2, box), ContractError);
    CHECK_THROWS_AS(centerness(2, -0.5, box), ContractError);
    CHECK_THROWS_AS(centerness(0, 0, Box{1, 1, 1, 3}), ContractError);
}

TEST_CASE("centerness bce: closed-form checks and gradients") {
    Tensor zero_logits = Tensor::zeros({3});
    Tensor targets = Tensor::from_values({3}, std::vector<double>{0.1, 0.5, 1.0});
    CHECK(centerness_bce(zero_logits, targets).scalar_value() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor confident = Tensor::from_values({1}, std::vector<double>{20.0});
    Tensor one = Tensor::from_values({1}, std::vector<double>{1.0});
    CHECK(centerness_bce(confident, one).scalar_value() < 1e-8);

    // against the textbook form
    Rng rng(63);
    Tensor logits = Tensor::uniform({5}, -3, 3, rng);
    Tensor c = Tensor::uniform({5}, 0.05, 0.95, rng);
    double expect = 0.0;
    for (int64_t i = 0; i < 5; ++i) {
        const double p = sigmoid_d(logits.value_at(i));
        expect += -c.value_at(i) * std::log(p) - (1 - c.value_at(i)) * std::log(1 - p);
    }
    expect /= 5;
    CHECK(centerness_bce(logits, c).scalar_value() == doctest::Approx(expect).epsilon(1e-12));

    CHECK(finite_diff_check([&](const Tensor& z) { return centerness_bce(z, c); }, logits) < 1e-4);
    CHECK_THROWS_AS(centerness_bce(logits, Tensor::full({5}, 1.5)), ContractError);
    CHECK_THROWS_AS(centerness_bce(logits, Tensor::zeros({4})), ShapeError);
}

// ---------------------------------------------------------------------------
// Location grids and target assignment
// ---------------------------------------------------------------------------

TEST_CASE("fpn locations: strides and centers") {
    const auto locs = fpn_locations(64, {16, 8, 4});
    REQUIRE(locs.size() == 256 + 64 + 16);
    CHECK(locs[0].level == 0);
    CHECK(locs[0].x == 2.0);
    CHECK(locs[0].y == 2.0);
    CHECK(locs[0].stride == 4.0);
    CHECK(locs[255].x == 62.0);
    CHECK(locs[255].y == 62.0);
    CHECK(locs[256].level == 1);
    CHECK(locs[256].x == 4.0);
    CHECK(locs[256].stride == 8.0);
    CHECK(locs.back().level == 2);
    CHECK(locs.back().x == 56.0);
    CHECK(locs.back().stride == 16.0);
    CHECK_THROWS_AS(fpn_locations(64, {7}), ShapeError);
}

TEST_CASE("scale ranges: doubling octaves") {
    const auto r = default_scale_ranges(3);
    REQUIRE(r.size() == 3);
    CHECK(r[0].first == 0.0);
    CHECK(r[0].second == 16.0);
    CHECK(r[1].first == 16.0);
    CHECK(r[1].second == 32.0);
    CHECK(r[2].first == 32.0);
    CHECK(std::isinf(r[2].second));
}

TEST_CASE("assignment: a centered cell is positive on its own level only") {
    const auto locs = fpn_locations(64, {16, 8, 4});
    const std::vector<Box> targets{Box{26, 26, 38, 38}};  // longer side 12 -> finest band
    const auto a = assign_targets(locs, targets);

    auto at = [&](int64_t level, double x, double y) {
        for (size_t i = 0; i < locs.size(); ++i)
            if (locs[i].level == level && locs[i].x == x && locs[i].y == y) return a[i];
        FAIL("no such location");
        return int64_t{-2};
    };
    CHECK(at(0, 30, 30) == 0);
    CHECK(at(0, 34, 34) == 0);
    CHECK(at(0, 2, 2) == -1);      // far away
    CHECK(at(1, 28, 28) == -1);    // inside and central, but the wrong band
    CHECK(at(2, 40, 40) == -1);
}

TEST_CASE("assignment: the radius knob excludes off-center cells") {
    const auto locs = fpn_locations(64, {16});
    const std::vector<Box> targets{Box{20, 20, 36, 36}};  // center (28, 28), longer 16
    const std::vector<std::pair<double, double>> band{{0.0, 16.0}};

    const auto wide = assign_targets(locs, targets, 1.5, &band);
    const auto tight = assign_targets(locs, targets, 1.0, &band);
    auto at = [&](const std::vector<int64_t>& a, double x, double y) {
        for (size_t i = 0; i < locs.size(); ++i)
            if (locs[i].x == x && locs[i].y == y) return a[i];
        return int64_t{-2};
    };
    // (34, 34) sits inside the box, 6 px off center: within 1.5 strides,
    // beyond 1.0
    CHECK(at(wide, 34, 34) == 0);
    CHECK(at(tight, 34, 34) == -1);
    CHECK(at(tight, 30, 30) == 0);
}

TEST_CASE("assignment: overlapping targets tie-break to the smaller box") {
    const auto locs = fpn_locations(64, {16, 8, 4});
    const std::vector<Box> targets{Box{10, 10, 38, 38}, Box{16, 16, 36, 36}};  // 28 and 20 px
    const auto a = assign_targets(locs, targets);
    auto at = [&](int64_t level, double x, double y) {
        for (size_t i = 0; i < locs.size(); ++i)
            if (locs[i].level == level && locs[i].x == x && locs[i].y == y) return a[i];
        return int64_t{-2};
    };
    // (28, 28) on the middle level is inside and near the center of both;
    // the smaller box wins
    CHECK(at(1, 28, 28) == 1);
    // finest level: both boxes are out of band
    CHECK(at(0, 30, 30) == -1);
}

TEST_CASE("assignment: contracts and empty targets") {
    const auto locs = fpn_locations(64, {8});
    const auto a = assign_targets(locs, {});
    CHECK(std::count(a.begin(), a.end(), -1) == static_cast<int64_t>(a.size()));
    CHECK_THROWS_AS(assign_targets(locs, {Box{4, 4, 4, 9}}), ContractError);
    const std::vector<std::pair<double, double>> short_bands{};
    const std::vector<Box> one{Box{0, 0, 8, 8}};
    CHECK_THROWS_AS(assign_targets(locs, one, 1.5, &short_bands), ContractError);
}
