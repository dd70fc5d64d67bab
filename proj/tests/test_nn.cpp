#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "fiber/nn.hpp"
#include "fiber/tensor.hpp"

using namespace fiber;

namespace {

Tensor rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(std::move(s), lo, hi, rng);
}

Tensor weighted_sum(const Tensor& y, uint64_t tag) {
    Rng wrng(0xBEEF0000 + tag);
    Tensor w = Tensor::uniform(y.shape(), 0.5, 1.5, wrng);
    return reduce_sum_all(mul(y, w));
}

bool all_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (int64_t i = 0; i < a.numel(); ++i) {
        if (a.value_at(i) != b.value_at(i)) return false;
    }
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a.value_at(i) - b.value_at(i)));
    }
    return m;
}

// Plain-double y = x·Wᵀ + b over row-major buffers.
std::vector<double> ref_linear(const std::vector<double>& w, const std::vector<double>& b,
                               const std::vector<double>& x, int64_t rows, int64_t d_in,
                               int64_t d_out) {
    std::vector<double> out(static_cast<size_t>(rows * d_out), 0.0);
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t o = 0; o < d_out; ++o) {
            double acc = b[static_cast<size_t>(o)];
            for (int64_t i = 0; i < d_in; ++i) {
                acc += w[static_cast<size_t>(o * d_in + i)] * x[static_cast<size_t>(r * d_in + i)];
            }
            out[static_cast<size_t>(r * d_out + o)] = acc;
        }
    }
    return out;
}

// Independent single-head attention written with raw loops; no tensor ops.
std::vector<double> ref_single_head(const AttentionParams& p, const Tensor& x) {
    const int64_t L = x.dim(0), d = x.dim(1);
    const auto xin = x.to_doubles();
    const auto q = ref_linear(p.q.weight.to_doubles(), p.q.bias.to_doubles(), xin, L, d, d);
    const auto k = ref_linear(p.k.weight.to_doubles(), p.k.bias.to_doubles(), xin, L, d, d);
    const auto v = ref_linear(p.v.weight.to_doubles(), p.v.bias.to_doubles(), xin, L, d, d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> ctx(static_cast<size_t>(L * d), 0.0);
    for (int64_t a = 0; a < L; ++a) {
        std::vector<double> row(static_cast<size_t>(L));
        double mx = -1e300;
        for (int64_t b = 0; b < L; ++b) {
            double s = 0;
            for (int64_t c = 0; c < d; ++c) {
                s += q[static_cast<size_t>(a * d + c)] * k[static_cast<size_t>(b * d + c)];
            }
            row[static_cast<size_t>(b)] = s * scale;
            mx = std::max(mx, row[static_cast<size_t>(b)]);
        }
        double denom = 0;
        for (int64_t b = 0; b < L; ++b) {
            row[static_cast<size_t>(b)] = std::exp(row[static_cast<size_t>(b)] - mx);
            denom += row[static_cast<size_t>(b)];
        }
        for (int64_t b = 0; b < L; ++b) {
            const double attn = row[static_cast<size_t>(b)] / denom;
            for (int64_t c = 0; c < d; ++c) {
                ctx[static_cast<size_t>(a * d + c)] += attn * v[static_cast<size_t>(b * d + c)];
            }
        }
    }
    return ref_linear(p.o.weight.to_doubles(), p.o.bias.to_doubles(), ctx, L, d, d);
}

}  // namespace

TEST_CASE("linear_forward computes x·Wᵀ + b") {
    Linear id;
    id.weight = Tensor::from_values({2, 2}, std::vector<double>{1, 0, 0, 1});
    id.bias = Tensor::zeros({2});
    Tensor x = Tensor::from_values({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
    CHECK(all_equal(linear_forward(id, x), x));

    Linear dot;
    dot.weight = Tensor::from_values({1, 2}, std::vector<double>{1, 1});
    dot.bias = Tensor::from_values({1}, std::vector<double>{1});
    Tensor y = linear_forward(dot, Tensor::from_values({2}, std::vector<double>{2, 3}));
    REQUIRE(y.shape() == Shape{1});
    CHECK(y.scalar_value() == 6.0);

    CHECK_THROWS_AS(linear_forward(dot, Tensor::zeros({3})), ShapeError);
}

TEST_CASE("linear_forward gradients match finite differences on random shapes") {
    Rng rng(301);
    for (uint64_t trial = 0; trial < 5; ++trial) {
        const int64_t d_in = 2 + static_cast<int64_t>(rng.uniform_int(4));
        const int64_t d_out = 2 + static_cast<int64_t>(rng.uniform_int(4));
        const int64_t rows = 1 + static_cast<int64_t>(rng.uniform_int(3));
        Linear p = linear_init(d_out, d_in, rng);
        Tensor x = rand_t({rows, d_in}, rng);
        CHECK(finite_diff_check(
                  [&](const Tensor& v) { return weighted_sum(linear_forward(p, v), trial); }, x) <
              1e-4);
        CHECK(finite_diff_check(
                  [&](const Tensor& v) {
                      Linear q{v, p.bias};
                      return weighted_sum(linear_forward(q, x), trial);
                  },
                  p.weight) < 1e-4);
        CHECK(finite_diff_check(
                  [&](const Tensor& v) {
                      Linear q{p.weight, v};
                      return weighted_sum(linear_forward(q, x), trial);
                  },
                  p.bias) < 1e-4);
    }
}

TEST_CASE("attention over a single key reduces to out_proj(v_proj(x))") {
    Rng rng(311);
    AttentionParams p = attention_init(6, 6, 2, rng);
    Tensor x = rand_t({1, 6}, rng);
    Tensor got = multi_head_attention(p, x, x);
    Tensor want = linear_forward(p.o, linear_forward(p.v, x));
    CHECK(all_equal(got, want));
}

TEST_CASE("causal mask makes outputs independent of future tokens") {
    Rng rng(312);
    const int64_t L = 5, d = 8;
    AttentionParams p = attention_init(d, d, 2, rng);
    Tensor x = rand_t({L, d}, rng);
    std::vector<uint8_t> causal(static_cast<size_t>(L * L), 0);
    for (int64_t i = 0; i < L; ++i) {
        for (int64_t j = 0; j <= i; ++j) causal[static_cast<size_t>(i * L + j)] = 1;
    }
    Tensor base = multi_head_attention(p, x, x, &causal);
    for (int64_t t = 0; t + 1 < L; ++t) {
        Tensor poked = x.detached_clone();
        auto data = poked.mutable_data<double>();
        for (int64_t j = (t + 1) * d; j < L * d; ++j) data[j] = 1e6 + static_cast<double>(j);
        Tensor out = multi_head_attention(p, poked, poked, &causal);
        for (int64_t pos = 0; pos <= t; ++pos) {
            for (int64_t c = 0; c < d; ++c) {
                CHECK(out.value_at(pos * d + c) == base.value_at(pos * d + c));
            }
        }
    }
    // A fully-masked query row is undefined.
    std::vector<uint8_t> dead(static_cast<size_t>(L * L), 1);
    for (int64_t j = 0; j < L; ++j) dead[static_cast<size_t>(2 * L + j)] = 0;
    CHECK_THROWS_AS(multi_head_attention(p, x, x, &dead), ContractError);
}

TEST_CASE("single-head attention matches an independent reference") {
    Rng rng(313);
    AttentionParams p = attention_init(4, 4, 1, rng);
    Tensor x = rand_t({3, 4}, rng);
    Tensor got = multi_head_attention(p, x, x);
    const auto want = ref_single_head(p, x);
    for (int64_t i = 0; i < got.numel(); ++i) {
        CHECK(got.value_at(i) == doctest::Approx(want[static_cast<size_t>(i)]).epsilon(1e-12));
    }
}

TEST_CASE("attention gradients pass finite differences") {
    Rng rng(314);
    AttentionParams p = attention_init(4, 4, 2, rng);
    Tensor x = rand_t({3, 4}, rng);
    CHECK(finite_diff_check(
              [&](const Tensor& v) { return weighted_sum(multi_head_attention(p, v, v), 1); }, x) <
          1e-4);
    CHECK(finite_diff_check(
              [&](const Tensor& v) {
                  AttentionParams q = p;
                  q.q.weight = v;
                  return weighted_sum(multi_head_attention(q, x, x), 2);
              },
              p.q.weight) < 1e-4);
    // Cross-attention with a different source width.
    AttentionParams pc = attention_init(4, 6, 2, rng);
    Tensor y = rand_t({5, 6}, rng);
    CHECK(finite_diff_check(
              [&](const Tensor& v) { return weighted_sum(multi_head_attention(pc, x, v), 3); },
              y) < 1e-4);
}

TEST_CASE("ffn_forward is linear-gelu-linear with shape preserved") {
    Rng rng(321);
    Ffn zero;
    zero.in = Linear{Tensor::zeros({8, 2}, Dtype::F64, true), Tensor::zeros({8}, Dtype::F64, true)};
    zero.out = Linear{Tensor::zeros({2, 8}, Dtype::F64, true), Tensor::zeros({2}, Dtype::F64, true)};
    Tensor x = rand_t({3, 2}, rng);
    Tensor y = ffn_forward(zero, x);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.value_at(i) == 0.0);

    Ffn p = ffn_init(4, rng);
    CHECK(p.in.weight.dim(0) == 16);
    Tensor x2 = rand_t({5, 4}, rng);
    Tensor y2 = ffn_forward(p, x2);
    CHECK(y2.shape() == x2.shape());
    CHECK(finite_diff_check(
              [&](const Tensor& v) { return weighted_sum(ffn_forward(p, v), 4); }, x2) < 1e-4);
}

TEST_CASE("window attention with one window equals full attention exactly") {
    Rng rng(331);
    const int64_t side = 4, d = 8;
    AttentionParams p = attention_init(d, d, 2, rng);
    Tensor grid = rand_t({side, side, d}, rng);
    Tensor windowed = window_attention({side, 0}, p, grid);
    Tensor full = multi_head_attention(p, reshape(grid, {side * side, d}),
                                       reshape(grid, {side * side, d}));
    CHECK(all_equal(reshape(windowed, {side * side, d}), full));
}

TEST_CASE("unshifted windows are local: other windows never leak in") {
    Rng rng(332);
    const int64_t side = 8, w = 4, d = 4;
    AttentionParams p = attention_init(d, d, 2, rng);
    Tensor grid = rand_t({side, side, d}, rng);
    Tensor base = window_attention({w, 0}, p, grid);
    // Scramble the top-right window; the top-left window's outputs must not move.
    Tensor poked = grid.detached_clone();
    {
        auto data = poked.mutable_data<double>();
        for (int64_t r = 0; r < 4; ++r) {
            for (int64_t c = 4; c < 8; ++c) {
                for (int64_t ch = 0; ch < d; ++ch) data[(r * side + c) * d + ch] += 37.5;
            }
        }
    }
    Tensor out = window_attention({w, 0}, p, poked);
    for (int64_t r = 0; r < 4; ++r) {
        for (int64_t c = 0; c < 4; ++c) {
            for (int64_t ch = 0; ch < d; ++ch) {
                CHECK(out.value_at((r * side + c) * d + ch) ==
                      base.value_at((r * side + c) * d + ch));
            }
        }
    }
    CHECK_THROWS_AS(window_attention({3, 0}, p, grid), ShapeError);
}

TEST_CASE("shifted window attention matches a brute-force full-mask oracle") {
    Rng rng(333);
    const int64_t side = 8, w = 4, s = 2, d = 4;
    AttentionParams p = attention_init(d, d, 2, rng);
    Tensor grid = rand_t({side, side, d}, rng);
    Tensor got = window_attention({w, s}, p, grid);

    // Brute force: one attention call over all H·W tokens with the full
    // H·W × H·W mask materialized. Cell (r,c) may attend (r2,c2) iff both
    // share a post-roll window AND a pre-roll window.
    const int64_t n = side * side;
    auto rolled_window = [&](int64_t r, int64_t c) {
        const int64_t rr = ((r - s) % side + side) % side;
        const int64_t cc = ((c - s) % side + side) % side;
        return (rr / w) * (side / w) + (cc / w);
    };
    auto orig_window = [&](int64_t r, int64_t c) { return (r / w) * (side / w) + c / w; };
    std::vector<uint8_t> keep(static_cast<size_t>(n * n), 0);
    for (int64_t a = 0; a < n; ++a) {
        for (int64_t b = 0; b < n; ++b) {
            const int64_t ra = a / side, ca = a % side, rb = b / side, cb = b % side;
            keep[static_cast<size_t>(a * n + b)] =
                (rolled_window(ra, ca) == rolled_window(rb, cb) &&
                 orig_window(ra, ca) == orig_window(rb, cb))
                    ? 1
                    : 0;
        }
    }
    Tensor flat = reshape(grid, {n, d});
    Tensor want = multi_head_attention(p, flat, flat, &keep);
    CHECK(max_abs_diff(reshape(got, {n, d}), want) < 1e-12);
}

TEST_CASE("shifted windows never attend across the pre-roll boundary") {
    Rng rng(334);
    const int64_t side = 8, w = 4, s = 2, d = 4;
    AttentionParams p = attention_init(d, d, 1, rng);
    Tensor grid = rand_t({side, side, d}, rng);
    Tensor base = window_attention({w, s}, p, grid);
    // One-hot probe: bump a single cell, outputs in other pre-roll windows
    // must be bit-identical.
    const int64_t pr = 1, pc = 1;  // probe cell, pre-roll window 0
    Tensor poked = grid.detached_clone();
    poked.mutable_data<double>()[(pr * side + pc) * d] += 3.0;
    Tensor out = window_attention({w, s}, p, poked);
    auto orig_window = [&](int64_t r, int64_t c) { return (r / w) * (side / w) + c / w; };
    int checked = 0;
    for (int64_t r = 0; r < side; ++r) {
        for (int64_t c = 0; c < side; ++c) {
            if (orig_window(r, c) == orig_window(pr, pc)) continue;
            for (int64_t ch = 0; ch < d; ++ch) {
                CHECK(out.value_at((r * side + c) * d + ch) ==
                      base.value_at((r * side + c) * d + ch));
            }
            ++checked;
        }
    }
    CHECK(checked == 48);  // 3 of 4 pre-roll windows
}

TEST_CASE("window attention gradients pass finite differences") {
    Rng rng(335);
    const int64_t side = 4, w = 2, d = 4;
    AttentionParams p = attention_init(d, d, 2, rng);
    Tensor grid = rand_t({side, side, d}, rng);
    for (int64_t s : {int64_t{0}, int64_t{1}}) {
        CHECK(finite_diff_check(
                  [&](const Tensor& v) {
                      return weighted_sum(window_attention({w, s}, p, v), 5);
                  },
                  grid) < 1e-4);
    }
}

TEST_CASE("patch merging halves the grid and doubles the width") {
    Rng rng(341);
    Tensor grid = rand_t({4, 4, 8}, rng);
    Linear p = linear_init(16, 32, rng);
    Tensor out = patch_merging(grid, p);
    CHECK(out.shape() == Shape{2, 2, 16});
    CHECK_THROWS_AS(patch_merging(rand_t({3, 4, 8}, rng), p), ShapeError);
}

TEST_CASE("a selector projection recovers the top-left sub-pixel channels") {
    Rng rng(342);
    const int64_t d = 3;
    Tensor grid = rand_t({4, 6, d}, rng);
    // [2d, 4d] projection whose first d rows pick out the first d inputs,
    // i.e. the top-left cell of each 2×2 neighborhood.
    Tensor w = Tensor::zeros({2 * d, 4 * d});
    {
        auto data = w.mutable_data<double>();
        for (int64_t i = 0; i < d; ++i) data[i * 4 * d + i] = 1.0;
    }
    Linear p{w, Tensor::zeros({2 * d})};
    Tensor out = patch_merging(grid, p);
    for (int64_t r = 0; r < 2; ++r) {
        for (int64_t c = 0; c < 3; ++c) {
            for (int64_t ch = 0; ch < d; ++ch) {
                CHECK(out.value_at((r * 3 + c) * 2 * d + ch) ==
                      grid.value_at(((2 * r) * 6 + 2 * c) * d + ch));
            }
        }
    }
}

TEST_CASE("patch merging gradients pass finite differences") {
    Rng rng(343);
    Tensor grid = rand_t({4, 4, 2}, rng);
    Linear p = linear_init(4, 8, rng);
    CHECK(finite_diff_check(
              [&](const Tensor& v) { return weighted_sum(patch_merging(v, p), 6); }, grid) < 1e-4);
    CHECK(finite_diff_check(
              [&](const Tensor& v) {
                  Linear q{v, p.bias};
                  return weighted_sum(patch_merging(grid, q), 7);
              },
              p.weight) < 1e-4);
}

TEST_CASE("conv3x3 as gather+matmul matches a direct zero-padded loop") {
    Rng rng(351);
    const int64_t H = 3, W = 4, din = 2, dout = 3;
    Conv3x3 p = conv3x3_init(dout, din, rng);
    Tensor grid = rand_t({H, W, din}, rng);
    Tensor out = conv3x3_forward(p, grid);
    REQUIRE(out.shape() == Shape{H, W, dout});
    const auto wv = p.proj.weight.to_doubles();
    const auto bv = p.proj.bias.to_doubles();
    const auto gv = grid.to_doubles();
    for (int64_t r = 0; r < H; ++r) {
        for (int64_t c = 0; c < W; ++c) {
            for (int64_t o = 0; o < dout; ++o) {
                double acc = bv[static_cast<size_t>(o)];
                for (int64_t dy = -1; dy <= 1; ++dy) {
                    for (int64_t dx = -1; dx <= 1; ++dx) {
                        const int64_t rr = r + dy, cc = c + dx;
                        if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
                        const int64_t block = (dy + 1) * 3 + (dx + 1);
                        for (int64_t ch = 0; ch < din; ++ch) {
                            acc += wv[static_cast<size_t>(o * 9 * din + block * din + ch)] *
                                   gv[static_cast<size_t>((rr * W + cc) * din + ch)];
                        }
                    }
                }
                CHECK(out.value_at((r * W + c) * dout + o) ==
                      doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
    CHECK(finite_diff_check(
              [&](const Tensor& v) { return weighted_sum(conv3x3_forward(p, v), 8); }, grid) <
          1e-4);
}

TEST_CASE("fpn: single level is lateral projection plus smoothing only") {
    Rng rng(361);
    FpnParams p = fpn_init({5}, 3, rng);
    Tensor f = rand_t({4, 4, 5}, rng);
    std::vector<Tensor> out = fpn_combine(p, {f});
    REQUIRE(out.size() == 1);
    Tensor lat = reshape(linear_forward(p.lateral[0], reshape(f, {16, 5})), {4, 4, 3});
    CHECK(all_equal(out[0], conv3x3_forward(p.smooth[0], lat)));
}

TEST_CASE("fpn: an all-zero coarse level leaves the fine path untouched") {
    Rng rng(362);
    FpnParams p = fpn_init({5, 6}, 3, rng);
    Tensor fine = rand_t({4, 4, 5}, rng);
    Tensor coarse = Tensor::zeros({2, 2, 6});
    std::vector<Tensor> out = fpn_combine(p, {fine, coarse});
    Tensor lat = reshape(linear_forward(p.lateral[0], reshape(fine, {16, 5})), {4, 4, 3});
    CHECK(all_equal(out[0], conv3x3_forward(p.smooth[0], lat)));
    CHECK_THROWS_AS(fpn_combine(p, {fine, rand_t({3, 3, 6}, rng)}), ShapeError);
}

TEST_CASE("fpn: three-level pyramid matches a hand-unrolled reference") {
    Rng rng(363);
    const int64_t d_fpn = 2;
    const std::vector<int64_t> widths{2, 3, 4};
    FpnParams p = fpn_init(widths, d_fpn, rng);
    std::vector<Tensor> feats{rand_t({4, 4, 2}, rng), rand_t({2, 2, 3}, rng),
                              rand_t({1, 1, 4}, rng)};
    std::vector<Tensor> got = fpn_combine(p, feats);

    // Reference: raw double loops for laterals, nearest upsample, 3×3 conv.
    const std::vector<int64_t> hs{4, 2, 1};
    std::vector<std::vector<double>> merged(3);
    for (size_t lvl = 0; lvl < 3; ++lvl) {
        merged[lvl] = ref_linear(p.lateral[lvl].weight.to_doubles(),
                                 p.lateral[lvl].bias.to_doubles(), feats[lvl].to_doubles(),
                                 hs[lvl] * hs[lvl], widths[lvl], d_fpn);
    }
    for (size_t lvl = 3; lvl-- > 1;) {
        const int64_t hc = hs[lvl], hf = hs[lvl - 1];
        for (int64_t r = 0; r < hf; ++r) {
            for (int64_t c = 0; c < hf; ++c) {
                for (int64_t ch = 0; ch < d_fpn; ++ch) {
                    merged[lvl - 1][static_cast<size_t>((r * hf + c) * d_fpn + ch)] +=
                        merged[lvl][static_cast<size_t>(((r / 2) * hc + c / 2) * d_fpn + ch)];
                }
            }
        }
    }
    for (size_t lvl = 0; lvl < 3; ++lvl) {
        const int64_t h = hs[lvl];
        const auto wv = p.smooth[lvl].proj.weight.to_doubles();
        const auto bv = p.smooth[lvl].proj.bias.to_doubles();
        for (int64_t r = 0; r < h; ++r) {
            for (int64_t c = 0; c < h; ++c) {
                for (int64_t o = 0; o < d_fpn; ++o) {
                    double acc = bv[static_cast<size_t>(o)];
                    for (int64_t dy = -1; dy <= 1; ++dy) {
                        for (int64_t dx = -1; dx <= 1; ++dx) {
                            const int64_t rr = r + dy, cc = c + dx;
                            if (rr < 0 || rr >= h || cc < 0 || cc >= h) continue;
                            const int64_t block = (dy + 1) * 3 + (dx + 1);
                            for (int64_t ch = 0; ch < d_fpn; ++ch) {
                                acc += wv[static_cast<size_t>(o * 9 * d_fpn + block * d_fpn + ch)] *
                                       merged[lvl][static_cast<size_t>((rr * h + cc) * d_fpn + ch)];
                            }
                        }
                    }
                    CHECK(got[lvl].value_at((r * h + c) * d_fpn + o) ==
                          doctest::Approx(acc).epsilon(1e-10));
                }
            }
        }
    }
}

TEST_CASE("fpn gradients pass finite differences") {
    Rng rng(364);
    FpnParams p = fpn_init({2, 3}, 2, rng);
    Tensor fine = rand_t({4, 4, 2}, rng);
    Tensor coarse = rand_t({2, 2, 3}, rng);
    auto loss = [&](const std::vector<Tensor>& feats, uint64_t tag) {
        std::vector<Tensor> out = fpn_combine(p, feats);
        Tensor total = weighted_sum(out[0], tag);
        return add(total, weighted_sum(out[1], tag + 100));
    };
    CHECK(finite_diff_check(
              [&](const Tensor& v) { return loss({v, coarse}, 9); }, fine) < 1e-4);
    CHECK(finite_diff_check(
              [&](const Tensor& v) { return loss({fine, v}, 10); }, coarse) < 1e-4);
}

TEST_CASE("upsample2x repeats each cell into a 2x2 block") {
    Rng rng(371);
    Tensor g = rand_t({2, 3, 2}, rng);
    Tensor u = upsample2x(g);
    REQUIRE(u.shape() == Shape{4, 6, 2});
    for (int64_t r = 0; r < 4; ++r) {
        for (int64_t c = 0; c < 6; ++c) {
            for (int64_t ch = 0; ch < 2; ++ch) {
                CHECK(u.value_at((r * 6 + c) * 2 + ch) ==
                      g.value_at(((r / 2) * 3 + c / 2) * 2 + ch));
            }
        }
    }
}
