#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace saat;
using namespace saat::test;

namespace {

void set_identity(V& w) {
    auto& t = w.mutable_value();
    t.fill(0.0);
    const std::size_t r = t.dim(0), c = t.dim(1);
    for (std::size_t i = 0; i < std::min(r, c); ++i) t[i * c + i] = 1.0;
}

}  // namespace

TEST(Attend, EqualLogitsAverageValues) {
    // One 2x2 window, q = k = 0: every query sees the mean of the values.
    TD v(Shape{1, 4, 2}, std::vector<double>{1, 10, 2, 20, 3, 30, 6, 60});
    auto res = attend(cst(TD(Shape{1, 4, 2})), cst(TD(Shape{1, 4, 2})), cst(v), 1, V(), TD());
    const auto& o = res.out.value();
    for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_DOUBLE_EQ(o[t * 2], 3.0);
        EXPECT_DOUBLE_EQ(o[t * 2 + 1], 30.0);
    }
    for (auto w : res.weights.value().data()) EXPECT_DOUBLE_EQ(w, 0.25);
}

TEST(Attend, MaskedPairsGetNegligibleWeight) {
    auto mask = build_attn_mask<double>(8, 8, 4, 2);
    auto q = randn({4, 16, 4}, 1), k = randn({4, 16, 4}, 2), v = randn({4, 16, 4}, 3);
    auto res = attend(cst(q), cst(k), cst(v), 2, V(), mask);
    const auto& w = res.weights.value();
    const std::size_t N = 16;
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t i = 0; i < N; ++i) {
                double row = 0;
                for (std::size_t j = 0; j < N; ++j) {
                    const double wij = w[((b * 2 + h) * N + i) * N + j];
                    row += wij;
                    if (mask[(b * N + i) * N + j] != 0.0) {
                        EXPECT_LE(wij, 1e-30);
                    }
                }
                EXPECT_NEAR(row, 1.0, 1e-12);
            }
}

TEST(Attend, TokenPermutationEquivariance) {
    auto q = randn({1, 6, 4}, 4), k = randn({1, 6, 4}, 5), v = randn({1, 6, 4}, 6);
    const std::size_t perm[6] = {3, 0, 5, 1, 4, 2};
    auto permute_tokens = [&](const TD& t) {
        TD p(t.shape());
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t c = 0; c < 4; ++c) p[i * 4 + c] = t[perm[i] * 4 + c];
        return p;
    };
    auto base = attend(cst(q), cst(k), cst(v), 2, V(), TD()).out.value();
    auto moved = attend(cst(permute_tokens(q)), cst(permute_tokens(k)), cst(permute_tokens(v)), 2, V(), TD()).out.value();
    EXPECT_LT(max_abs(moved, permute_tokens(base)), 1e-12);
}

TEST(Attend, RejectsIndivisibleHeads) {
    auto t = randn({1, 4, 6}, 7);
    EXPECT_THROW(attend(cst(t), cst(t), cst(t), 4, V(), TD()), InvalidConfig);
}

TEST(Oca, OverlapWindowSizes) {
    EXPECT_EQ(OcaParams<double>::overlap_window_size(16, 0.5), 24u);
    EXPECT_EQ(OcaParams<double>::overlap_window_size(8, 0.25), 10u);
    EXPECT_EQ(OcaParams<double>::overlap_window_size(2, 0.5), 3u);
    EXPECT_EQ(OcaParams<double>::overlap_window_size(4, 0.0), 4u);
    EXPECT_THROW(OcaParams<double>::overlap_window_size(2, 0.25), InvalidConfig);
    EXPECT_THROW(OcaParams<double>::overlap_window_size(4, -0.5), InvalidConfig);
}

// 4x4 map, G=2, mu=0.5 -> G0=3. With zero queries and keys every query
// weights its 3x3 key window uniformly; padded keys carry zero values.
TEST(Oca, ZeroQueryHandComputation) {
    ad::ParamStore<double> store;
    Rng rng(1);
    auto p = OcaParams<double>::create(store, "oca", 1, 1, 2, 0.5, rng);
    ASSERT_EQ(p.overlap_window, 3u);
    p.q_w.mutable_value().fill(0.0);
    auto& kv = p.kv_w.mutable_value();  // 2 x 1: row 0 keys, row 1 values
    kv[0] = 0.0;
    kv[1] = 1.0;
    set_identity(p.proj_w);
    TD x(Shape{1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i + 1);
    auto y = oca_forward(cst(x), p).value();
    ASSERT_EQ(y.shape(), x.shape());
    auto window_mean = [&](std::size_t r0, std::size_t c0) {
        double s = 0;
        for (std::size_t r = r0; r < r0 + 3; ++r)
            for (std::size_t c = c0; c < c0 + 3; ++c)
                if (r < 4 && c < 4) s += x[r * 4 + c];
        return s / 9.0;
    };
    for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 4; ++w)
            EXPECT_NEAR(y[h * 4 + w], window_mean(h / 2 * 2, w / 2 * 2), 1e-12) << h << "," << w;
    EXPECT_NEAR(y[0], (1 + 2 + 3 + 5 + 6 + 7 + 9 + 10 + 11) / 9.0, 1e-12);
    EXPECT_NEAR(y[15], (11 + 12 + 15 + 16) / 9.0, 1e-12);
}

TEST(Oca, SymmetricOverlapCentersKeyWindow) {
    ad::ParamStore<double> store;
    Rng rng(2);
    auto p = OcaParams<double>::create(store, "oca", 1, 1, 2, 1.0, rng);
    ASSERT_EQ(p.overlap_window, 4u);
    p.q_w.mutable_value().fill(0.0);
    auto& kv = p.kv_w.mutable_value();
    kv[0] = 0.0;
    kv[1] = 1.0;
    set_identity(p.proj_w);
    auto x = randn({1, 1, 4, 4}, 3);
    auto y = oca_forward(cst(x), p).value();
    double s = 0;
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) s += x[r * 4 + c];
    EXPECT_NEAR(y[0], s / 16.0, 1e-12);
}

TEST(Oca, WeightsRowsSumToOne) {
    ad::ParamStore<double> store;
    Rng rng(3);
    auto p = OcaParams<double>::create(store, "oca", 4, 2, 4, 0.5, rng);
    auto res = oca_attention(cst(randn({1, 4, 8, 8}, 4)), p);
    const auto& w = res.weights.value();
    const std::size_t Nk = 36, rows = w.numel() / Nk;
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < Nk; ++j) s += w[r * Nk + j];
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(ShiftedWindowAttention, ShiftByWholeWindowsEqualsNoShift) {
    ad::ParamStore<double> store;
    Rng rng(4);
    auto p = WmsaParams<double>::create(store, "attn", 4, 2, 4, rng);
    for (auto& e : store.entries()) e.var.mutable_value() = randn(e.var.shape(), 5, 0.5);
    auto x = randn({1, 4, 8, 8}, 6);
    auto a = shifted_window_attention(cst(x), p, 0).value();
    auto b = shifted_window_attention(cst(x), p, 4).value();
    auto c = shifted_window_attention(cst(x), p, 2).value();
    auto d = shifted_window_attention(cst(x), p, 6).value();
    EXPECT_EQ(max_abs(a, b), 0.0);
    EXPECT_EQ(max_abs(c, d), 0.0);
    EXPECT_GT(max_abs(a, c), 1e-6);
}
