#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace saat;
using namespace saat::test;

TEST(WindowPartition, Counts) {
    EXPECT_EQ(window_partition(cst(randn({1, 2, 32, 32}, 1)), 16).count(), 4u);
    EXPECT_EQ(window_partition(cst(randn({1, 2, 48, 48}, 2)), 16).count(), 9u);
    auto g = window_partition(cst(randn({2, 3, 8, 12}, 3)), 4);
    EXPECT_EQ(g.windows.shape(), (Shape{2 * 6, 16, 3}));
}

TEST(WindowPartition, TokenLayoutMatchesLoops) {
    auto x = randn({2, 3, 8, 12}, 4);
    auto w = window_partition(cst(x), 4).windows.value();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t wy = 0; wy < 2; ++wy)
            for (std::size_t wx = 0; wx < 3; ++wx)
                for (std::size_t t = 0; t < 16; ++t)
                    for (std::size_t c = 0; c < 3; ++c) {
                        const std::size_t win = (n * 2 + wy) * 3 + wx;
                        EXPECT_EQ(w[(win * 16 + t) * 3 + c], x.at(n, c, wy * 4 + t / 4, wx * 4 + t % 4));
                    }
}

TEST(WindowPartition, RoundTripIsExactIncludingPadding) {
    for (std::size_t G : {1u, 2u, 4u, 8u}) {
        for (auto [H, W] : {std::pair{8u, 8u}, {16u, 8u}, {7u, 9u}, {5u, 12u}}) {
            auto x = randn({2, 3, H, W}, G * 100 + H * 10 + W);
            auto back = window_reverse(window_partition(cst(x), G)).value();
            ASSERT_EQ(back.shape(), x.shape());
            EXPECT_EQ(max_abs(back, x), 0.0) << "G=" << G << " H=" << H << " W=" << W;
        }
    }
}

TEST(CyclicShift, IsABijectionInvertedByUnshift) {
    auto x = randn({1, 2, 6, 8}, 5);
    auto y = cyclic_shift(cst(x), 3).value();
    EXPECT_EQ(y.at(0, 1, 0, 0), x.at(0, 1, 3, 3));
    EXPECT_EQ(y.at(0, 0, 5, 7), x.at(0, 0, 2, 2));
    EXPECT_EQ(max_abs(cyclic_unshift(cst(y), 3).value(), x), 0.0);
    std::multiset<double> a(x.data().begin(), x.data().end()), b(y.data().begin(), y.data().end());
    EXPECT_EQ(a, b);
}

TEST(AttnMask, ZeroShiftHasNoMaskedPair) {
    auto m = build_attn_mask<double>(16, 16, 8, 0);
    for (auto v : m.data()) EXPECT_EQ(v, 0.0);
}

TEST(AttnMask, SymmetricWithZeroDiagonal) {
    auto m = build_attn_mask<double>(16, 24, 8, 4);
    const std::size_t N = 64;
    for (std::size_t w = 0; w < m.dim(0); ++w)
        for (std::size_t i = 0; i < N; ++i) {
            EXPECT_EQ(m[(w * N + i) * N + i], 0.0);
            for (std::size_t j = 0; j < N; ++j) EXPECT_EQ(m[(w * N + i) * N + j], m[(w * N + j) * N + i]);
        }
}

TEST(AttnMask, ShiftIsTakenModuloWindow) {
    for (std::size_t s : {0u, 8u, 16u, 24u}) {
        auto a = build_attn_mask<double>(32, 32, 16, s);
        auto b = build_attn_mask<double>(32, 32, 16, s % 16);
        EXPECT_EQ(max_abs(a, b), 0.0) << s;
    }
}

// Brute force: label each pixel of the rolled map by the region it came from
// and compare labels token by token.
TEST(AttnMask, MatchesRegionEnumeration) {
    const std::size_t H = 32, W = 32, G = 16, s = 8;
    auto region = [&](std::size_t v, std::size_t n) { return v < n - G ? 0 : (v < n - s ? 1 : 2); };
    auto m = build_attn_mask<double>(H, W, G, s);
    const std::size_t N = G * G, nwx = W / G;
    std::size_t masked = 0;
    for (std::size_t w = 0; w < m.dim(0); ++w)
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j) {
                const std::size_t hi = (w / nwx) * G + i / G, wi = (w % nwx) * G + i % G;
                const std::size_t hj = (w / nwx) * G + j / G, wj = (w % nwx) * G + j % G;
                const bool same = region(hi, H) == region(hj, H) && region(wi, W) == region(wj, W);
                const double v = m[(w * N + i) * N + j];
                EXPECT_EQ(v, same ? 0.0 : kMaskValue);
                masked += v != 0.0;
            }
    EXPECT_GT(masked, 0u);
    // Only the last row and column of windows straddle a seam.
    for (std::size_t i = 0; i < N * N; ++i) EXPECT_EQ(m[i], 0.0);
}

TEST(RelativePositionIndex, SingleTokenWindowAndRange) {
    EXPECT_EQ(relative_position_index(1), std::vector<std::uint32_t>{0});
    const std::size_t G = 4;
    auto idx = relative_position_index(G);
    std::set<std::uint32_t> seen(idx.begin(), idx.end());
    EXPECT_EQ(seen.size(), (2 * G - 1) * (2 * G - 1));
    EXPECT_EQ(*seen.rbegin(), (2 * G - 1) * (2 * G - 1) - 1);
    for (std::size_t i = 0; i < G * G; ++i) EXPECT_EQ(idx[i * G * G + i], (G - 1) * (2 * G - 1) + G - 1);
}

TEST(CrossPositionIndex, ReducesToSelfIndex) {
    EXPECT_EQ(cross_position_index(4, 4), relative_position_index(4));
    auto idx = cross_position_index(2, 3);
    std::set<std::uint32_t> seen(idx.begin(), idx.end());
    EXPECT_EQ(seen.size(), 16u);
}
