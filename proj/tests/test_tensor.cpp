#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace saat;
using namespace saat::test;

TEST(Conv2d, MatchesNaiveLoops) {
    struct Case {
        std::size_t C, O, H, W, k, stride, pad, groups;
    };
    const Case cases[] = {{3, 4, 7, 6, 3, 1, 1, 1}, {4, 6, 9, 8, 3, 2, 1, 2},
                          {2, 2, 5, 5, 1, 1, 0, 1}, {6, 6, 6, 7, 3, 1, 1, 3}};
    std::uint64_t seed = 1;
    for (const auto& c : cases) {
        auto x = randn({2, c.C, c.H, c.W}, seed++);
        auto w = randn({c.O, c.C / c.groups, c.k, c.k}, seed++);
        auto b = randn({c.O}, seed++);
        auto y = ad::conv2d(cst(x), cst(w), cst(b), c.stride, c.pad, c.groups).value();
        auto ref = naive_conv2d(x, w, b, c.stride, c.pad, c.groups);
        ASSERT_EQ(y.shape(), ref.shape());
        EXPECT_LT(max_abs(y, ref), 1e-12);
    }
}

TEST(Conv2d, DepthwiseGroupsEqualPerChannelFilter) {
    auto x = randn({1, 4, 6, 6}, 11);
    auto w = randn({4, 1, 3, 3}, 12);
    auto y = ad::conv2d(cst(x), cst(w), V(), 1, 1, 4).value();
    for (std::size_t c = 0; c < 4; ++c) {
        TD xc(Shape{1, 1, 6, 6}), wc(Shape{1, 1, 3, 3});
        for (std::size_t i = 0; i < 36; ++i) xc[i] = x[c * 36 + i];
        for (std::size_t i = 0; i < 9; ++i) wc[i] = w[c * 9 + i];
        auto ref = naive_conv2d(xc, wc, TD(), 1, 1, 1);
        for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(y[c * 36 + i], ref[i], 1e-12);
    }
}

TEST(Conv2d, IdentityKernel) {
    auto x = randn({1, 3, 5, 4}, 3);
    TD w(Shape{3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.0;
    EXPECT_EQ(max_abs(ad::conv2d(cst(x), cst(w), V(), 1, 0).value(), x), 0.0);
}

TEST(Conv2d, RejectsIncompatibleWeight) {
    EXPECT_THROW(ad::conv2d(cst(randn({1, 3, 4, 4}, 1)), cst(randn({2, 2, 3, 3}, 2)), V(), 1, 1), InvalidShape);
}

TEST(Dwconv1d, MatchesLoop) {
    auto x = randn({2, 3, 9}, 4);
    auto w = randn({3, 1, 5}, 5);
    auto y = ad::dwconv1d(cst(x), cst(w), 2).value();
    ASSERT_EQ(y.shape(), (Shape{2, 3, 9}));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t l = 0; l < 9; ++l) {
                double s = 0;
                for (std::size_t t = 0; t < 5; ++t) {
                    const long long p = static_cast<long long>(l + t) - 2;
                    if (p >= 0 && p < 9) s += x[(b * 3 + c) * 9 + p] * w[c * 5 + t];
                }
                EXPECT_NEAR(y[(b * 3 + c) * 9 + l], s, 1e-12);
            }
}

TEST(LayerNorm, MatchesFormula) {
    auto x = randn({2, 5, 3, 2}, 6);
    auto g = randn({5}, 7), b = randn({5}, 8);
    auto y = ad::layer_norm(cst(x), cst(g), cst(b), 1e-5).value();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t s = 0; s < 6; ++s) {
            double mu = 0, var = 0;
            for (std::size_t c = 0; c < 5; ++c) mu += x[(n * 5 + c) * 6 + s];
            mu /= 5;
            for (std::size_t c = 0; c < 5; ++c) var += std::pow(x[(n * 5 + c) * 6 + s] - mu, 2);
            var /= 5;
            for (std::size_t c = 0; c < 5; ++c) {
                const double ref = (x[(n * 5 + c) * 6 + s] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
                EXPECT_NEAR(y[(n * 5 + c) * 6 + s], ref, 1e-12);
            }
        }
}

TEST(GroupNorm, MatchesFormulaAndInstanceNormCase) {
    auto x = randn({2, 6, 7}, 9);
    auto g = randn({6}, 10), b = randn({6}, 11);
    for (std::size_t groups : {1u, 2u, 3u, 6u}) {
        auto y = ad::group_norm(cst(x), cst(g), cst(b), groups, 1e-5).value();
        const std::size_t cpg = 6 / groups;
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t gi = 0; gi < groups; ++gi) {
                double mu = 0, var = 0;
                const std::size_t cnt = cpg * 7;
                for (std::size_t c = gi * cpg; c < (gi + 1) * cpg; ++c)
                    for (std::size_t l = 0; l < 7; ++l) mu += x[(n * 6 + c) * 7 + l];
                mu /= static_cast<double>(cnt);
                for (std::size_t c = gi * cpg; c < (gi + 1) * cpg; ++c)
                    for (std::size_t l = 0; l < 7; ++l) var += std::pow(x[(n * 6 + c) * 7 + l] - mu, 2);
                var /= static_cast<double>(cnt);
                for (std::size_t c = gi * cpg; c < (gi + 1) * cpg; ++c)
                    for (std::size_t l = 0; l < 7; ++l) {
                        const double ref = (x[(n * 6 + c) * 7 + l] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
                        EXPECT_NEAR(y[(n * 6 + c) * 7 + l], ref, 1e-12);
                    }
            }
    }
    EXPECT_THROW(ad::group_norm(cst(x), cst(g), cst(b), 4, 1e-5), InvalidConfig);
}

TEST(Softmax, ConstantRowIsUniformAndLargeLogitsAreFinite) {
    auto y = ad::softmax(cst(TD::full({2, 5}, 3.0)), 1).value();
    for (auto v : y.data()) EXPECT_DOUBLE_EQ(v, 0.2);
    TD big(Shape{1, 3}, std::vector<double>{1000.0, 1000.0, -1000.0});
    auto z = ad::softmax(cst(big), 1).value();
    EXPECT_NEAR(z[0], 0.5, 1e-15);
    EXPECT_NEAR(z[1], 0.5, 1e-15);
    EXPECT_EQ(z[2], 0.0);
}

TEST(Activations, SigmoidAndGeluReferencePoints) {
    TD x(Shape{3}, std::vector<double>{0.0, 30.0, -30.0});
    auto s = ad::sigmoid(cst(x)).value();
    EXPECT_EQ(s[0], 0.5);
    auto g = ad::gelu(cst(x)).value();
    EXPECT_EQ(g[0], 0.0);
    EXPECT_NEAR(g[1], 30.0, 1e-12);
    EXPECT_NEAR(g[2], 0.0, 1e-12);
}

TEST(PixelShuffle, HandLayoutAndRoundTrip) {
    TD x(Shape{1, 4, 1, 1}, std::vector<double>{1, 2, 3, 4});
    auto y = ad::pixel_shuffle(cst(x), 2).value();
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    EXPECT_EQ(y[0], 1);
    EXPECT_EQ(y[1], 2);
    EXPECT_EQ(y[2], 3);
    EXPECT_EQ(y[3], 4);
    auto r = randn({2, 18, 3, 4}, 13);
    EXPECT_EQ(max_abs(ad::pixel_unshuffle(ad::pixel_shuffle(cst(r), 3), 3).value(), r), 0.0);
}

TEST(Pooling, GlobalAverage) {
    TD x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    EXPECT_EQ(ad::global_avg_pool(cst(x)).value()[0], 2.5);
}

TEST(Backward, LinearFunctionGradientIsCoefficient) {
    auto x = leaf(randn({4}, 14));
    ad::backward(ad::sum(ad::scale(x, 3.0)));
    for (auto g : x.grad().data()) EXPECT_EQ(g, 3.0);
}

TEST(Backward, SharedInputAccumulates) {
    auto x = leaf(TD(Shape{1}, 2.0));
    ad::backward(ad::sum(ad::mul(x, x)));
    EXPECT_EQ(x.grad()[0], 4.0);
}

TEST(Backward, UnusedParameterGetsNoGradient) {
    ad::ParamStore<double> store;
    auto a = store.add("a", randn({3}, 15));
    auto b = store.add("b", randn({3}, 16));
    ad::backward(ad::sum(a));
    EXPECT_FALSE(a.grad().empty());
    const auto& gb = b.grad();
    for (auto v : gb.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RequiresScalar) {
    auto x = leaf(randn({3}, 17));
    EXPECT_THROW(ad::backward(x), ContractViolation);
}

TEST(Backward, NoGradGuardSkipsGraph) {
    auto x = leaf(randn({3}, 18));
    ad::Var<double> y;
    {
        ad::NoGradGuard ng;
        y = ad::sum(ad::scale(x, 2.0));
    }
    EXPECT_TRUE(ad::grad_enabled());
    ad::backward(y);
    EXPECT_TRUE(x.grad().empty());
}

TEST(GradCheck, ConvAndNormPrimitives) {
    auto rep = gradcheck<double>(
        [](const std::vector<V>& in) { return ad::conv2d(in[0], in[1], in[2], 2, 1, 2); },
        {randn({1, 4, 6, 5}, 19), randn({4, 2, 3, 3}, 20), randn({4}, 21)}, {.probes = 30});
    EXPECT_TRUE(rep.passed(1e-5)) << rep.worst;
    auto rep2 = gradcheck<double>(
        [](const std::vector<V>& in) { return ad::group_norm(in[0], in[1], in[2], 2, 1e-5); },
        {randn({2, 4, 5}, 22), randn({4}, 23), randn({4}, 24)}, {.probes = 30});
    EXPECT_TRUE(rep2.passed(1e-5)) << rep2.worst;
}

TEST(GradCheck, FaultInjectionIsDetected) {
    ad::testing::set_fault_op("sigmoid");
    auto rep = gradcheck<double>([](const std::vector<V>& in) { return ad::sigmoid(in[0]); }, {randn({6}, 25)},
                                 {.probes = 6});
    ad::testing::set_fault_op("");
    EXPECT_FALSE(rep.passed(1e-5));
    auto ok = gradcheck<double>([](const std::vector<V>& in) { return ad::sigmoid(in[0]); }, {randn({6}, 25)},
                                {.probes = 6});
    EXPECT_TRUE(ok.passed(1e-5)) << ok.worst;
}
