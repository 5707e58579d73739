#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace saat;
using namespace saat::test;

namespace {

ModelConfig small_config() {
    ModelConfig c = ModelConfig::toy(2);
    c.channels = 8;
    c.heads = 2;
    c.window = 4;
    c.shifts = {0, 2};
    return c;
}

void randomize(ad::ParamStore<double>& store, std::uint64_t seed) {
    for (auto& e : store.entries()) e.var.mutable_value() = randn(e.var.shape(), seed++, 0.5);
}

}  // namespace

TEST(EcaKernel, ReferenceTable) {
    EXPECT_EQ(eca_kernel_size(2), 1u);
    EXPECT_EQ(eca_kernel_size(16), 3u);
    EXPECT_EQ(eca_kernel_size(64), 3u);
    EXPECT_EQ(eca_kernel_size(180), 5u);
    EXPECT_EQ(eca_kernel_size(256), 5u);
}

TEST(EcaKernel, OddAndMonotone) {
    std::size_t prev = 0;
    for (std::size_t c = 1; c <= 4096; ++c) {
        const auto k = eca_kernel_size(c);
        EXPECT_EQ(k % 2, 1u) << c;
        EXPECT_GE(k, prev) << c;
        prev = k;
    }
    EXPECT_THROW(eca_kernel_size(0), InvalidConfig);
}

TEST(Smsa, ZeroKernelsGiveQuarterInput) {
    ad::ParamStore<double> store;
    Rng rng(1);
    auto p = SmsabParams<double>::create(store, "smsa", 8, {3, 5}, rng);
    for (auto& w : p.dw) w.mutable_value().fill(0.0);
    auto x = randn({2, 8, 5, 6}, 2);
    auto y = smsa_forward(cst(x), p).value();
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.25 * x[i]);
}

TEST(Smsa, RejectsEvenKernelAndIndivisibleChannels) {
    ad::ParamStore<double> store;
    Rng rng(1);
    EXPECT_THROW(SmsabParams<double>::create(store, "a", 8, {3, 4}, rng), InvalidConfig);
    EXPECT_THROW(SmsabParams<double>::create(store, "b", 9, {3, 5}, rng), InvalidConfig);
}

TEST(Ecab, ZeroGateHalvesFeatures) {
    ad::ParamStore<double> store;
    Rng rng(3);
    auto p = EcabParams<double>::create(store, "ecab", 16, 4, false, rng);
    EXPECT_EQ(p.kernel, 3u);
    p.gate_w.mutable_value().fill(0.0);
    auto x = randn({1, 16, 5, 5}, 4);
    auto f = ecab_squeeze(cst(x), p).value();
    auto y = ecab_forward(cst(x), p).value();
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.5 * f[i]);
}

TEST(Mlp, ZeroOutputLayerGivesZeros) {
    ad::ParamStore<double> store;
    Rng rng(5);
    for (bool conv : {false, true}) {
        auto p = MlpParams<double>::create(store, conv ? "ffn" : "mlp", 4, 8, conv, rng);
        p.fc2_w.mutable_value().fill(0.0);
        auto y = mlp_forward(cst(randn({1, 4, 3, 3}, 6)), p).value();
        for (auto v : y.data()) EXPECT_EQ(v, 0.0);
    }
}

TEST(Mlp, ConvFfnMatchesLoopReference) {
    ad::ParamStore<double> store;
    Rng rng(7);
    auto p = MlpParams<double>::create(store, "ffn", 2, 3, true, rng);
    randomize(store, 8);
    auto x = randn({1, 2, 4, 4}, 9);
    auto y = mlp_forward(cst(x), p).value();
    const auto& w1 = p.fc1_w.value();
    const auto& b1 = p.fc1_b.value();
    const auto& w2 = p.fc2_w.value();
    const auto& b2 = p.fc2_b.value();
    TD h(Shape{1, 3, 4, 4});
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t s = 0; s < 16; ++s) {
            double a = b1[o];
            for (std::size_t c = 0; c < 2; ++c) a += w1[o * 2 + c] * x[c * 16 + s];
            h[o * 16 + s] = ad::gelu_scalar(a);
        }
    auto dw = naive_conv2d(h, p.dw_w.value(), p.dw_b.value(), 1, 1, 3);
    for (std::size_t o = 0; o < 2; ++o)
        for (std::size_t s = 0; s < 16; ++s) {
            double a = b2[o];
            for (std::size_t c = 0; c < 3; ++c) a += w2[o * 3 + c] * (h[c * 16 + s] + dw[c * 16 + s]);
            EXPECT_NEAR(y[o * 16 + s], a, 1e-12);
        }
}

TEST(Group, EveryParameterIsReachable) {
    const auto cfg = small_config();
    for (auto kind : {GroupKind::Spatial, GroupKind::Channel}) {
        ad::ParamStore<double> store;
        Rng rng(10);
        auto g = GroupParams<double>::create(store, "g", cfg, kind, rng);
        randomize(store, 11);
        auto x = leaf(randn({1, cfg.channels, 8, 8}, 12));
        ad::backward(weighted_sum(group_forward(x, g), 13));
        for (const auto& e : store.entries()) {
            double m = 0;
            for (auto v : e.var.grad().data()) m = std::max(m, std::abs(v));
            EXPECT_GT(m, 0.0) << e.name;
        }
        EXPECT_FALSE(x.grad().empty());
    }
}

TEST(Block, ComposesResidualBranches) {
    const auto cfg = small_config();
    for (auto kind : {GroupKind::Spatial, GroupKind::Channel}) {
        ad::ParamStore<double> store;
        Rng rng(14);
        auto p = BlockParams<double>::create(store, "b", cfg, kind, rng);
        randomize(store, 15);
        p.branch_weight = 0.3;
        auto x = cst(randn({1, cfg.channels, 8, 8}, 16));
        auto y = block_forward(x, p, 2).value();
        auto ln = layer_norm(x, p.norm1);
        auto branch = kind == GroupKind::Spatial ? smsa_forward(ln, p.smsa)
                                                 : ecab_forward(layer_norm(x, p.norm_eca), p.ecab);
        auto f = ad::add(ad::add(x, shifted_window_attention(ln, p.attn, 2)), ad::scale(branch, 0.3));
        auto ref = ad::add(f, mlp_forward(layer_norm(f, p.norm2), p.mlp)).value();
        EXPECT_LT(max_abs(y, ref), 1e-12);
        EXPECT_THROW(kind == GroupKind::Spatial ? cwsab_forward(x, p, 0) : swsab_forward(x, p, 0), InvalidConfig);
    }
}
