#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace saat;
using namespace saat::test;

namespace {

ModelConfig tiny() {
    ModelConfig c = ModelConfig::toy(2);
    c.channels = 8;
    c.window = 4;
    c.shifts = {0, 2};
    return c;
}

TrainConfig quick(std::size_t steps) {
    TrainConfig t;
    t.steps = steps;
    t.patch = 16;
    t.seed = 3;
    return t;
}

}  // namespace

TEST(Schedule, ReferenceValues) {
    const auto& ms = kReferenceMilestones;
    const std::vector<std::size_t> m(ms.begin(), ms.end());
    EXPECT_EQ(lr_at(0, 2e-4, m), 2e-4);
    EXPECT_EQ(lr_at(249999, 2e-4, m), 2e-4);
    EXPECT_EQ(lr_at(250000, 2e-4, m), 1e-4);
    EXPECT_EQ(lr_at(400000, 2e-4, m), 5e-5);
    EXPECT_EQ(lr_at(450000, 2e-4, m), 2.5e-5);
    EXPECT_EQ(lr_at(475000, 2e-4, m), 1.25e-5);
    EXPECT_EQ(lr_at(499999, 2e-4, m), 1.25e-5);
    EXPECT_THROW(lr_at(0, 1.0, {5, 5}), InvalidConfig);
}

TEST(Schedule, ScaledMilestonesAreIncreasingAndProportional) {
    EXPECT_EQ(scaled_milestones(1000), (std::vector<std::size_t>{500, 800, 900, 950}));
    EXPECT_EQ(scaled_milestones(kReferenceSteps),
              std::vector<std::size_t>(kReferenceMilestones.begin(), kReferenceMilestones.end()));
    for (std::size_t total : {1u, 2u, 3u, 10u, 37u}) {
        auto m = scaled_milestones(total);
        for (std::size_t i = 1; i < m.size(); ++i) EXPECT_LT(m[i - 1], m[i]) << total;
    }
}

TEST(Adam, FirstStepMovesByLrAgainstGradientSign) {
    ad::ParamStore<double> store;
    auto p = store.add("p", TD(Shape{3}, std::vector<double>{1.0, -2.0, 0.5}));
    p.grad_slot() = TD(Shape{3}, std::vector<double>{0.3, -4.0, 1e-3});
    AdamState<double> st;
    adam_step(store, st, 0.1);
    const double expect[3] = {0.9, -1.9, 0.4};
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.value()[i], expect[i], 1e-5);
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroBetasGiveSignDescent) {
    ad::ParamStore<double> store;
    auto p = store.add("p", TD(Shape{2}, std::vector<double>{0.0, 0.0}));
    AdamState<double> st;
    st.beta1 = st.beta2 = 0.0;
    st.eps = 0.0;
    for (int k = 0; k < 3; ++k) {
        p.grad_slot() = TD(Shape{2}, std::vector<double>{2.0 + k, -0.5});
        adam_step(store, st, 0.01);
    }
    EXPECT_NEAR(p.value()[0], -0.03, 1e-15);
    EXPECT_NEAR(p.value()[1], 0.03, 1e-15);
}

TEST(Adam, MissingGradientCountsAsZero) {
    ad::ParamStore<double> store;
    auto p = store.add("p", TD(Shape{1}, 1.0));
    AdamState<double> st;
    adam_step(store, st, 0.1);
    EXPECT_EQ(p.value()[0], 1.0);
    EXPECT_EQ(st.step, 1u);
}

TEST(Augment, FlipsAreInvolutionsAndRotationHasOrderFour) {
    auto img = test_pattern(7, 5, 1);
    EXPECT_EQ(flip_horizontal(flip_horizontal(img)), img);
    EXPECT_EQ(flip_vertical(flip_vertical(img)), img);
    auto r = rotate90(img);
    EXPECT_EQ(r.width, 5u);
    EXPECT_EQ(r.height, 7u);
    EXPECT_EQ(rotate90(rotate90(rotate90(r))), img);
    EXPECT_EQ(flip_horizontal(img).at(0, 2, 1), img.at(6, 2, 1));
    EXPECT_EQ(flip_vertical(img).at(3, 0, 2), img.at(3, 4, 2));
}

TEST(Sampler, PairsAreAlignedAndDeterministic) {
    std::vector<ImageBuffer> imgs{test_pattern(40, 36, 1), test_pattern(33, 48, 2)};
    PatchSampler a(imgs, 2, 16, true, 5), b(imgs, 2, 16, true, 5);
    for (int i = 0; i < 10; ++i) {
        auto [lr, hr] = a.sample_pair();
        auto [lr2, hr2] = b.sample_pair();
        EXPECT_EQ(lr, lr2);
        EXPECT_EQ(hr, hr2);
        EXPECT_EQ(lr.width, 8u);
        EXPECT_EQ(hr.width, 16u);
        // The LR patch is the bicubic downscale of its HR patch up to border
        // effects; the interior must agree closely.
        auto down = bicubic_resize(hr, 1, 2);
        double worst = 0;
        for (std::size_t y = 2; y < 6; ++y)
            for (std::size_t x = 2; x < 6; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    worst = std::max(worst, std::abs(double(down.at(x, y, c)) - double(lr.at(x, y, c))));
        EXPECT_LE(worst, 2.0);
    }
}

TEST(Sampler, SkipsSmallImagesWithWarning) {
    std::ostringstream warn;
    PatchSampler s({test_pattern(8, 8, 1), test_pattern(32, 32, 2)}, 2, 16, false, 1, &warn);
    EXPECT_EQ(s.size(), 1u);
    EXPECT_NE(warn.str().find("skipping"), std::string::npos);
    EXPECT_THROW(PatchSampler({test_pattern(8, 8, 1)}, 2, 16, false, 1, &warn), InvalidConfig);
    EXPECT_THROW(PatchSampler({test_pattern(32, 32, 1)}, 3, 16, false, 1, &warn), InvalidConfig);
}

TEST(RunConfig, ParsesSectionsAndRejectsUnknownKeys) {
    auto rc = RunConfig::parse("# comment\nmodel.channels = 16\ntrain.steps=7\ntrain.milestones=2,4\ndata.train_root=x\n");
    EXPECT_EQ(rc.model.channels, 16u);
    EXPECT_EQ(rc.train.steps, 7u);
    EXPECT_EQ(rc.train.effective_milestones(), (std::vector<std::size_t>{2, 4}));
    EXPECT_EQ(rc.train_root, "x");
    EXPECT_THROW(RunConfig::parse("model.chanels=16\n"), InvalidConfig);
    EXPECT_THROW(RunConfig::parse("bogus.steps=1\n"), InvalidConfig);
    EXPECT_THROW(RunConfig::parse("train.steps=abc\n"), InvalidConfig);
    EXPECT_THROW(RunConfig::parse("model.heads=5\n"), InvalidConfig);
}

TEST(TraceLine, RoundTripFormatting) {
    // Shortest representation that parses back to the same double.
    EXPECT_EQ(format_trace_line({3, 2e-4, 0.125}), "3\t2e-04\t0.125\n");
    const double l1 = 0.1 + 0.2;
    const auto line = format_trace_line({7, 1e-3, l1});
    EXPECT_EQ(std::stod(line.substr(line.rfind('\t') + 1)), l1);
}

TEST(Trainer, SameSeedSameTrace) {
    std::vector<ImageBuffer> imgs{test_pattern(24, 24, 4)};
    Trainer<float> a(tiny(), quick(3), imgs), b(tiny(), quick(3), imgs);
    auto ta = a.run(), tb = b.run();
    ASSERT_EQ(ta.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(format_trace_line(ta[i]), format_trace_line(tb[i]));
    }
    EXPECT_EQ(serialize_checkpoint(a.model()), serialize_checkpoint(b.model()));
}

TEST(Trainer, ResumeContinuesBitForBit) {
    std::vector<ImageBuffer> imgs{test_pattern(24, 24, 5)};
    Trainer<float> full(tiny(), quick(4), imgs);
    auto ref = full.run();
    Trainer<float> first(tiny(), quick(4), imgs);
    first.train_step();
    first.train_step();
    const auto state = first.serialize_state();
    Trainer<float> resumed(tiny(), quick(4), imgs);
    resumed.load_state(state);
    EXPECT_EQ(resumed.step(), 2u);
    auto rest = resumed.run();
    ASSERT_EQ(rest.size(), 2u);
    EXPECT_EQ(format_trace_line(rest[0]), format_trace_line(ref[2]));
    EXPECT_EQ(format_trace_line(rest[1]), format_trace_line(ref[3]));
    EXPECT_EQ(serialize_checkpoint(resumed.model()), serialize_checkpoint(full.model()));
    EXPECT_THROW(resumed.load_state(state.substr(0, state.size() - 3)), CorruptCheckpoint);
}

TEST(Trainer, LossDecreasesOnTinyProblem) {
    std::vector<ImageBuffer> imgs{test_pattern(16, 16, 6)};
    auto cfg = quick(30);
    cfg.lr = 1e-3;
    cfg.augment = false;
    Trainer<float> t(tiny(), cfg, imgs);
    auto trace = t.run();
    EXPECT_LT(trace.back().l1, trace.front().l1);
}

TEST(Trainer, NonFiniteLossIsReported) {
    std::vector<ImageBuffer> imgs{test_pattern(16, 16, 7)};
    Trainer<float> t(tiny(), quick(2), imgs);
    t.model().params().get("conv_last.bias").mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        t.train_step();
        FAIL() << "expected NonFiniteLoss";
    } catch (const NonFiniteLoss& e) {
        EXPECT_NE(std::string(e.what()).find("conv_last.bias NON-FINITE"), std::string::npos) << e.what();
    }
}
