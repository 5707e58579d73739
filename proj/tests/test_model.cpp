#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace saat;
using namespace saat::test;

namespace {

ModelConfig tiny(std::size_t scale) {
    ModelConfig c = ModelConfig::toy(scale);
    c.channels = 8;
    c.window = 4;
    c.shifts = {0, 2};
    return c;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("saat_test_" + name)).string();
}

}  // namespace

TEST(Model, ZeroLastConvOutputsImageMean) {
    SaatModel<double> m(tiny(2), 1);
    m.params().get("conv_last.weight").mutable_value().fill(0.0);
    auto y = m.infer(randn({1, 3, 8, 8}, 2));
    for (auto v : y.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Model, OutputShapes) {
    SaatModel<double> m2(tiny(2), 1), m4(tiny(4), 1), m3(tiny(3), 1);
    EXPECT_EQ(m2.infer(randn({1, 3, 17, 19}, 3)).shape(), (Shape{1, 3, 34, 38}));
    EXPECT_EQ(m4.infer(randn({1, 3, 24, 24}, 4)).shape(), (Shape{1, 3, 96, 96}));
    EXPECT_EQ(m3.infer(randn({2, 3, 5, 7}, 5)).shape(), (Shape{2, 3, 15, 21}));
    EXPECT_THROW(m2.infer(randn({1, 1, 8, 8}, 6)), InvalidShape);
}

TEST(Model, SameSeedSameParametersAndOutput) {
    SaatModel<double> a(tiny(2), 9), b(tiny(2), 9), c(tiny(2), 10);
    auto x = randn({1, 3, 8, 8}, 7);
    EXPECT_EQ(max_abs(a.infer(x), b.infer(x)), 0.0);
    EXPECT_GT(max_abs(a.infer(x), c.infer(x)), 0.0);
}

TEST(Model, UpsampleStages) {
    EXPECT_EQ(upsample_stages(2), std::vector<std::size_t>{2});
    EXPECT_EQ(upsample_stages(3), std::vector<std::size_t>{3});
    EXPECT_EQ(upsample_stages(4), (std::vector<std::size_t>{2, 2}));
    EXPECT_THROW(upsample_stages(5), InvalidConfig);
}

TEST(Model, ConfigValidation) {
    auto c = tiny(2);
    c.heads = 3;
    EXPECT_THROW(SaatModel<double>(c, 0), InvalidConfig);
    c = tiny(2);
    c.mu = 0.3;
    EXPECT_THROW(SaatModel<double>(c, 0), InvalidConfig);
    c = tiny(2);
    c.smsa_kernels = {3, 5, 7, 8};
    EXPECT_THROW(SaatModel<double>(c, 0), InvalidConfig);
    c = tiny(2);
    EXPECT_EQ(ModelConfig::deserialize(c.serialize()), c);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    SaatModel<float> m(tiny(2), 4);
    const auto path = temp_path("roundtrip.ckpt");
    save_checkpoint(m, path);
    auto loaded = load_checkpoint<float>(path);
    const auto x = Tensor<float>(randn({1, 3, 8, 8}, 8).cast<float>());
    EXPECT_EQ(max_abs_diff(m.infer(x), loaded.infer(x)), 0.0f);
    EXPECT_EQ(serialize_checkpoint(loaded), io::read_file(path));
    std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedAndGarbledFilesAreRejected) {
    SaatModel<float> m(tiny(2), 4);
    const auto bytes = serialize_checkpoint(m);
    for (std::size_t cut : {std::size_t{0}, std::size_t{5}, bytes.size() / 2, bytes.size() - 1}) {
        EXPECT_THROW(parse_checkpoint(std::string_view(bytes).substr(0, cut)), CorruptCheckpoint) << cut;
    }
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(parse_checkpoint(bad), CorruptCheckpoint);
    EXPECT_THROW(parse_checkpoint(bytes + "xx"), CorruptCheckpoint);
    EXPECT_THROW(load_checkpoint<float>(temp_path("does_not_exist.ckpt")), IoError);
}

TEST(Checkpoint, ArchitectureMismatchNamesParameter) {
    SaatModel<float> m(tiny(2), 4);
    auto other_cfg = tiny(2);
    other_cfg.channels = 12;
    other_cfg.heads = 2;
    SaatModel<float> other(other_cfg, 4);
    const auto ck = parse_checkpoint(serialize_checkpoint(m));
    try {
        load_parameters(other, ck);
        FAIL() << "expected ShapeMismatch";
    } catch (const ShapeMismatch& e) {
        EXPECT_NE(std::string(e.what()).find("conv_first.weight"), std::string::npos) << e.what();
    }
}
