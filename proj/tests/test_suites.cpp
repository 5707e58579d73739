#include <gtest/gtest.h>

#include "saat/verify.hpp"

using namespace saat;

namespace {

struct SuiteCase {
    std::size_t index;
    std::string label;
};

std::vector<SuiteCase> cases() {
    std::vector<SuiteCase> out;
    const auto checks = verify::all_checks();
    for (std::size_t i = 0; i < checks.size(); ++i) {
        std::string label = checks[i].module + "_" + checks[i].name;
        for (auto& ch : label)
            if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
        out.push_back({i, label});
    }
    return out;
}

class SelfCheck : public ::testing::TestWithParam<SuiteCase> {};

}  // namespace

TEST_P(SelfCheck, PassesAt64Bit) {
    const auto check = verify::all_checks().at(GetParam().index);
    const auto v = check.run({.f64 = true, .seed = 0});
    EXPECT_TRUE(v.ok) << check.module << "/" << check.name << ": " << v.detail;
}

INSTANTIATE_TEST_SUITE_P(All, SelfCheck, ::testing::ValuesIn(cases()),
                         [](const ::testing::TestParamInfo<SuiteCase>& info) { return info.param.label; });

TEST(SelfCheckRunner, ReportsEveryModule) {
    std::set<std::string> seen;
    for (const auto& c : verify::all_checks()) seen.insert(c.module);
    for (const auto& m : verify::module_names()) EXPECT_TRUE(seen.contains(m)) << m;
}

TEST(SelfCheckRunner, FaultInjectionFailsTheRun) {
    ad::testing::set_fault_op("gelu");
    std::ostringstream os;
    const auto failures = verify::run_checks({.f64 = true}, "tensor-engine", os, true);
    ad::testing::set_fault_op("");
    EXPECT_EQ(failures, 1u);
    EXPECT_NE(os.str().find("[FAIL] tensor-engine/grad:gelu"), std::string::npos) << os.str();
}
