// Acceptance run: one PASS/FAIL line per criterion. Criteria backed by
// self-checks run every check carrying that tag at 64 bits; criterion 6
// trains the toy network. Optional arguments restrict the run to the listed
// criterion numbers.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

#include "saat/verify.hpp"

using namespace saat;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool ok = true;
    std::string detail;
};

Outcome run_tagged(int criterion, double time_limit_s = 0) {
    const auto t0 = Clock::now();
    Outcome o;
    std::size_t ran = 0;
    for (const auto& c : verify::all_checks()) {
        if (c.criterion != criterion) continue;
        verify::Verdict v;
        try {
            v = c.run({.f64 = true, .seed = 0});
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        ++ran;
        std::cout << "    " << (v.ok ? "ok   " : "FAIL ") << c.module << "/" << c.name << ": " << v.detail << "\n";
        if (!v.ok) {
            o.ok = false;
            if (o.detail.empty()) o.detail = "first failure " + c.module + "/" + c.name;
        }
    }
    const double secs = seconds_since(t0);
    if (ran == 0) {
        o.ok = false;
        o.detail = "no checks carry this criterion";
    }
    if (time_limit_s > 0 && secs > time_limit_s) {
        o.ok = false;
        o.detail += (o.detail.empty() ? "" : "; ") + std::string("over time budget");
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%zu checks in %.1fs", ran, secs);
    o.detail = o.detail.empty() ? buf : std::string(buf) + "; " + o.detail;
    return o;
}

// Overfit one 64x64 image at x2 with the toy network.
Outcome desk_learning() {
    const auto t0 = Clock::now();
    const auto hr = test_pattern(64, 64, 1);
    TrainConfig tc;
    tc.steps = 1000;
    tc.batch = 1;
    tc.seed = 1;
    tc.lr = 2e-4;
    tc.patch = 64;
    tc.augment = false;
    Trainer<float> trainer(ModelConfig::toy(2), tc, {hr});
    double first = 0, last = 0;
    trainer.run(
        [&](const TraceEntry& e) {
            if (e.step == 0) first = e.l1;
            last = e.l1;
            if (e.step % 100 == 0) std::cout << "    step " << e.step << " lr " << e.lr << " l1 " << e.l1 << "\n";
        },
        [](std::size_t) {});
    const auto lr_img = bicubic_resize(hr, 1, 2);
    const auto sr = tensor_to_image(trainer.model().infer(image_to_tensor<float>(lr_img)));
    const auto bic = bicubic_resize(lr_img, 2, 1);
    const double p_model = psnr(sr, hr, 2, true), p_bic = psnr(bic, hr, 2, true);
    const double secs = seconds_since(t0);
    const double ratio = last / first;
    Outcome o;
    o.ok = ratio <= 0.2 && p_model >= p_bic + 1.0 && secs <= 1800.0;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "L1 %.5f -> %.5f (ratio %.4f, need <= 0.2); PSNR %.3f dB vs bicubic %.3f dB (gain %.3f, need >= 1.0); "
                  "%.1fs (need <= 1800s)",
                  first, last, ratio, p_model, p_bic, p_model - p_bic, secs);
    o.detail = buf;
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    const std::pair<int, const char*> criteria[] = {
        {1, "gradient suite"},      {2, "structural degenerations"}, {3, "eca kernel table"},
        {4, "windowing exactness"}, {5, "shape contract"},           {6, "desk-scale learning"},
        {7, "metric oracles"},      {8, "lr schedule"},              {9, "persistence"},
        {10, "determinism"},
    };
    std::vector<std::string> summary;
    int failed = 0;
    for (const auto& [n, title] : criteria) {
        if (!only.empty() && !only.contains(n)) continue;
        std::cout << "criterion " << n << " (" << title << ")\n" << std::flush;
        Outcome o;
        try {
            o = n == 6 ? desk_learning() : run_tagged(n, n == 1 ? 300.0 : 0.0);
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += o.ok ? 0 : 1;
        std::ostringstream line;
        line << "[" << (o.ok ? "PASS" : "FAIL") << "] criterion " << n << " " << title << ": " << o.detail;
        std::cout << line.str() << "\n" << std::flush;
        summary.push_back(line.str());
    }
    std::cout << "\nsummary\n";
    for (const auto& s : summary) std::cout << s << "\n";
    std::cout << (failed ? "ACCEPTANCE FAILED" : "ACCEPTANCE PASSED") << ": " << summary.size() << " criteria, "
              << failed << " failed\n";
    return failed ? 1 : 0;
}
