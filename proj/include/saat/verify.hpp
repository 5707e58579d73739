#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "gradcheck.hpp"
#include "train.hpp"

// Self-verification suites shared by `saat check` and the acceptance binary.
// Each check is tagged with the module it exercises and, where relevant, the
// acceptance criterion it belongs to.

namespace saat::verify {

struct Verdict {
    bool ok = true;
    std::string detail;
};

struct Context {
    bool f64 = true;
    std::uint64_t seed = 0;
};

struct Check {
    std::string module;
    std::string name;
    int criterion = 0;
    std::function<Verdict(const Context&)> run;
};

inline const std::vector<std::string>& module_names() {
    static const std::vector<std::string> names = {"tensor-engine", "windowing", "attention-core", "saat-blocks",
                                                   "saat-model",    "train-optim", "image-toolkit"};
    return names;
}

namespace detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

template <typename T>
Tensor<T> rnd(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng r(seed);
    return random_uniform<double>(s, r, lo, hi).template cast<T>();
}

template <typename T>
ad::Var<T> input(Probe<T>& p, const std::string& name, const Tensor<T>& v) {
    auto var = ad::Var<T>::leaf(v, true);
    p.leaves.push_back(var);
    p.names.push_back(name);
    return var;
}

/// Replaces every parameter with N(0, 0.5^2) draws (made in double so both
/// precisions see the same values) and registers them as probe leaves.
template <typename T>
void adopt_params(Probe<T>& p, ad::ParamStore<T>& store, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& e : store.entries()) {
        e.var.mutable_value() = random_normal<double>(e.var.shape(), rng, 0.5).template cast<T>();
        p.leaves.push_back(e.var);
        p.names.push_back(e.name);
    }
}

template <typename Make>
Verdict grad_verdict(const Make& make, const Context& ctx, double tol64, double tol32, std::size_t min_probes = 20) {
    const auto probe_count = [&] {
        auto p = make(std::type_identity<double>{});
        return std::max<std::size_t>(min_probes, std::min<std::size_t>(2 * p.leaves.size(), 200));
    }();
    GradCheckOptions opt;
    opt.probes = probe_count;
    opt.seed = ctx.seed + 7;
    // Float gradients carry roundoff near 1e-6 in absolute terms.
    opt.floor = ctx.f64 ? 1e-4 : 1e-2;
    const auto rep = gradcheck_probe(make, ctx.f64, opt);
    const double tol = ctx.f64 ? tol64 : tol32;
    Verdict v;
    v.ok = rep.passed(tol);
    v.detail = "max rel err " + num(rep.max_rel_error) + " over " + std::to_string(rep.probes) + " probes (tol " +
               num(tol) + ")";
    if (!v.ok) v.detail += "; worst " + rep.worst;
    return v;
}

/// Block-level probe configuration: small enough for finite differences,
/// with every branch active.
inline ModelConfig probe_config() {
    ModelConfig c;
    c.scale = 2;
    c.channels = 8;
    c.heads = 2;
    c.window = 4;
    c.n_swsag = 1;
    c.n_cwsag = 1;
    c.shifts = {0, 2};
    c.alpha = 0.7;
    c.beta = 0.7;
    c.mu = 0.5;
    c.k_groups = 4;
    c.smsa_kernels = {3, 5, 7, 9};
    return c;
}

template <typename T, typename Build>
Probe<T> param_probe(std::uint64_t seed, const Shape& in_shape, Build&& build) {
    Probe<T> p;
    auto store = std::make_shared<ad::ParamStore<T>>();
    Rng rng(seed);
    auto forward = build(*store, rng);
    adopt_params(p, *store, seed + 1);
    auto x = input(p, "x", rnd<T>(in_shape, seed + 2));
    p.fn = [forward, x, seed] { return weighted_sum(forward(x), seed + 3); };
    p.keep = store;
    return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// tensor-engine

inline void add_tensor_engine(std::vector<Check>& out) {
    using detail::input;
    using detail::rnd;
    auto prim = [&out](const std::string& name, auto make) {
        out.push_back({"tensor-engine", "grad:" + name, 1, [make](const Context& ctx) {
                           return detail::grad_verdict(make, ctx, 1e-5, 1e-3);
                       }});
    };
#define SAAT_PRIM(NAME, ...)                                  \
    prim(NAME, [](auto tag) {                                 \
        using T = typename decltype(tag)::type;               \
        Probe<T> p;                                           \
        __VA_ARGS__                                           \
        return p;                                             \
    })

    SAAT_PRIM("add", auto a = input(p, "a", rnd<T>({2, 3, 4}, 1)); auto b = input(p, "b", rnd<T>({1, 3, 1}, 2));
              p.fn = [=] { return weighted_sum(ad::add(a, b), 3); };);
    SAAT_PRIM("sub", auto a = input(p, "a", rnd<T>({2, 3, 4}, 1)); auto b = input(p, "b", rnd<T>({2, 1, 4}, 2));
              p.fn = [=] { return weighted_sum(ad::sub(a, b), 3); };);
    SAAT_PRIM("mul", auto a = input(p, "a", rnd<T>({2, 3, 4}, 1)); auto b = input(p, "b", rnd<T>({1, 3, 4}, 2));
              p.fn = [=] { return weighted_sum(ad::mul(a, b), 3); };);
    SAAT_PRIM("scale", auto a = input(p, "a", rnd<T>({3, 5}, 1));
              p.fn = [=] { return weighted_sum(ad::scale(a, T(1.7)), 3); };);
    SAAT_PRIM("add_scalar", auto a = input(p, "a", rnd<T>({3, 5}, 1));
              p.fn = [=] { return weighted_sum(ad::add_scalar(a, T(-0.3)), 3); };);
    SAAT_PRIM("sigmoid", auto a = input(p, "a", rnd<T>({2, 3, 4}, 1, -3, 3));
              p.fn = [=] { return weighted_sum(ad::sigmoid(a), 3); };);
    SAAT_PRIM("gelu", auto a = input(p, "a", rnd<T>({2, 3, 4}, 1, -3, 3));
              p.fn = [=] { return weighted_sum(ad::gelu(a), 3); };);
    SAAT_PRIM("sum", auto a = input(p, "a", rnd<T>({2, 3, 4}, 1));
              p.fn = [=] { return ad::scale(ad::sum(ad::mul(a, a)), T(0.5)); };);
    SAAT_PRIM("mean", auto a = input(p, "a", rnd<T>({2, 3, 4}, 1));
              p.fn = [=] { return ad::mean(ad::mul(a, a)); };);
    SAAT_PRIM("mean_axis", auto a = input(p, "a", rnd<T>({2, 3, 4, 5}, 1)); p.fn = [=] {
        return ad::add(weighted_sum(ad::mean_axis(a, 2, false), 3), weighted_sum(ad::mean_axis(a, 3, true), 4));
    };);
    SAAT_PRIM("global_avg_pool", auto a = input(p, "a", rnd<T>({2, 3, 4, 5}, 1));
              p.fn = [=] { return weighted_sum(ad::global_avg_pool(a), 3); };);
    SAAT_PRIM("softmax", auto a = input(p, "a", rnd<T>({2, 3, 5}, 1, -2, 2)); p.fn = [=] {
        return ad::add(weighted_sum(ad::softmax(a, 2), 3), weighted_sum(ad::softmax(a, 1), 4));
    };);
    SAAT_PRIM("l1_loss", auto a = input(p, "pred", rnd<T>({2, 3, 4}, 1)); auto b = input(p, "target", rnd<T>({2, 3, 4}, 2));
              p.fn = [=] { return ad::l1_loss(a, b); };);
    SAAT_PRIM("reshape", auto a = input(p, "a", rnd<T>({2, 3, 4}, 1));
              p.fn = [=] { return weighted_sum(ad::reshape(a, Shape{4, 6}), 3); };);
    SAAT_PRIM("permute", auto a = input(p, "a", rnd<T>({2, 3, 4, 5}, 1));
              p.fn = [=] { return weighted_sum(ad::permute(a, {2, 0, 3, 1}), 3); };);
    SAAT_PRIM("narrow", auto a = input(p, "a", rnd<T>({2, 6, 4}, 1));
              p.fn = [=] { return weighted_sum(ad::narrow(a, 1, 2, 3), 3); };);
    SAAT_PRIM("concat", auto a = input(p, "a", rnd<T>({2, 2, 4}, 1)); auto b = input(p, "b", rnd<T>({2, 3, 4}, 2));
              p.fn = [=] { return weighted_sum(ad::concat(std::vector<ad::Var<T>>{a, b}, 1), 3); };);
    SAAT_PRIM("roll2d", auto a = input(p, "a", rnd<T>({1, 2, 4, 5}, 1));
              p.fn = [=] { return weighted_sum(ad::roll2d(a, 1, -2), 3); };);
    SAAT_PRIM("pad2d", auto a = input(p, "a", rnd<T>({1, 2, 4, 5}, 1)); p.fn = [=] {
        return ad::add(weighted_sum(ad::pad2d(a, 1, 2, 0, 3, ad::PadMode::Zero), 3),
                       weighted_sum(ad::pad2d(a, 0, 3, 2, 4, ad::PadMode::Reflect), 4));
    };);
    SAAT_PRIM("crop2d", auto a = input(p, "a", rnd<T>({1, 2, 5, 6}, 1));
              p.fn = [=] { return weighted_sum(ad::crop2d(a, 1, 2, 3, 3), 3); };);
    SAAT_PRIM("pixel_shuffle", auto a = input(p, "a", rnd<T>({1, 8, 3, 2}, 1));
              p.fn = [=] { return weighted_sum(ad::pixel_shuffle(a, 2), 3); };);
    SAAT_PRIM("pixel_unshuffle", auto a = input(p, "a", rnd<T>({1, 2, 4, 6}, 1));
              p.fn = [=] { return weighted_sum(ad::pixel_unshuffle(a, 2), 3); };);
    SAAT_PRIM("conv2d", auto x = input(p, "x", rnd<T>({2, 3, 5, 5}, 1)); auto w = input(p, "w", rnd<T>({4, 3, 3, 3}, 2));
              auto b = input(p, "b", rnd<T>({4}, 3));
              p.fn = [=] { return weighted_sum(ad::conv2d(x, w, b, 1, 1), 4); };);
    SAAT_PRIM("conv2d_stride2", auto x = input(p, "x", rnd<T>({1, 2, 6, 5}, 1));
              auto w = input(p, "w", rnd<T>({3, 2, 3, 3}, 2)); auto b = input(p, "b", rnd<T>({3}, 3));
              p.fn = [=] { return weighted_sum(ad::conv2d(x, w, b, 2, 1), 4); };);
    SAAT_PRIM("conv2d_grouped", auto x = input(p, "x", rnd<T>({1, 4, 4, 4}, 1));
              auto w = input(p, "w", rnd<T>({4, 2, 3, 3}, 2)); auto b = input(p, "b", rnd<T>({4}, 3));
              p.fn = [=] { return weighted_sum(ad::conv2d(x, w, b, 1, 1, 2), 4); };);
    SAAT_PRIM("conv2d_1x1", auto x = input(p, "x", rnd<T>({2, 3, 3, 4}, 1));
              auto w = input(p, "w", rnd<T>({5, 3, 1, 1}, 2)); auto b = input(p, "b", rnd<T>({5}, 3));
              p.fn = [=] { return weighted_sum(ad::conv2d(x, w, b, 1, 0), 4); };);
    SAAT_PRIM("dwconv1d", auto x = input(p, "x", rnd<T>({2, 4, 7}, 1)); auto w = input(p, "w", rnd<T>({4, 1, 3}, 2));
              p.fn = [=] { return weighted_sum(ad::dwconv1d(x, w, 1), 4); };);
    SAAT_PRIM("linear", auto x = input(p, "x", rnd<T>({2, 5, 4}, 1)); auto w = input(p, "w", rnd<T>({3, 4}, 2));
              auto b = input(p, "b", rnd<T>({3}, 3));
              p.fn = [=] { return weighted_sum(ad::linear(x, w, b), 4); };);
    SAAT_PRIM("bmm", auto a = input(p, "a", rnd<T>({2, 3, 4}, 1)); auto b = input(p, "b", rnd<T>({2, 4, 5}, 2));
              auto c = input(p, "c", rnd<T>({2, 5, 4}, 3)); p.fn = [=] {
                  return ad::add(weighted_sum(ad::bmm(a, b), 4), weighted_sum(ad::bmm(a, c, true), 5));
              };);
    SAAT_PRIM("layer_norm", auto x = input(p, "x", rnd<T>({2, 4, 3, 3}, 1)); auto g = input(p, "gamma", rnd<T>({4}, 2));
              auto b = input(p, "beta", rnd<T>({4}, 3));
              p.fn = [=] { return weighted_sum(ad::layer_norm(x, g, b), 4); };);
    SAAT_PRIM("group_norm", auto x = input(p, "x", rnd<T>({2, 4, 5}, 1)); auto g = input(p, "gamma", rnd<T>({4}, 2));
              auto b = input(p, "beta", rnd<T>({4}, 3));
              auto y = input(p, "y", rnd<T>({1, 4, 3, 3}, 5)); p.fn = [=] {
                  return ad::add(weighted_sum(ad::group_norm(x, g, b, 2), 4),
                                 weighted_sum(ad::group_norm(y, g, b, 4), 6));
              };);
    SAAT_PRIM("extract_windows", auto x = input(p, "x", rnd<T>({1, 2, 4, 4}, 1)); p.fn = [=] {
        return ad::add(weighted_sum(ad::extract_windows(x, 4, 2, 1), 3),
                       weighted_sum(ad::extract_windows(x, 2, 2, 0), 4));
    };);
    SAAT_PRIM("merge_windows", auto w = input(p, "windows", rnd<T>({8, 4, 3}, 1));
              p.fn = [=] { return weighted_sum(ad::merge_windows(w, 2, 4, 4, 2), 3); };);
    SAAT_PRIM("gather_bias", auto t = input(p, "table", rnd<T>({9, 2}, 1)); const auto idx = relative_position_index(2);
              p.fn = [=] { return weighted_sum(ad::gather_bias(t, idx, 4, 4), 3); };);
#undef SAAT_PRIM

    out.push_back({"tensor-engine", "pixel_shuffle_roundtrip", 0, [](const Context&) {
                       const auto x = detail::rnd<double>({2, 12, 3, 5}, 1);
                       ad::NoGradGuard ng;
                       const auto a = ad::pixel_unshuffle(ad::pixel_shuffle(ad::Var<double>::constant(x), 2), 2);
                       const auto y = detail::rnd<double>({1, 3, 6, 9}, 2);
                       const auto b = ad::pixel_shuffle(ad::pixel_unshuffle(ad::Var<double>::constant(y), 3), 3);
                       return Verdict{a.value() == x && b.value() == y, "shuffle/unshuffle inverse pairs"};
                   }});
    out.push_back({"tensor-engine", "softmax_stability", 0, [](const Context&) {
                       auto x = detail::rnd<double>({3, 7}, 3, -1e4, 1e4);
                       ad::NoGradGuard ng;
                       const auto s = ad::softmax(ad::Var<double>::constant(x), 1).value();
                       double worst = 0;
                       for (std::size_t r = 0; r < 3; ++r) {
                           double sum = 0;
                           for (std::size_t c = 0; c < 7; ++c) sum += s[r * 7 + c];
                           worst = std::max(worst, std::abs(sum - 1.0));
                       }
                       return Verdict{worst <= 1e-6 && std::isfinite(worst), "max |row sum - 1| = " + detail::num(worst)};
                   }});
    out.push_back({"tensor-engine", "backward_requires_scalar", 0, [](const Context&) {
                       auto x = ad::Var<double>::leaf(Tensor<double>({2, 2}, 1.0), true);
                       try {
                           ad::backward(ad::scale(x, 2.0));
                       } catch (const ContractViolation&) {
                           return Verdict{true, "non-scalar backward rejected"};
                       }
                       return Verdict{false, "backward on a 2x2 output did not throw"};
                   }});
}

// ---------------------------------------------------------------------------
// windowing

/// Independent mask oracle: label every pixel of the unrolled map by the
/// (row band, column band) of the original image it came from.
inline Tensor<double> mask_oracle(std::size_t H, std::size_t W, std::size_t G, std::size_t s) {
    auto band = [&](std::size_t i, std::size_t n) {
        if (s == 0) return 0;
        // After rolling by s, position i holds original position (i + s) mod n.
        // Regions: [0, n-G), [n-G, n-s), [n-s, n) in rolled coordinates.
        if (i < n - G) return 0;
        if (i < n - s) return 1;
        return 2;
    };
    const std::size_t N = G * G, nwx = W / G, nwy = H / G;
    Tensor<double> m(Shape{nwx * nwy, N, N});
    for (std::size_t wy = 0; wy < nwy; ++wy)
        for (std::size_t wx = 0; wx < nwx; ++wx)
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < N; ++j) {
                    const std::size_t yi = wy * G + i / G, xi = wx * G + i % G;
                    const std::size_t yj = wy * G + j / G, xj = wx * G + j % G;
                    const bool same = band(yi, H) == band(yj, H) && band(xi, W) == band(xj, W);
                    m[((wy * nwx + wx) * N + i) * N + j] = same ? 0.0 : kMaskValue;
                }
    return m;
}

inline void add_windowing(std::vector<Check>& out) {
    out.push_back({"windowing", "partition_roundtrip", 4, [](const Context& ctx) {
                       std::size_t cases = 0;
                       for (std::size_t G : {1, 2, 4, 8, 16}) {
                           const std::vector<std::size_t> sizes = {G, 2 * G, 3 * G, 2 * G + 1};
                           for (auto H : sizes)
                               for (auto W : sizes) {
                                   const auto x = detail::rnd<double>({1, 2, H, W}, ctx.seed + H * 131 + W);
                                   ad::NoGradGuard ng;
                                   const auto grid = window_partition(ad::Var<double>::constant(x), G);
                                   if (!(window_reverse(grid).value() == x)) {
                                       return Verdict{false, "roundtrip differs at G=" + std::to_string(G) + " H=" +
                                                                 std::to_string(H) + " W=" + std::to_string(W)};
                                   }
                                   ++cases;
                               }
                       }
                       return Verdict{true, std::to_string(cases) + " (G, H, W) cases bit-exact"};
                   }});
    out.push_back({"windowing", "mask_modular", 4, [](const Context&) {
                       const std::size_t G = 16, H = 64, W = 48;
                       for (std::size_t s : {0, 8, 16, 24}) {
                           const auto m = build_attn_mask<double>(H, W, G, s);
                           if (!(m == build_attn_mask<double>(H, W, G, s % G))) {
                               return Verdict{false, "mask(" + std::to_string(s) + ") != mask(s mod G)"};
                           }
                           if (!(m == mask_oracle(H, W, G, s % G))) {
                               return Verdict{false, "mask(" + std::to_string(s) + ") disagrees with region oracle"};
                           }
                       }
                       for (std::size_t g : {2, 4, 8})
                           for (std::size_t s = 0; s < 3 * g; ++s) {
                               if (!(build_attn_mask<double>(2 * g, 3 * g, g, s) == mask_oracle(2 * g, 3 * g, g, s % g))) {
                                   return Verdict{false, "G=" + std::to_string(g) + " s=" + std::to_string(s) +
                                                             " disagrees with region oracle"};
                               }
                           }
                       return Verdict{true, "shifts {0,8,16,24} at G=16 plus s < 3G for G in {2,4,8}"};
                   }});
    out.push_back({"windowing", "shift_bijection", 0, [](const Context& ctx) {
                       const std::size_t H = 6, W = 4, s = 4;
                       const auto x = detail::rnd<double>({1, 2, H, W}, ctx.seed + 5);
                       ad::NoGradGuard ng;
                       auto v = ad::Var<double>::constant(x);
                       if (!(cyclic_unshift(cyclic_shift(v, s), s).value() == x)) {
                           return Verdict{false, "unshift(shift(x)) != x"};
                       }
                       const std::size_t period = std::lcm(H / std::gcd(H, s), W / std::gcd(W, s));
                       for (std::size_t i = 0; i < period; ++i) v = cyclic_shift(v, s);
                       return Verdict{v.value() == x, "period " + std::to_string(period) + " returns the input"};
                   }});
    out.push_back({"windowing", "relative_index", 0, [](const Context&) {
                       for (std::size_t G : {1, 2, 3, 4, 8}) {
                           if (relative_position_index(G) != cross_position_index(G, G)) {
                               return Verdict{false, "cross index with G0=G differs at G=" + std::to_string(G)};
                           }
                           const auto idx = relative_position_index(G);
                           const std::size_t N = G * G;
                           for (std::size_t i = 0; i < N; ++i)
                               for (std::size_t j = 0; j < N; ++j) {
                                   const long long dy = static_cast<long long>(i / G) - static_cast<long long>(j / G);
                                   const long long dx = static_cast<long long>(i % G) - static_cast<long long>(j % G);
                                   const auto want = static_cast<std::uint32_t>((dy + static_cast<long long>(G) - 1) *
                                                                                    static_cast<long long>(2 * G - 1) +
                                                                                dx + static_cast<long long>(G) - 1);
                                   if (idx[i * N + j] != want) return Verdict{false, "index mismatch"};
                               }
                       }
                       return Verdict{true, "brute-force offsets agree"};
                   }});
}

// ---------------------------------------------------------------------------
// attention-core

inline void add_attention(std::vector<Check>& out) {
    out.push_back({"attention-core", "grad:wmsa", 1, [](const Context& ctx) {
                       return detail::grad_verdict(
                           [](auto tag) {
                               using T = typename decltype(tag)::type;
                               return detail::param_probe<T>(11, {1, 4, 4, 4}, [](ad::ParamStore<T>& s, Rng& rng) {
                                   auto p = WmsaParams<T>::create(s, "attn", 4, 2, 2, rng);
                                   return [p](const ad::Var<T>& x) { return shifted_window_attention(x, p, 0); };
                               });
                           },
                           ctx, 1e-5, 1e-3);
                   }});
    out.push_back({"attention-core", "grad:swmsa", 1, [](const Context& ctx) {
                       return detail::grad_verdict(
                           [](auto tag) {
                               using T = typename decltype(tag)::type;
                               return detail::param_probe<T>(12, {1, 4, 4, 4}, [](ad::ParamStore<T>& s, Rng& rng) {
                                   auto p = WmsaParams<T>::create(s, "attn", 4, 2, 2, rng);
                                   return [p](const ad::Var<T>& x) { return shifted_window_attention(x, p, 1); };
                               });
                           },
                           ctx, 1e-5, 1e-3);
                   }});
    out.push_back({"attention-core", "grad:oca", 1, [](const Context& ctx) {
                       return detail::grad_verdict(
                           [](auto tag) {
                               using T = typename decltype(tag)::type;
                               return detail::param_probe<T>(13, {1, 4, 4, 4}, [](ad::ParamStore<T>& s, Rng& rng) {
                                   auto p = OcaParams<T>::create(s, "attn", 4, 2, 2, 1.0, rng);
                                   return [p](const ad::Var<T>& x) { return oca_forward(x, p); };
                               });
                           },
                           ctx, 1e-5, 1e-3);
                   }});
    out.push_back({"attention-core", "weights_normalized", 0, [](const Context& ctx) {
                       ad::ParamStore<double> s;
                       Rng rng(ctx.seed + 3);
                       auto w = WmsaParams<double>::create(s, "w", 8, 2, 4, rng);
                       auto o = OcaParams<double>::create(s, "o", 8, 2, 4, 0.5, rng);
                       ad::NoGradGuard ng;
                       auto x = ad::Var<double>::constant(detail::rnd<double>({1, 8, 8, 8}, ctx.seed + 4, -3, 3));
                       auto shifted = cyclic_shift(x, 2);
                       auto wr = wmsa_attention(ad::extract_windows(shifted, 4, 4, 0), w, build_attn_mask<double>(8, 8, 4, 2));
                       auto orr = oca_attention(x, o);
                       double worst = 0;
                       for (const auto* t : {&wr.weights.value(), &orr.weights.value()}) {
                           const std::size_t M = t->dim(3), rows = t->numel() / M;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double sum = 0;
                               for (std::size_t c = 0; c < M; ++c) sum += (*t)[r * M + c];
                               worst = std::max(worst, std::abs(sum - 1.0));
                           }
                       }
                       return Verdict{worst <= 1e-6, "max |row sum - 1| = " + detail::num(worst)};
                   }});
}

// ---------------------------------------------------------------------------
// saat-blocks

/// Copies W-MSA weights into an OCA module with mu = 0: q from the first C
/// rows of qkv, k and v from the remaining 2C; projection and bias table
/// unchanged.
template <typename T>
void map_wmsa_to_oca(const WmsaParams<T>& w, OcaParams<T>& o) {
    const std::size_t C = w.proj_w.dim(0);
    const auto& qkv = w.qkv_w.value();
    const auto& qkvb = w.qkv_b.value();
    auto& qw = o.q_w.mutable_value();
    auto& kvw = o.kv_w.mutable_value();
    for (std::size_t i = 0; i < C * C; ++i) qw[i] = qkv[i];
    for (std::size_t i = 0; i < 2 * C * C; ++i) kvw[i] = qkv[C * C + i];
    auto& qb = o.q_b.mutable_value();
    auto& kvb = o.kv_b.mutable_value();
    for (std::size_t i = 0; i < C; ++i) qb[i] = qkvb[i];
    for (std::size_t i = 0; i < 2 * C; ++i) kvb[i] = qkvb[C + i];
    o.proj_w.mutable_value() = w.proj_w.value();
    o.proj_b.mutable_value() = w.proj_b.value();
    o.rel_bias.mutable_value() = w.rel_bias.value();
}

template <typename T>
void randomize(ad::ParamStore<T>& store, std::uint64_t seed, double stddev = 0.5) {
    Rng rng(seed);
    for (auto& e : store.entries()) {
        e.var.mutable_value() = random_normal<double>(e.var.shape(), rng, stddev).template cast<T>();
    }
}

template <typename T>
Verdict degeneration_branch(const Context& ctx, GroupKind kind) {
    auto cfg = detail::probe_config();
    (kind == GroupKind::Spatial ? cfg.alpha : cfg.beta) = 0.0;
    ad::ParamStore<T> store;
    Rng rng(ctx.seed + 21);
    auto blk = BlockParams<T>::create(store, "blk", cfg, kind, rng);
    randomize(store, ctx.seed + 22);
    auto plain = blk;
    plain.branch_enabled = false;
    ad::NoGradGuard ng;
    auto x = ad::Var<T>::constant(detail::rnd<T>({1, 8, 8, 8}, ctx.seed + 23));
    bool ok = true;
    for (std::size_t shift : {0, 2}) {
        ok = ok && block_forward(x, blk, shift).value() == block_forward(x, plain, shift).value();
    }
    return {ok, ok ? "bit-exact with the plain windowed block at shifts 0 and 2" : "outputs differ"};
}

template <typename T>
Verdict degeneration_oca_mu0(const Context& ctx) {
    ad::ParamStore<T> store;
    Rng rng(ctx.seed + 31);
    auto w = WmsaParams<T>::create(store, "w", 8, 2, 4, rng);
    auto o = OcaParams<T>::create(store, "o", 8, 2, 4, 0.0, rng);
    randomize(store, ctx.seed + 32);
    map_wmsa_to_oca(w, o);
    ad::NoGradGuard ng;
    auto x = ad::Var<T>::constant(detail::rnd<T>({2, 8, 8, 12}, ctx.seed + 33));
    const double d = static_cast<double>(max_abs_diff(oca_forward(x, o).value(), shifted_window_attention(x, w, 0).value()));
    return {d <= 1e-6, "max |OCA(mu=0) - W-MSA| = " + detail::num(d)};
}

template <typename T>
Verdict degeneration_convffn(const Context& ctx) {
    ad::ParamStore<T> store;
    Rng rng(ctx.seed + 41);
    auto conv = MlpParams<T>::create(store, "conv", 8, 16, true, rng);
    randomize(store, ctx.seed + 42);
    conv.dw_w.mutable_value().fill(T(0));
    conv.dw_b.mutable_value().fill(T(0));
    auto plain = conv;
    plain.conv_ffn = false;
    ad::NoGradGuard ng;
    auto x = ad::Var<T>::constant(detail::rnd<T>({2, 8, 5, 6}, ctx.seed + 43));
    const bool ok = mlp_forward(x, conv).value() == mlp_forward(x, plain).value();
    return {ok, ok ? "bit-exact with the plain MLP" : "outputs differ"};
}

template <typename T>
Verdict degeneration_smsa_quarter(const Context& ctx) {
    ad::ParamStore<T> store;
    Rng rng(ctx.seed + 51);
    auto p = SmsabParams<T>::create(store, "smsa", 8, {3, 5, 7, 9}, rng);
    for (auto& w : p.dw) w.mutable_value().fill(T(0));
    ad::NoGradGuard ng;
    auto x = ad::Var<T>::constant(detail::rnd<T>({2, 8, 5, 6}, ctx.seed + 52));
    const double d = static_cast<double>(max_abs_diff(smsa_forward(x, p).value(), ad::scale(x, T(0.25)).value()));
    return {d <= 1e-6, "max |SMSA(x) - x/4| = " + detail::num(d)};
}

template <typename T>
Verdict degeneration_eca_half(const Context& ctx) {
    ad::ParamStore<T> store;
    Rng rng(ctx.seed + 61);
    auto p = EcabParams<T>::create(store, "ecab", 16, 4, false, rng);
    randomize(store, ctx.seed + 62);
    p.gate_w.mutable_value().fill(T(0));
    ad::NoGradGuard ng;
    auto x = ad::Var<T>::constant(detail::rnd<T>({2, 16, 5, 4}, ctx.seed + 63));
    const double d = static_cast<double>(
        max_abs_diff(ecab_forward(x, p).value(), ad::scale(ecab_squeeze(x, p), T(0.5)).value()));
    return {d <= 1e-6, "max |ECAB(x) - F/2| = " + detail::num(d)};
}

inline void add_blocks(std::vector<Check>& out) {
    auto block_probe = [&out](const std::string& name, auto make) {
        out.push_back({"saat-blocks", "grad:" + name, 1,
                       [make](const Context& ctx) { return detail::grad_verdict(make, ctx, 1e-5, 1e-3); }});
    };
    block_probe("smsab", [](auto tag) {
        using T = typename decltype(tag)::type;
        return detail::param_probe<T>(71, {1, 8, 5, 6}, [](ad::ParamStore<T>& s, Rng& rng) {
            auto p = SmsabParams<T>::create(s, "smsa", 8, {3, 5, 7, 9}, rng);
            return [p](const ad::Var<T>& x) { return smsa_forward(x, p); };
        });
    });
    block_probe("ecab", [](auto tag) {
        using T = typename decltype(tag)::type;
        return detail::param_probe<T>(72, {1, 8, 4, 5}, [](ad::ParamStore<T>& s, Rng& rng) {
            auto p = EcabParams<T>::create(s, "ecab", 8, 4, false, rng);
            return [p](const ad::Var<T>& x) { return ecab_forward(x, p); };
        });
    });
    block_probe("mlp", [](auto tag) {
        using T = typename decltype(tag)::type;
        return detail::param_probe<T>(73, {1, 8, 4, 4}, [](ad::ParamStore<T>& s, Rng& rng) {
            auto p = MlpParams<T>::create(s, "mlp", 8, 16, false, rng);
            return [p](const ad::Var<T>& x) { return mlp_forward(x, p); };
        });
    });
    block_probe("convffn", [](auto tag) {
        using T = typename decltype(tag)::type;
        return detail::param_probe<T>(74, {1, 8, 4, 4}, [](ad::ParamStore<T>& s, Rng& rng) {
            auto p = MlpParams<T>::create(s, "mlp", 8, 16, true, rng);
            return [p](const ad::Var<T>& x) { return mlp_forward(x, p); };
        });
    });
    block_probe("swsab", [](auto tag) {
        using T = typename decltype(tag)::type;
        return detail::param_probe<T>(75, {1, 8, 8, 8}, [](ad::ParamStore<T>& s, Rng& rng) {
            auto p = BlockParams<T>::create(s, "blk", detail::probe_config(), GroupKind::Spatial, rng);
            return [p](const ad::Var<T>& x) { return swsab_forward(x, p, 2); };
        });
    });
    block_probe("cwsab", [](auto tag) {
        using T = typename decltype(tag)::type;
        return detail::param_probe<T>(76, {1, 8, 8, 8}, [](ad::ParamStore<T>& s, Rng& rng) {
            auto p = BlockParams<T>::create(s, "blk", detail::probe_config(), GroupKind::Channel, rng);
            return [p](const ad::Var<T>& x) { return cwsab_forward(x, p, 2); };
        });
    });
    block_probe("ocab", [](auto tag) {
        using T = typename decltype(tag)::type;
        return detail::param_probe<T>(77, {1, 8, 8, 8}, [](ad::ParamStore<T>& s, Rng& rng) {
            auto p = OcabParams<T>::create(s, "ocab", detail::probe_config(), rng);
            return [p](const ad::Var<T>& x) { return ocab_forward(x, p); };
        });
    });

    out.push_back({"saat-blocks", "alpha_zero", 2, [](const Context& c) {
                       return c.f64 ? degeneration_branch<double>(c, GroupKind::Spatial)
                                    : degeneration_branch<float>(c, GroupKind::Spatial);
                   }});
    out.push_back({"saat-blocks", "beta_zero", 2, [](const Context& c) {
                       return c.f64 ? degeneration_branch<double>(c, GroupKind::Channel)
                                    : degeneration_branch<float>(c, GroupKind::Channel);
                   }});
    out.push_back({"saat-blocks", "oca_mu_zero", 2, [](const Context& c) {
                       return c.f64 ? degeneration_oca_mu0<double>(c) : degeneration_oca_mu0<float>(c);
                   }});
    out.push_back({"saat-blocks", "convffn_zero_dw", 2, [](const Context& c) {
                       return c.f64 ? degeneration_convffn<double>(c) : degeneration_convffn<float>(c);
                   }});
    out.push_back({"saat-blocks", "smsa_zero_kernels", 0, [](const Context& c) {
                       return c.f64 ? degeneration_smsa_quarter<double>(c) : degeneration_smsa_quarter<float>(c);
                   }});
    out.push_back({"saat-blocks", "eca_zero_gate", 0, [](const Context& c) {
                       return c.f64 ? degeneration_eca_half<double>(c) : degeneration_eca_half<float>(c);
                   }});
    out.push_back({"saat-blocks", "eca_kernel_table", 3, [](const Context&) {
                       const std::vector<std::pair<std::size_t, std::size_t>> table = {
                           {2, 1}, {16, 3}, {64, 3}, {180, 5}, {256, 5}};
                       for (auto [c, k] : table) {
                           if (eca_kernel_size(c) != k) {
                               return Verdict{false, "C=" + std::to_string(c) + " gave k=" +
                                                         std::to_string(eca_kernel_size(c)) + ", expected " +
                                                         std::to_string(k)};
                           }
                       }
                       std::size_t prev = 0;
                       for (std::size_t c = 1; c <= 4096; ++c) {
                           const auto k = eca_kernel_size(c);
                           if (k % 2 == 0 || k < prev) {
                               return Verdict{false, "not odd/monotone at C=" + std::to_string(c)};
                           }
                           prev = k;
                       }
                       return Verdict{true, "k = 1,3,3,5,5 for C = 2,16,64,180,256; odd and monotone on [1,4096]"};
                   }});
}

// ---------------------------------------------------------------------------
// saat-model

template <typename T>
Verdict shape_contract(const Context& ctx) {
    std::size_t cases = 0;
    for (std::size_t s : {2, 3, 4}) {
        SaatModel<T> m(ModelConfig::toy(s), ctx.seed);
        for (std::size_t H : {17, 24, 48})
            for (std::size_t W : {17, 24, 48}) {
                const auto y = m.infer(detail::rnd<T>({1, 3, H, W}, ctx.seed + H * 7 + W, 0, 1));
                if (y.shape() != Shape{1, 3, s * H, s * W}) {
                    return {false, "x" + std::to_string(s) + " " + std::to_string(H) + "x" + std::to_string(W) +
                                       " -> " + shape_str(y.shape())};
                }
                ++cases;
            }
    }
    return {true, std::to_string(cases) + " (scale, H, W) cases"};
}

template <typename T>
Verdict global_residual(const Context& ctx) {
    SaatModel<T> m(ModelConfig::toy(2), ctx.seed);
    randomize(m.params(), ctx.seed + 81, 0.05);
    for (auto& e : m.params().entries()) {
        if (e.name.rfind("groups.", 0) == 0) e.var.mutable_value().fill(T(0));
    }
    ad::NoGradGuard ng;
    const auto lr = detail::rnd<T>({1, 3, 16, 16}, ctx.seed + 82, 0, 1);
    const auto y = m.infer(lr);
    auto x = ad::add_scalar(ad::Var<T>::constant(lr), static_cast<T>(-m.config().img_mean));
    auto f0 = m.shallow(x);
    auto& P = m.params();
    auto fdp = ad::add(ad::conv2d(f0, P.get("conv_after_body.weight"), P.get("conv_after_body.bias"), 1, 1), f0);
    auto ref = ad::add_scalar(m.reconstruct(fdp), static_cast<T>(m.config().img_mean));
    const double d = static_cast<double>(max_abs_diff(y, ref.value()));
    return {d == 0.0, "max |forward - reconstruct(conv(F0) + F0)| = " + detail::num(d)};
}

inline void add_model(std::vector<Check>& out) {
    out.push_back({"saat-model", "grad:model", 1, [](const Context& ctx) {
                       return detail::grad_verdict(
                           [&ctx](auto tag) {
                               using T = typename decltype(tag)::type;
                               Probe<T> p;
                               auto model = std::make_shared<SaatModel<T>>(ModelConfig::toy(2), ctx.seed + 91);
                               for (auto& e : model->params().entries()) {
                                   p.leaves.push_back(e.var);
                                   p.names.push_back(e.name);
                               }
                               auto x = detail::input(p, "input", detail::rnd<T>({1, 3, 8, 8}, ctx.seed + 92, 0, 1));
                               const auto* mp = model.get();
                               p.fn = [mp, x] { return weighted_sum(mp->forward(x), 93); };
                               p.keep = model;
                               return p;
                           },
                           ctx, 1e-3, 1e-3, 40);
                   }});
    out.push_back({"saat-model", "shape_contract", 5,
                   [](const Context& c) { return c.f64 ? shape_contract<double>(c) : shape_contract<float>(c); }});
    out.push_back({"saat-model", "global_residual", 0,
                   [](const Context& c) { return c.f64 ? global_residual<double>(c) : global_residual<float>(c); }});
    out.push_back({"saat-model", "checkpoint_roundtrip", 9, [](const Context& ctx) {
                       SaatModel<float> m(ModelConfig::toy(2), ctx.seed + 101);
                       const auto x = detail::rnd<float>({1, 3, 12, 10}, ctx.seed + 102, 0, 1);
                       const auto bytes = serialize_checkpoint(m);
                       namespace fs = std::filesystem;
                       const auto path = fs::temp_directory_path() /
                                         ("saat-verify-" + std::to_string(std::random_device{}()) + ".ckpt");
                       io::write_file(path.string(), bytes);
                       auto loaded = load_checkpoint<float>(path.string());
                       fs::remove(path);
                       if (!(loaded.infer(x) == m.infer(x))) return Verdict{false, "forward after load differs"};
                       if (serialize_checkpoint(loaded) != bytes) return Verdict{false, "re-saved bytes differ"};
                       try {
                           parse_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 3));
                           return Verdict{false, "truncated checkpoint accepted"};
                       } catch (const CorruptCheckpoint&) {
                       }
                       auto other = ModelConfig::toy(2);
                       other.channels = 16;
                       SaatModel<float> wrong(other);
                       try {
                           load_parameters(wrong, parse_checkpoint(bytes));
                           return Verdict{false, "checkpoint loaded into a model of different width"};
                       } catch (const ShapeMismatch& e) {
                           if (std::string(e.what()).find("conv_first.weight") == std::string::npos) {
                               return Verdict{false, std::string("mismatch report misses first parameter: ") + e.what()};
                           }
                       }
                       return Verdict{true, "forward bit-identical, re-save byte-identical, corruption detected"};
                   }});
}

// ---------------------------------------------------------------------------
// train-optim

inline void add_train(std::vector<Check>& out) {
    out.push_back({"train-optim", "lr_schedule", 8, [](const Context&) {
                       const auto& ms = kReferenceMilestones;
                       const std::vector<std::pair<std::size_t, double>> want = {
                           {0, 2e-4}, {249999, 2e-4}, {250000, 1e-4}, {400000, 5e-5},
                           {450000, 2.5e-5}, {475000, 1.25e-5}, {480000, 1.25e-5}};
                       for (auto [step, lr] : want) {
                           if (lr_at(step, 2e-4, ms) != lr) {
                               return Verdict{false, "lr_at(" + std::to_string(step) + ") = " +
                                                         detail::num(lr_at(step, 2e-4, ms))};
                           }
                       }
                       std::size_t drops = 0;
                       double prev = lr_at(0, 2e-4, ms);
                       for (std::size_t s = 1; s <= 500000; s += 1) {
                           const double v = lr_at(s, 2e-4, ms);
                           if (v > prev) return Verdict{false, "lr increases at step " + std::to_string(s)};
                           drops += v < prev ? 1 : 0;
                           prev = v;
                       }
                       if (drops != ms.size()) return Verdict{false, std::to_string(drops) + " drops"};
                       return Verdict{true, "2e-4 -> 1e-4 @250K -> 1.25e-5 after 475K, 4 drops"};
                   }});
    out.push_back({"train-optim", "adam_closed_form", 0, [](const Context&) {
                       ad::ParamStore<double> ps;
                       auto w = ps.add("w", Tensor<double>({4}, std::vector<double>{0.5, -1.0, 2.0, 0.0}));
                       AdamState<double> st;
                       st.init(ps);
                       adam_step(ps, st, 1e-3);
                       if (!(w.value() == Tensor<double>({4}, std::vector<double>{0.5, -1.0, 2.0, 0.0}))) {
                           return Verdict{false, "zero gradient moved the parameters"};
                       }
                       const std::vector<double> g = {0.3, -2.0, 1e-3, 5.0};
                       w.grad_slot() = Tensor<double>({4}, g);
                       const auto before = w.value();
                       adam_step(ps, st, 1e-3);
                       // Second update (first with non-zero gradient): bias-corrected moments.
                       const double c1 = 1 - 0.9 * 0.9, c2 = 1 - 0.99 * 0.99;
                       for (std::size_t i = 0; i < 4; ++i) {
                           const double m = 0.1 * g[i], v = 0.01 * g[i] * g[i];
                           const double want = before[i] - 1e-3 * (m / c1) / (std::sqrt(v / c2) + 1e-8);
                           if (std::abs(w.value()[i] - want) > 1e-15) return Verdict{false, "update mismatch"};
                       }
                       return Verdict{true, "zero-gradient no-op and bias-corrected update"};
                   }});
    out.push_back({"train-optim", "train_determinism", 10, [](const Context& ctx) {
                       auto cfg = ModelConfig::toy(2);
                       TrainConfig tc;
                       tc.steps = 4;
                       tc.patch = 32;
                       tc.batch = 2;
                       tc.seed = ctx.seed + 5;
                       const std::vector<ImageBuffer> imgs = {test_pattern(48, 40, 1), test_pattern(40, 56, 2)};
                       Trainer<float> a(cfg, tc, imgs), b(cfg, tc, imgs);
                       const auto ta = a.run(), tb = b.run();
                       auto same = [](const std::vector<TraceEntry>& x, const std::vector<TraceEntry>& y) {
                           if (x.size() != y.size()) return false;
                           for (std::size_t i = 0; i < x.size(); ++i) {
                               if (x[i].l1 != y[i].l1 || x[i].lr != y[i].lr || x[i].step != y[i].step) return false;
                           }
                           return true;
                       };
                       if (!same(ta, tb)) return Verdict{false, "two runs with one seed produced different traces"};
                       if (serialize_checkpoint(a.model()) != serialize_checkpoint(b.model())) {
                           return Verdict{false, "two runs with one seed produced different weights"};
                       }
                       Trainer<float> c(cfg, tc, imgs);
                       std::vector<TraceEntry> tc1 = {c.train_step(), c.train_step()};
                       const auto state = c.serialize_state();
                       Trainer<float> d(cfg, tc, imgs);
                       d.load_state(state);
                       auto tc2 = d.run();
                       tc1.insert(tc1.end(), tc2.begin(), tc2.end());
                       if (!same(ta, tc1)) return Verdict{false, "resumed run diverged from the uninterrupted trace"};
                       if (serialize_checkpoint(d.model()) != serialize_checkpoint(a.model())) {
                           return Verdict{false, "resumed run ended with different weights"};
                       }
                       const auto x = detail::rnd<float>({1, 3, 20, 18}, ctx.seed + 6, 0, 1);
                       if (!(a.model().infer(x) == b.model().infer(x))) return Verdict{false, "inference differs"};
                       return Verdict{true, "identical traces, weights and inference; resume matches"};
                   }});
    out.push_back({"train-optim", "sampler_alignment", 0, [](const Context& ctx) {
                       const auto hr = test_pattern(40, 36, 3);
                       PatchSampler s({hr}, 2, 16, false, ctx.seed, nullptr);
                       const auto lr_full = bicubic_resize(hr, 1, 2);
                       for (int i = 0; i < 10; ++i) {
                           auto [lr, hrp] = s.sample_pair();
                           if (hrp.width != lr.width * 2) return Verdict{false, "HR extent != LR extent x scale"};
                           // Locate the HR patch to recover the crop origin, then check the LR patch.
                           bool found = false;
                           for (std::size_t y = 0; y + 16 <= hr.height && !found; y += 2)
                               for (std::size_t x = 0; x + 16 <= hr.width && !found; x += 2) {
                                   if (crop(hr, x, y, 16, 16) == hrp && crop(lr_full, x / 2, y / 2, 8, 8) == lr) {
                                       found = true;
                                   }
                               }
                           if (!found) return Verdict{false, "LR patch not aligned with its HR patch"};
                       }
                       return Verdict{true, "10 pairs aligned"};
                   }});
}

// ---------------------------------------------------------------------------
// image-toolkit

inline void add_image(std::vector<Check>& out) {
    out.push_back({"image-toolkit", "metric_oracles", 7, [](const Context&) {
                       ImageBuffer a(32, 24, 3), b(32, 24, 3);
                       Rng rng(4);
                       for (std::size_t i = 0; i < a.samples.size(); ++i) {
                           a.samples[i] = static_cast<std::uint8_t>(rng.below(255));
                           b.samples[i] = static_cast<std::uint8_t>(a.samples[i] + 1);
                       }
                       const double p = psnr(a, b, 0, false);
                       if (std::abs(p - 48.1308) > 1e-3) return Verdict{false, "PSNR " + detail::num(p)};
                       const double s = ssim(a, a, 0, true);
                       if (std::abs(s - 1.0) > 1e-9) return Verdict{false, "SSIM(a, a) = " + detail::num(s)};
                       if (!std::isinf(psnr(a, a, 2, true))) return Verdict{false, "PSNR(a, a) not +inf"};
                       double worst = 0;
                       for (auto [in, outn, sc] : std::vector<std::tuple<std::size_t, std::size_t, double>>{
                                {64, 32, 0.5}, {63, 21, 1.0 / 3}, {64, 16, 0.25}, {17, 34, 2.0}, {10, 40, 4.0}, {9, 27, 3.0}}) {
                           for (const auto& t : bicubic_taps(in, outn, sc)) {
                               double sum = 0;
                               for (auto w : t.weight) sum += w;
                               worst = std::max(worst, std::abs(sum - 1.0));
                           }
                       }
                       if (worst > 1e-9) return Verdict{false, "bicubic weights sum off by " + detail::num(worst)};
                       return Verdict{true, "PSNR " + detail::num(p) + " dB, SSIM(a,a)=1, weight sums within " +
                                                detail::num(worst)};
                   }});
    out.push_back({"image-toolkit", "ppm_roundtrip", 0, [](const Context&) {
                       const auto img = test_pattern(13, 7, 5);
                       const auto bytes = "P6\n13 7\n255\n" +
                                          std::string(reinterpret_cast<const char*>(img.samples.data()), img.samples.size());
                       return Verdict{decode_ppm(bytes, "<memory>") == img, "P6 decode matches"};
                   }});
}

inline std::vector<Check> all_checks() {
    std::vector<Check> out;
    add_tensor_engine(out);
    add_windowing(out);
    add_attention(out);
    add_blocks(out);
    add_model(out);
    add_train(out);
    add_image(out);
    return out;
}

/// Runs the checks whose module matches `filter` (all when empty), printing
/// one line per check. Stops at the first failure when `stop_on_failure`.
/// Returns the number of failures.
inline std::size_t run_checks(const Context& ctx, const std::string& filter, std::ostream& os,
                              bool stop_on_failure = true) {
    std::size_t failures = 0, ran = 0;
    std::string current;
    for (const auto& c : all_checks()) {
        if (!filter.empty() && c.module != filter) continue;
        if (c.module != current) {
            current = c.module;
            os << "suite " << current << "\n";
        }
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run(ctx);
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ++ran;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2fs", secs);
        os << "  [" << (v.ok ? "PASS" : "FAIL") << "] " << c.module << "/" << c.name << " (" << buf << ") "
           << v.detail << "\n";
        if (!v.ok) {
            ++failures;
            if (stop_on_failure) break;
        }
    }
    os << (failures ? "FAILED" : "OK") << ": " << ran << " checks run, " << failures << " failed\n";
    return failures;
}

}  // namespace saat::verify
