#pragma once

#include <cmath>
#include <string>

#include "ops.hpp"
#include "random.hpp"
#include "windowing.hpp"

namespace saat {

template <typename T>
Tensor<T> trunc_normal_init(const Shape& shape, Rng& rng, double stddev = 0.02) {
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(stddev));
    return t;
}

/// Per-pixel linear map of an N x C x H x W tensor; w is out x in.
template <typename T>
ad::Var<T> pointwise(const ad::Var<T>& x, const ad::Var<T>& w, const ad::Var<T>& b) {
    return ad::conv2d(x, ad::reshape(w, Shape{w.dim(0), w.dim(1), 1, 1}), b, 1, 0, 1);
}

template <typename T>
struct AttentionOutput {
    ad::Var<T> out;      // B' x Nq x C
    ad::Var<T> weights;  // B' x heads x Nq x Nk, rows sum to 1
};

/// Multi-head scaled dot-product attention over token batches.
/// q: B' x Nq x C; k, v: B' x Nk x C; bias: 1 x heads x Nq x Nk or undefined;
/// mask: nW x Nq x Nk (B' a multiple of nW) or empty.
template <typename T>
AttentionOutput<T> attend(const ad::Var<T>& q, const ad::Var<T>& k, const ad::Var<T>& v, std::size_t heads,
                          const ad::Var<T>& bias, const Tensor<T>& mask) {
    const std::size_t Bp = q.dim(0), Nq = q.dim(1), C = q.dim(2), Nk = k.dim(1);
    if (heads == 0 || C % heads != 0) {
        throw InvalidConfig("attention: " + std::to_string(C) + " channels not divisible by " +
                            std::to_string(heads) + " heads");
    }
    const std::size_t d = C / heads;
    auto split = [&](const ad::Var<T>& t, std::size_t n) {
        return ad::permute(ad::reshape(t, Shape{Bp, n, heads, d}), {0, 2, 1, 3});
    };
    auto qh = ad::scale(split(q, Nq), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    auto kh = split(k, Nk);
    auto vh = split(v, Nk);
    auto logits = ad::bmm(qh, kh, true);
    if (bias.defined()) logits = ad::add(logits, bias);
    if (!mask.empty()) {
        const std::size_t nW = mask.dim(0);
        if (Bp % nW != 0 || mask.dim(1) != Nq || mask.dim(2) != Nk) {
            throw InvalidShape("attention mask " + shape_str(mask.shape()) + " does not match " +
                               std::to_string(Bp) + " windows of " + std::to_string(Nq) + "x" + std::to_string(Nk));
        }
        auto m = ad::Var<T>::constant(mask.reshaped(Shape{1, nW, 1, Nq, Nk}));
        logits = ad::reshape(ad::add(ad::reshape(logits, Shape{Bp / nW, nW, heads, Nq, Nk}), m),
                             Shape{Bp, heads, Nq, Nk});
    }
    auto weights = ad::softmax(logits, 3);
    auto out = ad::reshape(ad::permute(ad::bmm(weights, vh), {0, 2, 1, 3}), Shape{Bp, Nq, C});
    return {out, weights};
}

/// (Shifted-)window multi-head self-attention parameters.
template <typename T>
struct WmsaParams {
    ad::Var<T> qkv_w, qkv_b;    // 3C x C, 3C
    ad::Var<T> proj_w, proj_b;  // C x C, C
    ad::Var<T> rel_bias;        // (2G-1)^2 x heads
    std::size_t heads = 1;
    std::size_t window = 1;
    std::vector<std::uint32_t> rel_index;

    static WmsaParams create(ad::ParamStore<T>& store, const std::string& prefix, std::size_t C, std::size_t heads,
                             std::size_t G, Rng& rng) {
        if (heads == 0 || C % heads != 0) {
            throw InvalidConfig(prefix + ": channels " + std::to_string(C) + " not divisible by heads " +
                                std::to_string(heads));
        }
        WmsaParams p;
        p.heads = heads;
        p.window = G;
        p.qkv_w = store.add(prefix + ".qkv.weight", trunc_normal_init<T>({3 * C, C}, rng));
        p.qkv_b = store.add(prefix + ".qkv.bias", Tensor<T>::zeros({3 * C}));
        p.proj_w = store.add(prefix + ".proj.weight", trunc_normal_init<T>({C, C}, rng));
        p.proj_b = store.add(prefix + ".proj.bias", Tensor<T>::zeros({C}));
        p.rel_bias = store.add(prefix + ".relative_position_bias",
                               Tensor<T>::zeros({(2 * G - 1) * (2 * G - 1), heads}));
        p.rel_index = relative_position_index(G);
        return p;
    }
};

/// windows: (B * nW) x G^2 x C. mask may be empty (no shift).
template <typename T>
AttentionOutput<T> wmsa_attention(const ad::Var<T>& windows, const WmsaParams<T>& p, const Tensor<T>& mask) {
    const std::size_t C = windows.dim(2), N = windows.dim(1);
    if (N != p.window * p.window) {
        throw InvalidShape("wmsa: windows " + shape_str(windows.shape()) + " do not hold " +
                           std::to_string(p.window) + "x" + std::to_string(p.window) + " tokens");
    }
    auto qkv = ad::linear(windows, p.qkv_w, p.qkv_b);
    auto q = ad::narrow(qkv, 2, 0, C);
    auto k = ad::narrow(qkv, 2, C, C);
    auto v = ad::narrow(qkv, 2, 2 * C, C);
    auto bias = ad::gather_bias(p.rel_bias, p.rel_index, N, N);
    auto res = attend(q, k, v, p.heads, bias, mask);
    res.out = ad::linear(res.out, p.proj_w, p.proj_b);
    return res;
}

template <typename T>
ad::Var<T> wmsa_forward(const ad::Var<T>& windows, const WmsaParams<T>& p, const Tensor<T>& mask) {
    return wmsa_attention(windows, p, mask).out;
}

/// Shifted-window attention over a whole N x C x H x W map (H, W multiples
/// of the window). The roll uses the shift reduced modulo the window so that
/// it agrees with the mask; a roll by a whole number of windows only
/// relabels windows.
template <typename T>
ad::Var<T> shifted_window_attention(const ad::Var<T>& x, const WmsaParams<T>& p, std::size_t shift) {
    const std::size_t G = p.window, H = x.dim(2), W = x.dim(3);
    if (H % G != 0 || W % G != 0) {
        throw InvalidShape("shifted_window_attention: " + shape_str(x.shape()) + " not a multiple of window " +
                           std::to_string(G));
    }
    const std::size_t s = shift % G;
    auto src = s ? cyclic_shift(x, s) : x;
    auto windows = ad::extract_windows(src, G, G, 0);
    Tensor<T> mask = s ? build_attn_mask<T>(H, W, G, s) : Tensor<T>();
    auto out = ad::merge_windows(wmsa_forward(windows, p, mask), x.dim(0), H, W, G);
    return s ? cyclic_unshift(out, s) : out;
}

/// Overlapping cross-attention parameters. Queries come from G x G windows,
/// keys and values from (1 + mu) G overlapping windows.
template <typename T>
struct OcaParams {
    ad::Var<T> q_w, q_b;        // C x C, C
    ad::Var<T> kv_w, kv_b;      // 2C x C, 2C
    ad::Var<T> proj_w, proj_b;  // C x C, C
    ad::Var<T> rel_bias;        // (G + G0 - 1)^2 x heads
    std::size_t heads = 1;
    std::size_t window = 1;
    std::size_t overlap_window = 1;
    std::vector<std::uint32_t> rel_index;

    /// Zero padding before the overlap windows; an odd overlap puts the
    /// extra row/column after.
    std::size_t padding() const { return (overlap_window - window) / 2; }
    std::size_t padding_after() const { return overlap_window - window - padding(); }

    static OcaParams create(ad::ParamStore<T>& store, const std::string& prefix, std::size_t C, std::size_t heads,
                            std::size_t G, double mu, Rng& rng) {
        if (heads == 0 || C % heads != 0) {
            throw InvalidConfig(prefix + ": channels " + std::to_string(C) + " not divisible by heads " +
                                std::to_string(heads));
        }
        OcaParams p;
        p.heads = heads;
        p.window = G;
        p.overlap_window = overlap_window_size(G, mu);
        const std::size_t side = G + p.overlap_window - 1;
        p.q_w = store.add(prefix + ".q.weight", trunc_normal_init<T>({C, C}, rng));
        p.q_b = store.add(prefix + ".q.bias", Tensor<T>::zeros({C}));
        p.kv_w = store.add(prefix + ".kv.weight", trunc_normal_init<T>({2 * C, C}, rng));
        p.kv_b = store.add(prefix + ".kv.bias", Tensor<T>::zeros({2 * C}));
        p.proj_w = store.add(prefix + ".proj.weight", trunc_normal_init<T>({C, C}, rng));
        p.proj_b = store.add(prefix + ".proj.bias", Tensor<T>::zeros({C}));
        p.rel_bias = store.add(prefix + ".relative_position_bias", Tensor<T>::zeros({side * side, heads}));
        p.rel_index = cross_position_index(G, p.overlap_window);
        return p;
    }

    /// G0 = (1 + mu) G; mu G must be a non-negative integer.
    static std::size_t overlap_window_size(std::size_t G, double mu) {
        const double extra = mu * static_cast<double>(G);
        const double r = std::round(extra);
        if (mu < 0 || std::abs(extra - r) > 1e-9) {
            throw InvalidConfig("overlap ratio " + std::to_string(mu) + " with window " + std::to_string(G) +
                                " gives a non-integral overlap window");
        }
        return G + static_cast<std::size_t>(r);
    }
};

template <typename T>
AttentionOutput<T> oca_attention(const ad::Var<T>& x, const OcaParams<T>& p) {
    const std::size_t G = p.window, C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % G != 0 || W % G != 0) {
        throw InvalidShape("oca: " + shape_str(x.shape()) + " not a multiple of window " + std::to_string(G));
    }
    auto q = ad::extract_windows(pointwise(x, p.q_w, p.q_b), G, G, 0);
    auto kv = ad::extract_windows(pointwise(x, p.kv_w, p.kv_b), p.overlap_window, G, p.padding(), p.padding_after());
    auto k = ad::narrow(kv, 2, 0, C);
    auto v = ad::narrow(kv, 2, C, C);
    const std::size_t Nq = G * G, Nk = p.overlap_window * p.overlap_window;
    auto bias = ad::gather_bias(p.rel_bias, p.rel_index, Nq, Nk);
    auto res = attend(q, k, v, p.heads, bias, Tensor<T>());
    res.out = pointwise(ad::merge_windows(res.out, x.dim(0), H, W, G), p.proj_w, p.proj_b);
    return res;
}

/// x: N x C x H x W with H, W multiples of G. Output has the input's shape.
template <typename T>
ad::Var<T> oca_forward(const ad::Var<T>& x, const OcaParams<T>& p) {
    return oca_attention(x, p).out;
}

}  // namespace saat
