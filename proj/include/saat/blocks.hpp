#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "attention.hpp"
#include "config.hpp"

namespace saat {

/// Adaptive 1-D kernel size for channel attention: t = (log2 C + b) / gamma,
/// floored and bumped to the next odd integer when even.
inline std::size_t eca_kernel_size(std::size_t channels, std::size_t gamma = 2, std::size_t b = 1) {
    if (channels == 0) throw InvalidConfig("eca_kernel_size: channel count must be >= 1");
    const double t = (std::log2(static_cast<double>(channels)) + static_cast<double>(b)) / static_cast<double>(gamma);
    auto k = static_cast<std::size_t>(std::floor(t));
    if (k % 2 == 0) ++k;
    return std::max<std::size_t>(k, 1);
}

template <typename T>
struct NormParams {
    ad::Var<T> gamma, beta;

    static NormParams create(ad::ParamStore<T>& store, const std::string& prefix, std::size_t C) {
        return {store.add(prefix + ".weight", Tensor<T>::full({C}, T(1))),
                store.add(prefix + ".bias", Tensor<T>::zeros({C}))};
    }
};

template <typename T>
ad::Var<T> layer_norm(const ad::Var<T>& x, const NormParams<T>& p) {
    return ad::layer_norm(x, p.gamma, p.beta, T(1e-5));
}

// ---------------------------------------------------------------------------
// Shareable multi-scale spatial attention

template <typename T>
struct SmsabParams {
    std::size_t groups = 4;
    std::vector<std::size_t> kernels;
    std::vector<ad::Var<T>> dw;  // per group: (C/K) x 1 x k_i, shared by both axes
    NormParams<T> gn_h, gn_w;

    static SmsabParams create(ad::ParamStore<T>& store, const std::string& prefix, std::size_t C,
                              const std::vector<std::size_t>& kernels, Rng& rng) {
        const std::size_t K = kernels.size();
        if (K == 0 || C % K != 0) {
            throw InvalidConfig(prefix + ": channels " + std::to_string(C) + " not divisible by " +
                                std::to_string(K) + " groups");
        }
        SmsabParams p;
        p.groups = K;
        p.kernels = kernels;
        for (std::size_t i = 0; i < K; ++i) {
            if (kernels[i] % 2 == 0) throw InvalidConfig(prefix + ": kernel sizes must be odd");
            p.dw.push_back(store.add(prefix + ".dwconv" + std::to_string(i) + ".weight",
                                     trunc_normal_init<T>({C / K, 1, kernels[i]}, rng)));
        }
        p.gn_h = NormParams<T>::create(store, prefix + ".gn_h", C);
        p.gn_w = NormParams<T>::create(store, prefix + ".gn_w", C);
        return p;
    }
};

/// One pooled axis: B x C x L -> sigmoid(GN(concat_i dwconv_i(split_i))).
template <typename T>
ad::Var<T> smsa_axis_attention(const ad::Var<T>& seq, const SmsabParams<T>& p, const NormParams<T>& gn) {
    const std::size_t cg = seq.dim(1) / p.groups;
    std::vector<ad::Var<T>> parts;
    parts.reserve(p.groups);
    for (std::size_t i = 0; i < p.groups; ++i) {
        parts.push_back(ad::dwconv1d(ad::narrow(seq, 1, i * cg, cg), p.dw[i], (p.kernels[i] - 1) / 2));
    }
    return ad::sigmoid(ad::group_norm(ad::concat(parts, 1), gn.gamma, gn.beta, p.groups, T(1e-5)));
}

template <typename T>
struct SmsaMaps {
    ad::Var<T> attn_h;  // B x C x H x 1
    ad::Var<T> attn_w;  // B x C x 1 x W
};

template <typename T>
SmsaMaps<T> smsa_maps(const ad::Var<T>& x, const SmsabParams<T>& p) {
    if (x.rank() != 4 || x.dim(1) % p.groups != 0) {
        throw InvalidConfig("smsa: input " + shape_str(x.shape()) + " channels not divisible by " +
                            std::to_string(p.groups) + " groups");
    }
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto xh = ad::mean_axis(x, 3, false);  // B x C x H
    auto xw = ad::mean_axis(x, 2, false);  // B x C x W
    return {ad::reshape(smsa_axis_attention(xh, p, p.gn_h), Shape{B, C, H, 1}),
            ad::reshape(smsa_axis_attention(xw, p, p.gn_w), Shape{B, C, 1, W})};
}

template <typename T>
ad::Var<T> smsa_forward(const ad::Var<T>& x, const SmsabParams<T>& p) {
    auto maps = smsa_maps(x, p);
    return ad::mul(ad::mul(maps.attn_h, maps.attn_w), x);
}

// ---------------------------------------------------------------------------
// Efficient channel attention

template <typename T>
struct EcabParams {
    ad::Var<T> conv1_w, conv1_b;  // C/r x C x 3 x 3
    ad::Var<T> conv2_w, conv2_b;  // C x C/r x 3 x 3
    ad::Var<T> gate_w;            // 1 x 1 x k
    std::size_t kernel = 1;
    bool additive = false;

    static EcabParams create(ad::ParamStore<T>& store, const std::string& prefix, std::size_t C,
                             std::size_t reduction, bool additive, Rng& rng) {
        const std::size_t mid = std::max<std::size_t>(1, C / reduction);
        EcabParams p;
        p.additive = additive;
        p.kernel = eca_kernel_size(C);
        p.conv1_w = store.add(prefix + ".conv1.weight", trunc_normal_init<T>({mid, C, 3, 3}, rng));
        p.conv1_b = store.add(prefix + ".conv1.bias", Tensor<T>::zeros({mid}));
        p.conv2_w = store.add(prefix + ".conv2.weight", trunc_normal_init<T>({C, mid, 3, 3}, rng));
        p.conv2_b = store.add(prefix + ".conv2.bias", Tensor<T>::zeros({C}));
        p.gate_w = store.add(prefix + ".gate.weight", trunc_normal_init<T>({1, 1, p.kernel}, rng));
        return p;
    }
};

/// Per-channel gate, B x C x 1 x 1, computed from the squeezed features.
template <typename T>
ad::Var<T> eca_gate(const ad::Var<T>& features, const EcabParams<T>& p) {
    const std::size_t B = features.dim(0), C = features.dim(1);
    auto pooled = ad::reshape(ad::global_avg_pool(features), Shape{B, 1, C});
    auto g = ad::sigmoid(ad::dwconv1d(pooled, p.gate_w, (p.kernel - 1) / 2));
    return ad::reshape(g, Shape{B, C, 1, 1});
}

template <typename T>
ad::Var<T> ecab_squeeze(const ad::Var<T>& x, const EcabParams<T>& p) {
    auto h = ad::gelu(ad::conv2d(x, p.conv1_w, p.conv1_b, 1, 1));
    return ad::conv2d(h, p.conv2_w, p.conv2_b, 1, 1);
}

template <typename T>
ad::Var<T> ecab_forward(const ad::Var<T>& x, const EcabParams<T>& p) {
    auto f = ecab_squeeze(x, p);
    auto g = eca_gate(f, p);
    return p.additive ? ad::add(f, g) : ad::mul(f, g);
}

// ---------------------------------------------------------------------------
// Feed-forward

template <typename T>
struct MlpParams {
    ad::Var<T> fc1_w, fc1_b;  // hidden x C
    ad::Var<T> dw_w, dw_b;    // hidden x 1 x 3 x 3 (ConvFFN only)
    ad::Var<T> fc2_w, fc2_b;  // C x hidden
    bool conv_ffn = false;

    static MlpParams create(ad::ParamStore<T>& store, const std::string& prefix, std::size_t C, std::size_t hidden,
                            bool conv_ffn, Rng& rng) {
        MlpParams p;
        p.conv_ffn = conv_ffn;
        p.fc1_w = store.add(prefix + ".fc1.weight", trunc_normal_init<T>({hidden, C}, rng));
        p.fc1_b = store.add(prefix + ".fc1.bias", Tensor<T>::zeros({hidden}));
        if (conv_ffn) {
            p.dw_w = store.add(prefix + ".dwconv.weight", trunc_normal_init<T>({hidden, 1, 3, 3}, rng));
            p.dw_b = store.add(prefix + ".dwconv.bias", Tensor<T>::zeros({hidden}));
        }
        p.fc2_w = store.add(prefix + ".fc2.weight", trunc_normal_init<T>({C, hidden}, rng));
        p.fc2_b = store.add(prefix + ".fc2.bias", Tensor<T>::zeros({C}));
        return p;
    }
};

/// Token MLP on the N x C x H x W grid: fc1 -> GELU [-> + dwconv3x3] -> fc2.
template <typename T>
ad::Var<T> mlp_forward(const ad::Var<T>& x, const MlpParams<T>& p) {
    auto h = ad::gelu(pointwise(x, p.fc1_w, p.fc1_b));
    if (p.conv_ffn) h = ad::add(h, ad::conv2d(h, p.dw_w, p.dw_b, 1, 1, p.dw_w.dim(0)));
    return pointwise(h, p.fc2_w, p.fc2_b);
}

// ---------------------------------------------------------------------------
// Synergistic blocks

enum class GroupKind { Spatial, Channel };

/// One SWSAB (spatial branch) or CWSAB (channel branch).
template <typename T>
struct BlockParams {
    GroupKind kind = GroupKind::Spatial;
    NormParams<T> norm1;       // feeds (S)W-MSA, and SMSA in spatial blocks
    NormParams<T> norm_eca;    // channel blocks only
    NormParams<T> norm2;       // feeds the MLP
    WmsaParams<T> attn;
    SmsabParams<T> smsa;
    EcabParams<T> ecab;
    MlpParams<T> mlp;
    double branch_weight = 0.0;  // alpha or beta
    bool branch_enabled = true;  // false gives the plain windowed block

    static BlockParams create(ad::ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                              GroupKind kind, Rng& rng) {
        const std::size_t C = cfg.channels;
        BlockParams p;
        p.kind = kind;
        p.norm1 = NormParams<T>::create(store, prefix + ".norm1", C);
        p.attn = WmsaParams<T>::create(store, prefix + ".attn", C, cfg.heads, cfg.window, rng);
        if (kind == GroupKind::Spatial) {
            p.smsa = SmsabParams<T>::create(store, prefix + ".smsa", C, cfg.smsa_kernels, rng);
            p.branch_weight = cfg.alpha;
        } else {
            p.norm_eca = NormParams<T>::create(store, prefix + ".norm_eca", C);
            p.ecab = EcabParams<T>::create(store, prefix + ".ecab", C, cfg.eca_reduction, cfg.eca_additive, rng);
            p.branch_weight = cfg.beta;
        }
        p.norm2 = NormParams<T>::create(store, prefix + ".norm2", C);
        p.mlp = MlpParams<T>::create(store, prefix + ".mlp", C, cfg.mlp_hidden(), cfg.conv_ffn, rng);
        return p;
    }
};

/// F_int = F_in + MSA(LN1 F_in) + w * Branch(LN F_in); F_out = F_int + MLP(LN2 F_int).
template <typename T>
ad::Var<T> block_forward(const ad::Var<T>& x, const BlockParams<T>& p, std::size_t shift) {
    auto y = layer_norm(x, p.norm1);
    auto f = ad::add(x, shifted_window_attention(y, p.attn, shift));
    if (p.branch_enabled) {
        const T w = static_cast<T>(p.branch_weight);
        if (p.kind == GroupKind::Spatial) {
            f = ad::add(f, ad::scale(smsa_forward(y, p.smsa), w));
        } else {
            f = ad::add(f, ad::scale(ecab_forward(layer_norm(x, p.norm_eca), p.ecab), w));
        }
    }
    return ad::add(f, mlp_forward(layer_norm(f, p.norm2), p.mlp));
}

template <typename T>
ad::Var<T> swsab_forward(const ad::Var<T>& x, const BlockParams<T>& p, std::size_t shift) {
    if (p.kind != GroupKind::Spatial) throw InvalidConfig("swsab_forward on a channel-attention block");
    return block_forward(x, p, shift);
}

template <typename T>
ad::Var<T> cwsab_forward(const ad::Var<T>& x, const BlockParams<T>& p, std::size_t shift) {
    if (p.kind != GroupKind::Channel) throw InvalidConfig("cwsab_forward on a spatial-attention block");
    return block_forward(x, p, shift);
}

template <typename T>
struct OcabParams {
    NormParams<T> norm1, norm2;
    OcaParams<T> attn;
    MlpParams<T> mlp;

    static OcabParams create(ad::ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
        OcabParams p;
        p.norm1 = NormParams<T>::create(store, prefix + ".norm1", cfg.channels);
        p.attn = OcaParams<T>::create(store, prefix + ".attn", cfg.channels, cfg.heads, cfg.window, cfg.mu, rng);
        p.norm2 = NormParams<T>::create(store, prefix + ".norm2", cfg.channels);
        p.mlp = MlpParams<T>::create(store, prefix + ".mlp", cfg.channels, cfg.mlp_hidden(), false, rng);
        return p;
    }
};

template <typename T>
ad::Var<T> ocab_forward(const ad::Var<T>& x, const OcabParams<T>& p) {
    auto f = ad::add(x, oca_forward(layer_norm(x, p.norm1), p.attn));
    return ad::add(f, mlp_forward(layer_norm(f, p.norm2), p.mlp));
}

/// SWSAG or CWSAG: blocks with per-block shifts, OCAB, 3x3 conv, residual.
template <typename T>
struct GroupParams {
    GroupKind kind = GroupKind::Spatial;
    std::vector<BlockParams<T>> blocks;
    std::vector<std::size_t> shifts;
    OcabParams<T> ocab;
    ad::Var<T> conv_w, conv_b;

    static GroupParams create(ad::ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                              GroupKind kind, Rng& rng) {
        GroupParams g;
        g.kind = kind;
        g.shifts = cfg.shifts;
        for (std::size_t i = 0; i < cfg.shifts.size(); ++i) {
            g.blocks.push_back(
                BlockParams<T>::create(store, prefix + ".blocks." + std::to_string(i), cfg, kind, rng));
        }
        g.ocab = OcabParams<T>::create(store, prefix + ".ocab", cfg, rng);
        const std::size_t C = cfg.channels;
        g.conv_w = store.add(prefix + ".conv.weight", trunc_normal_init<T>({C, C, 3, 3}, rng));
        g.conv_b = store.add(prefix + ".conv.bias", Tensor<T>::zeros({C}));
        return g;
    }
};

template <typename T>
ad::Var<T> group_forward(const ad::Var<T>& x, const GroupParams<T>& g) {
    ad::Var<T> h = x;
    for (std::size_t i = 0; i < g.blocks.size(); ++i) h = block_forward(h, g.blocks[i], g.shifts[i]);
    h = ocab_forward(h, g.ocab);
    return ad::add(ad::conv2d(h, g.conv_w, g.conv_b, 1, 1), x);
}

}  // namespace saat
