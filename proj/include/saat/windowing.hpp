#pragma once

#include <cstdint>
#include <vector>

#include "ops.hpp"

namespace saat {

/// Windows of a (possibly padded) feature map, plus what is needed to undo
/// the partition.
template <typename T>
struct WindowGrid {
    ad::Var<T> windows;  // (N * nW) x G^2 x C
    std::size_t window = 0;
    std::size_t shift = 0;
    std::size_t batch = 0;
    std::size_t height = 0, width = 0;                // before padding
    std::size_t padded_height = 0, padded_width = 0;  // multiples of window

    std::size_t count() const { return (padded_height / window) * (padded_width / window); }
};

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

/// Splits N x C x H x W into G x G windows, reflect-padding the bottom and
/// right edges up to a multiple of G first.
template <typename T>
WindowGrid<T> window_partition(const ad::Var<T>& x, std::size_t G) {
    if (x.rank() != 4) throw InvalidShape("window_partition expects NCHW, got " + shape_str(x.shape()));
    if (G == 0) throw InvalidConfig("window size must be >= 1");
    WindowGrid<T> grid;
    grid.window = G;
    grid.batch = x.dim(0);
    grid.height = x.dim(2);
    grid.width = x.dim(3);
    grid.padded_height = round_up(grid.height, G);
    grid.padded_width = round_up(grid.width, G);
    ad::Var<T> src = x;
    if (grid.padded_height != grid.height || grid.padded_width != grid.width) {
        src = ad::pad2d(x, 0, grid.padded_height - grid.height, 0, grid.padded_width - grid.width,
                        ad::PadMode::Reflect);
    }
    grid.windows = ad::extract_windows(src, G, G, 0);
    return grid;
}

/// Reassembles the map and crops any padding added by window_partition.
template <typename T>
ad::Var<T> window_reverse(const WindowGrid<T>& grid) {
    auto merged = ad::merge_windows(grid.windows, grid.batch, grid.padded_height, grid.padded_width, grid.window);
    if (grid.padded_height == grid.height && grid.padded_width == grid.width) return merged;
    return ad::crop2d(merged, 0, 0, grid.height, grid.width);
}

/// Toroidal roll by (-s, -s): out[h][w] = x[h + s][w + s].
template <typename T>
ad::Var<T> cyclic_shift(const ad::Var<T>& x, std::size_t s) {
    const auto d = static_cast<long long>(s);
    return ad::roll2d(x, -d, -d);
}

template <typename T>
ad::Var<T> cyclic_unshift(const ad::Var<T>& x, std::size_t s) {
    const auto d = static_cast<long long>(s);
    return ad::roll2d(x, d, d);
}

constexpr double kMaskValue = -1e9;

/// Region label of each row (or column) of a map rolled by `s` with window G.
inline std::vector<int> shift_region_labels(std::size_t n, std::size_t G, std::size_t s) {
    std::vector<int> labels(n, 0);
    if (s == 0) return labels;
    for (std::size_t i = 0; i < n; ++i) {
        if (i >= n - G) labels[i] = 1;
        if (i >= n - s) labels[i] = 2;
    }
    return labels;
}

/// Additive attention mask for shifted windows, nW x G^2 x G^2. The shift
/// is taken modulo G; tokens whose pre-shift regions differ get kMaskValue.
template <typename T>
Tensor<T> build_attn_mask(std::size_t H, std::size_t W, std::size_t G, std::size_t shift) {
    if (G == 0 || H % G != 0 || W % G != 0) {
        throw InvalidShape("build_attn_mask: " + std::to_string(H) + "x" + std::to_string(W) +
                           " is not a multiple of window " + std::to_string(G));
    }
    const std::size_t s = shift % G;
    const std::size_t nwy = H / G, nwx = W / G, N = G * G;
    Tensor<T> mask(Shape{nwy * nwx, N, N});
    if (s == 0) return mask;
    const auto ry = shift_region_labels(H, G, s);
    const auto rx = shift_region_labels(W, G, s);
    std::vector<int> label(N);
    for (std::size_t wy = 0; wy < nwy; ++wy)
        for (std::size_t wx = 0; wx < nwx; ++wx) {
            for (std::size_t t = 0; t < N; ++t) label[t] = ry[wy * G + t / G] * 3 + rx[wx * G + t % G];
            T* m = mask.ptr() + (wy * nwx + wx) * N * N;
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < N; ++j) m[i * N + j] = label[i] == label[j] ? T(0) : T(kMaskValue);
        }
    return mask;
}

/// Bias-table index for every (query, key) pair of a G x G window:
/// (dy + G - 1) * (2G - 1) + (dx + G - 1), with d = query - key.
inline std::vector<std::uint32_t> relative_position_index(std::size_t G) {
    const std::size_t N = G * G, side = 2 * G - 1;
    std::vector<std::uint32_t> idx(N * N);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            const std::size_t dy = i / G + G - 1 - j / G;
            const std::size_t dx = i % G + G - 1 - j % G;
            idx[i * N + j] = static_cast<std::uint32_t>(dy * side + dx);
        }
    return idx;
}

/// Index of query (G x G window) against key (G0 x G0 overlapping window)
/// pairs into a (G + G0 - 1)^2 table. Reduces to relative_position_index
/// when G0 == G.
inline std::vector<std::uint32_t> cross_position_index(std::size_t G, std::size_t G0) {
    const std::size_t Nq = G * G, Nk = G0 * G0, side = G + G0 - 1;
    std::vector<std::uint32_t> idx(Nq * Nk);
    for (std::size_t i = 0; i < Nq; ++i)
        for (std::size_t j = 0; j < Nk; ++j) {
            const std::size_t dy = i / G + G0 - 1 - j / G0;
            const std::size_t dx = i % G + G0 - 1 - j % G0;
            idx[i * Nk + j] = static_cast<std::uint32_t>(dy * side + dx);
        }
    return idx;
}

}  // namespace saat
