#pragma once

#include <cstdint>
#include <vector>

#include "saat/saat.hpp"

namespace saat::test {

using V = ad::Var<double>;
using TD = Tensor<double>;

inline TD randn(const Shape& s, std::uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    TD t(s);
    for (auto& v : t.data()) v = rng.normal() * stddev;
    return t;
}

inline V leaf(const TD& t) { return V::leaf(t, true); }
inline V cst(const TD& t) { return V::constant(t); }

inline double max_abs(const TD& a, const TD& b) { return max_abs_diff(a, b); }

// Straight six-loop cross-correlation with zero padding and groups.
inline TD naive_conv2d(const TD& x, const TD& w, const TD& b, std::size_t stride, std::size_t pad, std::size_t groups) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
    const std::size_t og = O / groups;
    (void)C;
    TD y(Shape{N, O, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    double s = b.empty() ? 0.0 : b[o];
                    for (std::size_t c = 0; c < cg; ++c)
                        for (std::size_t u = 0; u < kh; ++u)
                            for (std::size_t v = 0; v < kw; ++v) {
                                const long long h = static_cast<long long>(i * stride + u) - static_cast<long long>(pad);
                                const long long ww = static_cast<long long>(j * stride + v) - static_cast<long long>(pad);
                                if (h < 0 || ww < 0 || h >= static_cast<long long>(H) || ww >= static_cast<long long>(W))
                                    continue;
                                s += x.at(n, (o / og) * cg + c, h, ww) * w.at(o, c, u, v);
                            }
                    y.at(n, o, i, j) = s;
                }
    return y;
}

}  // namespace saat::test
