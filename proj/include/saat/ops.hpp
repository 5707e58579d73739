#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <optional>
#include <vector>

#include "autograd.hpp"
#include "gemm.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and
// registers a backward rule through make_result(). Four-dimensional inputs
// are N x C x H x W throughout.

namespace saat::ad {

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw InvalidShape(msg);
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

/// Broadcast strides of `operand` against `out` (same rank, extents equal or 1).
inline std::vector<std::size_t> broadcast_strides(const Shape& operand, const Shape& out) {
    auto st = strides_of(operand);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (operand[i] == 1 && out[i] != 1) st[i] = 0;
    }
    return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    require(a.size() == b.size(), std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        require(a[i] == b[i] || a[i] == 1 || b[i] == 1,
                std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(a[i], b[i]);
    }
    return out;
}

/// Calls fn(out_index, a_index, b_index) over every element of `out`.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
    const std::size_t n = shape_numel(out);
    if (a == out && b == out) {
        for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
        return;
    }
    const auto sa = broadcast_strides(a, out);
    const auto sb = broadcast_strides(b, out);
    const std::size_t rank = out.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        fn(i, ia, ib);
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < out[d]) {
                ia += sa[d];
                ib += sb[d];
                break;
            }
            ia -= sa[d] * (out[d] - 1);
            ib -= sb[d] * (out[d] - 1);
            idx[d] = 0;
        }
    }
}

inline std::size_t wrap_index(long long i, std::size_t n) {
    const long long m = static_cast<long long>(n);
    return static_cast<std::size_t>(((i % m) + m) % m);
}

/// Mirror index without repeating the edge sample; handles pads wider than n.
inline std::size_t reflect_index(long long i, std::size_t n) {
    if (n == 1) return 0;
    const long long period = 2 * (static_cast<long long>(n) - 1);
    long long r = ((i % period) + period) % period;
    if (r >= static_cast<long long>(n)) r = period - r;
    return static_cast<std::size_t>(r);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "add");
    Tensor<T> y(out);
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::for_each_broadcast(out, a.shape(), b.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = av[ia] + bv[ib]; });
    return make_result<T>("add", std::move(y), {a, b}, [](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        detail::for_each_broadcast(self.value.shape(), parent_value(self, 0).shape(), parent_value(self, 1).shape(),
                                   [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                       if (ga) (*ga)[ia] += self.grad[i];
                                       if (gb) (*gb)[ib] += self.grad[i];
                                   });
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "sub");
    Tensor<T> y(out);
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::for_each_broadcast(out, a.shape(), b.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = av[ia] - bv[ib]; });
    return make_result<T>("sub", std::move(y), {a, b}, [](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        detail::for_each_broadcast(self.value.shape(), parent_value(self, 0).shape(), parent_value(self, 1).shape(),
                                   [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                       if (ga) (*ga)[ia] += self.grad[i];
                                       if (gb) (*gb)[ib] -= self.grad[i];
                                   });
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "mul");
    Tensor<T> y(out);
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::for_each_broadcast(out, a.shape(), b.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = av[ia] * bv[ib]; });
    return make_result<T>("mul", std::move(y), {a, b}, [](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        detail::for_each_broadcast(self.value.shape(), av.shape(), bv.shape(),
                                   [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                       if (ga) (*ga)[ia] += self.grad[i] * bv[ib];
                                       if (gb) (*gb)[ib] += self.grad[i] * av[ia];
                                   });
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> y = a.value();
    for (auto& v : y.data()) v *= s;
    return make_result<T>("scale", std::move(y), {a}, [s](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) (*ga)[i] += self.grad[i] * s;
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> y = a.value();
    for (auto& v : y.data()) v += s;
    return make_result<T>("add_scalar", std::move(y), {a}, [](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) (*ga)[i] += self.grad[i];
    });
}

template <typename T>
T sigmoid_scalar(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> y = a.value();
    for (auto& v : y.data()) v = sigmoid_scalar(v);
    return make_result<T>("sigmoid", std::move(y), {a}, [](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) {
            const T s = self.value[i];
            (*ga)[i] += self.grad[i] * s * (T(1) - s);
        }
    });
}

/// tanh approximation of GELU.
template <typename T>
T gelu_scalar(T x) {
    const T u = T(detail::kGeluC) * (x + T(detail::kGeluA) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    Tensor<T> y = a.value();
    for (auto& v : y.data()) v = gelu_scalar(v);
    return make_result<T>("gelu", std::move(y), {a}, [](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        const auto& x = parent_value(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) {
            const T xi = x[i];
            const T u = T(detail::kGeluC) * (xi + T(detail::kGeluA) * xi * xi * xi);
            const T t = std::tanh(u);
            const T du = T(detail::kGeluC) * (T(1) + T(3 * detail::kGeluA) * xi * xi);
            (*ga)[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * xi * (T(1) - t * t) * du);
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
    T s = 0;
    for (auto v : a.value().data()) s += v;
    return make_result<T>("sum", Tensor<T>::scalar(s), {a}, [](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        const T g = self.grad[0];
        for (auto& v : ga->data()) v += g;
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    T s = 0;
    for (auto v : a.value().data()) s += v;
    const T n = static_cast<T>(a.numel());
    return make_result<T>("mean", Tensor<T>::scalar(s / n), {a}, [n](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        const T g = self.grad[0] / n;
        for (auto& v : ga->data()) v += g;
    });
}

/// Mean over one axis; the axis is kept with extent 1 when keepdim is set.
template <typename T>
Var<T> mean_axis(const Var<T>& x, std::size_t axis, bool keepdim) {
    const Shape& s = x.shape();
    detail::require(axis < s.size(), "mean_axis: axis out of range for " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Shape os = s;
    if (keepdim || s.size() == 1) {
        os[axis] = 1;
    } else {
        os.erase(os.begin() + static_cast<long>(axis));
    }
    Tensor<T> y(os);
    const auto& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
            const T* src = xv.ptr() + (o * n + k) * inner;
            T* dst = y.ptr() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
    for (auto& v : y.data()) v /= static_cast<T>(n);
    return make_result<T>("mean_axis", std::move(y), {x}, [outer, inner, n](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        const T inv = T(1) / static_cast<T>(n);
        for (std::size_t o = 0; o < outer; ++o) {
            const T* g = self.grad.ptr() + o * inner;
            for (std::size_t k = 0; k < n; ++k) {
                T* dst = gx->ptr() + (o * n + k) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i] * inv;
            }
        }
    });
}

/// N x C x H x W -> N x C x 1 x 1
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    detail::require(x.rank() == 4, "global_avg_pool expects NCHW, got " + shape_str(x.shape()));
    return mean_axis(mean_axis(x, 3, true), 2, true);
}

/// Softmax with max subtraction.
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
    const Shape& s = x.shape();
    detail::require(axis < s.size(), "softmax: axis out of range for " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Tensor<T> y(s);
    const auto& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T m = xv[base];
            for (std::size_t k = 1; k < n; ++k) m = std::max(m, xv[base + k * inner]);
            T z = 0;
            for (std::size_t k = 0; k < n; ++k) {
                const T e = std::exp(xv[base + k * inner] - m);
                y[base + k * inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < n; ++k) y[base + k * inner] /= z;
        }
    }
    return make_result<T>("softmax", std::move(y), {x}, [outer, inner, n](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = o * n * inner + i;
                T dot = 0;
                for (std::size_t k = 0; k < n; ++k) dot += self.grad[base + k * inner] * self.value[base + k * inner];
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t j = base + k * inner;
                    (*gx)[j] += self.value[j] * (self.grad[j] - dot);
                }
            }
        }
    });
}

/// Mean absolute difference; the subgradient at zero is 0.
template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& target) {
    detail::require(pred.shape() == target.shape(),
                    "l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    const auto& p = pred.value();
    const auto& t = target.value();
    T s = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) s += std::abs(p[i] - t[i]);
    const T n = static_cast<T>(p.numel());
    return make_result<T>("l1_loss", Tensor<T>::scalar(s / n), {pred, target}, [n](Node<T>& self) {
        auto* gp = parent_grad(self, 0);
        auto* gt = parent_grad(self, 1);
        const auto& p = parent_value(self, 0);
        const auto& t = parent_value(self, 1);
        const T g = self.grad[0] / n;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const T d = p[i] - t[i];
            const T sg = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
            if (gp) (*gp)[i] += g * sg;
            if (gt) (*gt)[i] -= g * sg;
        }
    });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> y = x.value().reshaped(std::move(shape));
    return make_result<T>("reshape", std::move(y), {x}, [](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) (*gx)[i] += self.grad[i];
    });
}

/// out.shape[i] = x.shape[perm[i]]
template <typename T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm) {
    const Shape& s = x.shape();
    detail::require(perm.size() == s.size(), "permute: permutation rank mismatch for " + shape_str(s));
    std::vector<bool> used(s.size(), false);
    for (auto p : perm) {
        detail::require(p < s.size() && !used[p], "permute: invalid permutation");
        used[p] = true;
    }
    Shape os(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) os[i] = s[perm[i]];
    const auto in_st = detail::strides_of(s);
    std::vector<std::size_t> src_st(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) src_st[i] = in_st[perm[i]];

    auto visit = [os, src_st](auto&& fn) {
        const std::size_t n = shape_numel(os);
        const std::size_t rank = os.size();
        std::vector<std::size_t> idx(rank, 0);
        std::size_t src = 0;
        for (std::size_t i = 0; i < n; ++i) {
            fn(i, src);
            for (std::size_t d = rank; d-- > 0;) {
                if (++idx[d] < os[d]) {
                    src += src_st[d];
                    break;
                }
                src -= src_st[d] * (os[d] - 1);
                idx[d] = 0;
            }
        }
    };

    Tensor<T> y(os);
    const auto& xv = x.value();
    visit([&](std::size_t i, std::size_t src) { y[i] = xv[src]; });
    return make_result<T>("permute", std::move(y), {x}, [visit](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        visit([&](std::size_t i, std::size_t src) { (*gx)[src] += self.grad[i]; });
    });
}

/// Slice [start, start + length) along `axis`.
template <typename T>
Var<T> narrow(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& s = x.shape();
    detail::require(axis < s.size() && length > 0 && start + length <= s[axis],
                    "narrow: range out of bounds for " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Shape os = s;
    os[axis] = length;
    Tensor<T> y(os);
    const auto& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(xv.ptr() + (o * n + start) * inner, length * inner, y.ptr() + o * length * inner);
    }
    return make_result<T>("narrow", std::move(y), {x}, [outer, inner, n, start, length](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        for (std::size_t o = 0; o < outer; ++o) {
            const T* g = self.grad.ptr() + o * length * inner;
            T* dst = gx->ptr() + (o * n + start) * inner;
            for (std::size_t i = 0; i < length * inner; ++i) dst[i] += g[i];
        }
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
    detail::require(!xs.empty(), "concat: no inputs");
    Shape os = xs[0].shape();
    detail::require(axis < os.size(), "concat: axis out of range");
    std::size_t total = 0;
    for (const auto& x : xs) {
        Shape s = x.shape();
        detail::require(s.size() == os.size(), "concat: rank mismatch");
        total += s[axis];
        s[axis] = os[axis];
        detail::require(s == os, "concat: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(os));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
    for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
    os[axis] = total;
    Tensor<T> y(os);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& x : xs) {
        const std::size_t len = x.shape()[axis];
        offsets.push_back(off);
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(x.value().ptr() + o * len * inner, len * inner, y.ptr() + (o * total + off) * inner);
        }
        off += len;
    }
    return make_result<T>("concat", std::move(y), xs, [outer, inner, total, offsets, axis](Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto* gx = parent_grad(self, k);
            if (!gx) continue;
            const std::size_t len = gx->shape()[axis];
            for (std::size_t o = 0; o < outer; ++o) {
                const T* g = self.grad.ptr() + (o * total + offsets[k]) * inner;
                T* dst = gx->ptr() + o * len * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        }
    });
}

/// Toroidal roll of the two trailing axes: out[h][w] = x[h - dy][w - dx] (mod H, W).
template <typename T>
Var<T> roll2d(const Var<T>& x, long long dy, long long dx) {
    detail::require(x.rank() == 4, "roll2d expects NCHW, got " + shape_str(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<std::size_t> src_row(H), src_col(W);
    for (std::size_t h = 0; h < H; ++h) src_row[h] = detail::wrap_index(static_cast<long long>(h) - dy, H);
    for (std::size_t w = 0; w < W; ++w) src_col[w] = detail::wrap_index(static_cast<long long>(w) - dx, W);
    Tensor<T> y(x.shape());
    const auto& xv = x.value();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) y[(p * H + h) * W + w] = xv[(p * H + src_row[h]) * W + src_col[w]];
    return make_result<T>("roll2d", std::move(y), {x}, [planes, H, W, src_row, src_col](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w)
                    (*gx)[(p * H + src_row[h]) * W + src_col[w]] += self.grad[(p * H + h) * W + w];
    });
}

enum class PadMode { Zero, Reflect };

template <typename T>
Var<T> pad2d(const Var<T>& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right,
             PadMode mode) {
    detail::require(x.rank() == 4, "pad2d expects NCHW, got " + shape_str(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H + top + bottom, Wo = W + left + right;
    constexpr std::size_t kNone = static_cast<std::size_t>(-1);
    auto map = [mode](long long i, std::size_t n) -> std::size_t {
        if (i >= 0 && i < static_cast<long long>(n)) return static_cast<std::size_t>(i);
        return mode == PadMode::Zero ? kNone : detail::reflect_index(i, n);
    };
    std::vector<std::size_t> rows(Ho), cols(Wo);
    for (std::size_t h = 0; h < Ho; ++h) rows[h] = map(static_cast<long long>(h) - static_cast<long long>(top), H);
    for (std::size_t w = 0; w < Wo; ++w) cols[w] = map(static_cast<long long>(w) - static_cast<long long>(left), W);
    Tensor<T> y(Shape{x.dim(0), x.dim(1), Ho, Wo});
    const auto& xv = x.value();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t h = 0; h < Ho; ++h) {
            if (rows[h] == kNone) continue;
            for (std::size_t w = 0; w < Wo; ++w) {
                if (cols[w] == kNone) continue;
                y[(p * Ho + h) * Wo + w] = xv[(p * H + rows[h]) * W + cols[w]];
            }
        }
    return make_result<T>("pad2d", std::move(y), {x}, [planes, H, W, Ho, Wo, rows, cols](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t h = 0; h < Ho; ++h) {
                if (rows[h] == kNone) continue;
                for (std::size_t w = 0; w < Wo; ++w) {
                    if (cols[w] == kNone) continue;
                    (*gx)[(p * H + rows[h]) * W + cols[w]] += self.grad[(p * Ho + h) * Wo + w];
                }
            }
    });
}

template <typename T>
Var<T> crop2d(const Var<T>& x, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
    detail::require(x.rank() == 4 && top + height <= x.dim(2) && left + width <= x.dim(3),
                    "crop2d: window out of bounds for " + shape_str(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y(Shape{x.dim(0), x.dim(1), height, width});
    const auto& xv = x.value();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t h = 0; h < height; ++h)
            std::copy_n(xv.ptr() + (p * H + top + h) * W + left, width, y.ptr() + (p * height + h) * width);
    return make_result<T>("crop2d", std::move(y), {x}, [planes, H, W, top, left, height, width](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t h = 0; h < height; ++h)
                for (std::size_t w = 0; w < width; ++w)
                    (*gx)[(p * H + top + h) * W + left + w] += self.grad[(p * height + h) * width + w];
    });
}

namespace detail {

/// Source index in N x (C r^2) x H x W for each element of N x C x rH x rW.
inline std::vector<std::size_t> shuffle_map(std::size_t N, std::size_t C, std::size_t H, std::size_t W,
                                            std::size_t r) {
    const std::size_t Ho = H * r, Wo = W * r;
    std::vector<std::size_t> map(N * C * Ho * Wo);
    std::size_t i = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ho = 0; ho < Ho; ++ho)
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    const std::size_t ci = c * r * r + (ho % r) * r + (wo % r);
                    map[i++] = ((n * C * r * r + ci) * H + ho / r) * W + wo / r;
                }
    return map;
}

}  // namespace detail

/// N x (C r^2) x H x W -> N x C x rH x rW, channel-major sub-pixel layout.
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t r) {
    detail::require(x.rank() == 4 && r >= 1 && x.dim(1) % (r * r) == 0,
                    "pixel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by r^2=" +
                        std::to_string(r * r));
    const std::size_t N = x.dim(0), C = x.dim(1) / (r * r), H = x.dim(2), W = x.dim(3);
    auto map = detail::shuffle_map(N, C, H, W, r);
    Tensor<T> y(Shape{N, C, H * r, W * r});
    const auto& xv = x.value();
    for (std::size_t i = 0; i < map.size(); ++i) y[i] = xv[map[i]];
    return make_result<T>("pixel_shuffle", std::move(y), {x}, [map = std::move(map)](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        for (std::size_t i = 0; i < map.size(); ++i) (*gx)[map[i]] += self.grad[i];
    });
}

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, std::size_t r) {
    detail::require(x.rank() == 4 && r >= 1 && x.dim(2) % r == 0 && x.dim(3) % r == 0,
                    "pixel_unshuffle: spatial extents of " + shape_str(x.shape()) + " not divisible by " +
                        std::to_string(r));
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2) / r, W = x.dim(3) / r;
    auto map = detail::shuffle_map(N, C, H, W, r);
    Tensor<T> y(Shape{N, C * r * r, H, W});
    const auto& xv = x.value();
    for (std::size_t i = 0; i < map.size(); ++i) y[map[i]] = xv[i];
    return make_result<T>("pixel_unshuffle", std::move(y), {x}, [map = std::move(map)](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        for (std::size_t i = 0; i < map.size(); ++i) (*gx)[i] += self.grad[map[i]];
    });
}

// ---------------------------------------------------------------------------
// Convolution and linear maps

namespace detail {

struct Conv2dGeom {
    std::size_t N, C, H, W, O, kh, kw, stride, pad, groups, Ho, Wo;
    std::size_t cg() const { return C / groups; }
    std::size_t og() const { return O / groups; }
    std::size_t ckk() const { return cg() * kh * kw; }
    std::size_t hwo() const { return Ho * Wo; }
    bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const Conv2dGeom& g, std::size_t c0, T* col) {
    for (std::size_t c = 0; c < g.cg(); ++c) {
        const T* plane = x + (c0 + c) * g.H * g.W;
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = col + ((c * g.kh + ky) * g.kw + kx) * g.hwo();
                for (std::size_t oy = 0; oy < g.Ho; ++oy) {
                    const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
                    T* dst = row + oy * g.Wo;
                    if (iy < 0 || iy >= static_cast<long long>(g.H)) {
                        std::fill_n(dst, g.Wo, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.W;
                    for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                        const long long ix =
                            static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<long long>(g.W)) ? T(0) : src[ix];
                    }
                }
            }
    }
}

template <typename T>
void col2im(const T* col, const Conv2dGeom& g, std::size_t c0, T* dx) {
    for (std::size_t c = 0; c < g.cg(); ++c) {
        T* plane = dx + (c0 + c) * g.H * g.W;
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = col + ((c * g.kh + ky) * g.kw + kx) * g.hwo();
                for (std::size_t oy = 0; oy < g.Ho; ++oy) {
                    const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long long>(g.H)) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.W;
                    for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                        const long long ix =
                            static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long long>(g.W)) dst[ix] += row[oy * g.Wo + ox];
                    }
                }
            }
    }
}

}  // namespace detail

/// Cross-correlation. x: N x C x H x W, w: O x (C/groups) x kh x kw, bias: O or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride, std::size_t padding,
              std::size_t groups = 1) {
    const auto mismatch = [&] {
        return "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()) +
               " (stride " + std::to_string(stride) + ", padding " + std::to_string(padding) + ", groups " +
               std::to_string(groups) + ")";
    };
    detail::require(x.rank() == 4 && w.rank() == 4 && groups >= 1 && stride >= 1, mismatch());
    detail::Conv2dGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, padding,
                         groups, 0,         0};
    detail::require(g.C % groups == 0 && g.O % groups == 0 && w.dim(1) == g.C / groups, mismatch());
    detail::require(g.kh % 2 == 1 && g.kw % 2 == 1, mismatch() + ": kernel must be odd");
    detail::require(g.H + 2 * padding >= g.kh && g.W + 2 * padding >= g.kw, mismatch());
    if (bias.defined()) detail::require(bias.rank() == 1 && bias.dim(0) == g.O, mismatch() + ": bad bias");
    g.Ho = (g.H + 2 * padding - g.kh) / stride + 1;
    g.Wo = (g.W + 2 * padding - g.kw) / stride + 1;

    Tensor<T> y(Shape{g.N, g.O, g.Ho, g.Wo});
    const auto& xv = x.value();
    const auto& wv = w.value();
    std::vector<T> col(g.pointwise() ? 0 : g.ckk() * g.hwo());
    for (std::size_t n = 0; n < g.N; ++n) {
        const T* xn = xv.ptr() + n * g.C * g.H * g.W;
        T* yn = y.ptr() + n * g.O * g.hwo();
        if (bias.defined()) {
            for (std::size_t o = 0; o < g.O; ++o) std::fill_n(yn + o * g.hwo(), g.hwo(), bias.value()[o]);
        }
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const T* src = xn + gi * g.cg() * g.H * g.W;
            if (!g.pointwise()) {
                detail::im2col(xn, g, gi * g.cg(), col.data());
                src = col.data();
            }
            saat::detail::gemm_nn(g.og(), g.hwo(), g.ckk(), wv.ptr() + gi * g.og() * g.ckk(), src,
                            yn + gi * g.og() * g.hwo());
        }
    }
    return make_result<T>("conv2d", std::move(y), {x, w, bias}, [g](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        auto* gw = parent_grad(self, 1);
        auto* gb = self.parents[2] ? parent_grad(self, 2) : nullptr;
        const auto& xv = parent_value(self, 0);
        const auto& wv = parent_value(self, 1);
        std::vector<T> col(g.pointwise() ? 0 : g.ckk() * g.hwo());
        std::vector<T> dcol(g.pointwise() ? 0 : g.ckk() * g.hwo());
        for (std::size_t n = 0; n < g.N; ++n) {
            const T* xn = xv.ptr() + n * g.C * g.H * g.W;
            const T* dyn = self.grad.ptr() + n * g.O * g.hwo();
            if (gb) {
                for (std::size_t o = 0; o < g.O; ++o) {
                    T s = 0;
                    for (std::size_t i = 0; i < g.hwo(); ++i) s += dyn[o * g.hwo() + i];
                    (*gb)[o] += s;
                }
            }
            for (std::size_t gi = 0; gi < g.groups; ++gi) {
                const T* dy = dyn + gi * g.og() * g.hwo();
                const T* wg = wv.ptr() + gi * g.og() * g.ckk();
                if (gw) {
                    const T* src = xn + gi * g.cg() * g.H * g.W;
                    if (!g.pointwise()) {
                        detail::im2col(xn, g, gi * g.cg(), col.data());
                        src = col.data();
                    }
                    saat::detail::gemm_nt(g.og(), g.ckk(), g.hwo(), dy, src, gw->ptr() + gi * g.og() * g.ckk());
                }
                if (gx) {
                    T* dxn = gx->ptr() + n * g.C * g.H * g.W;
                    if (g.pointwise()) {
                        saat::detail::gemm_tn(g.ckk(), g.hwo(), g.og(), wg, dy, dxn + gi * g.cg() * g.H * g.W);
                    } else {
                        std::fill(dcol.begin(), dcol.end(), T(0));
                        saat::detail::gemm_tn(g.ckk(), g.hwo(), g.og(), wg, dy, dcol.data());
                        detail::col2im(dcol.data(), g, gi * g.cg(), dxn);
                    }
                }
            }
        }
    });
}

/// Depthwise 1-D convolution. x: B x C x L, w: C x 1 x k (k odd).
template <typename T>
Var<T> dwconv1d(const Var<T>& x, const Var<T>& w, std::size_t padding) {
    detail::require(x.rank() == 3 && w.rank() == 3 && w.dim(0) == x.dim(1) && w.dim(1) == 1,
                    "dwconv1d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2), k = w.dim(2);
    detail::require(k % 2 == 1, "dwconv1d: kernel size must be odd, got " + std::to_string(k));
    detail::require(L + 2 * padding >= k, "dwconv1d: sequence too short for kernel");
    const std::size_t Lo = L + 2 * padding - k + 1;
    Tensor<T> y(Shape{B, C, Lo});
    const auto& xv = x.value();
    const auto& wv = w.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* xs = xv.ptr() + (b * C + c) * L;
            const T* ws = wv.ptr() + c * k;
            T* ys = y.ptr() + (b * C + c) * Lo;
            for (std::size_t o = 0; o < Lo; ++o) {
                T s = 0;
                for (std::size_t j = 0; j < k; ++j) {
                    const long long i = static_cast<long long>(o + j) - static_cast<long long>(padding);
                    if (i >= 0 && i < static_cast<long long>(L)) s += ws[j] * xs[i];
                }
                ys[o] = s;
            }
        }
    return make_result<T>("dwconv1d", std::move(y), {x, w}, [B, C, L, k, Lo, padding](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        auto* gw = parent_grad(self, 1);
        const auto& xv = parent_value(self, 0);
        const auto& wv = parent_value(self, 1);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                const T* xs = xv.ptr() + (b * C + c) * L;
                const T* ws = wv.ptr() + c * k;
                const T* gy = self.grad.ptr() + (b * C + c) * Lo;
                for (std::size_t o = 0; o < Lo; ++o) {
                    for (std::size_t j = 0; j < k; ++j) {
                        const long long i = static_cast<long long>(o + j) - static_cast<long long>(padding);
                        if (i < 0 || i >= static_cast<long long>(L)) continue;
                        if (gx) (*gx)[(b * C + c) * L + static_cast<std::size_t>(i)] += gy[o] * ws[j];
                        if (gw) (*gw)[c * k + j] += gy[o] * xs[i];
                    }
                }
            }
    });
}

/// y = x W^T + b over the last axis. W: out x in, b: out or undefined.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    detail::require(x.rank() >= 1 && w.rank() == 2 && x.shape().back() == w.dim(1),
                    "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    const std::size_t in = w.dim(1), out = w.dim(0), rows = x.numel() / in;
    if (b.defined()) detail::require(b.rank() == 1 && b.dim(0) == out, "linear: bad bias " + shape_str(b.shape()));
    Shape os = x.shape();
    os.back() = out;
    Tensor<T> y(os);
    if (b.defined()) {
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(b.value().ptr(), out, y.ptr() + r * out);
    }
    saat::detail::gemm_nt(rows, out, in, x.value().ptr(), w.value().ptr(), y.ptr());
    return make_result<T>("linear", std::move(y), {x, w, b}, [in, out, rows](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        auto* gw = parent_grad(self, 1);
        auto* gb = self.parents[2] ? parent_grad(self, 2) : nullptr;
        const T* dy = self.grad.ptr();
        if (gx) saat::detail::gemm_nn(rows, in, out, dy, parent_value(self, 1).ptr(), gx->ptr());
        if (gw) saat::detail::gemm_tn(out, in, rows, dy, parent_value(self, 0).ptr(), gw->ptr());
        if (gb) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < out; ++o) (*gb)[o] += dy[r * out + o];
        }
    });
}

/// Batched matmul over identical leading axes: (.., M, K) x (.., K, N), or
/// (.., M, K) x (.., N, K)^T when trans_b is set.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_b = false) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const auto msg = "bmm: " + shape_str(sa) + " x " + shape_str(sb) + (trans_b ? "^T" : "");
    detail::require(sa.size() >= 2 && sa.size() == sb.size(), msg);
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) detail::require(sa[i] == sb[i], msg);
    const std::size_t r = sa.size();
    const std::size_t M = sa[r - 2], K = sa[r - 1];
    const std::size_t N = trans_b ? sb[r - 2] : sb[r - 1];
    detail::require((trans_b ? sb[r - 1] : sb[r - 2]) == K, msg);
    const std::size_t batch = a.numel() / (M * K);
    Shape os = sa;
    os[r - 1] = N;
    Tensor<T> y(os);
    const T* av = a.value().ptr();
    const T* bv = b.value().ptr();
    for (std::size_t i = 0; i < batch; ++i) {
        if (trans_b) {
            saat::detail::gemm_nt(M, N, K, av + i * M * K, bv + i * N * K, y.ptr() + i * M * N);
        } else {
            saat::detail::gemm_nn(M, N, K, av + i * M * K, bv + i * K * N, y.ptr() + i * M * N);
        }
    }
    return make_result<T>("bmm", std::move(y), {a, b}, [batch, M, N, K, trans_b](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        const T* av = parent_value(self, 0).ptr();
        const T* bv = parent_value(self, 1).ptr();
        for (std::size_t i = 0; i < batch; ++i) {
            const T* dy = self.grad.ptr() + i * M * N;
            const T* ai = av + i * M * K;
            const T* bi = bv + i * K * N;
            if (ga) {
                if (trans_b) {
                    saat::detail::gemm_nn(M, K, N, dy, bi, ga->ptr() + i * M * K);
                } else {
                    saat::detail::gemm_nt(M, K, N, dy, bi, ga->ptr() + i * M * K);
                }
            }
            if (gb) {
                if (trans_b) {
                    saat::detail::gemm_tn(N, K, M, dy, ai, gb->ptr() + i * N * K);
                } else {
                    saat::detail::gemm_tn(K, N, M, ai, dy, gb->ptr() + i * K * N);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization

/// Normalizes over axis 1 of an N x C x ... tensor, i.e. per token over channels.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    detail::require(x.rank() >= 2 && gamma.numel() == x.dim(1) && beta.numel() == x.dim(1),
                    "layer_norm: input " + shape_str(x.shape()) + " incompatible with affine " +
                        shape_str(gamma.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), S = x.numel() / (N * C);
    Tensor<T> y(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<T> rstd(N * S);
    const auto& xv = x.value();
    std::vector<T> mu(S), var(S);
    for (std::size_t n = 0; n < N; ++n) {
        const T* xn = xv.ptr() + n * C * S;
        std::fill(mu.begin(), mu.end(), T(0));
        std::fill(var.begin(), var.end(), T(0));
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s) mu[s] += xn[c * S + s];
        for (auto& m : mu) m /= static_cast<T>(C);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s) {
                const T d = xn[c * S + s] - mu[s];
                var[s] += d * d;
            }
        for (std::size_t s = 0; s < S; ++s) rstd[n * S + s] = T(1) / std::sqrt(var[s] / static_cast<T>(C) + eps);
        for (std::size_t c = 0; c < C; ++c) {
            const T g = gamma.value()[c], b = beta.value()[c];
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t i = (n * C + c) * S + s;
                xhat[i] = (xn[c * S + s] - mu[s]) * rstd[n * S + s];
                y[i] = g * xhat[i] + b;
            }
        }
    }
    return make_result<T>("layer_norm", std::move(y), {x, gamma, beta},
                          [N, C, S, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
                              auto* gx = parent_grad(self, 0);
                              auto* gg = parent_grad(self, 1);
                              auto* gb = parent_grad(self, 2);
                              const auto& gamma = parent_value(self, 1);
                              std::vector<T> m1(S), m2(S);
                              for (std::size_t n = 0; n < N; ++n) {
                                  std::fill(m1.begin(), m1.end(), T(0));
                                  std::fill(m2.begin(), m2.end(), T(0));
                                  for (std::size_t c = 0; c < C; ++c)
                                      for (std::size_t s = 0; s < S; ++s) {
                                          const std::size_t i = (n * C + c) * S + s;
                                          const T dy = self.grad[i];
                                          if (gg) (*gg)[c] += dy * xhat[i];
                                          if (gb) (*gb)[c] += dy;
                                          const T dxh = dy * gamma[c];
                                          m1[s] += dxh;
                                          m2[s] += dxh * xhat[i];
                                      }
                                  if (!gx) continue;
                                  for (std::size_t s = 0; s < S; ++s) {
                                      m1[s] /= static_cast<T>(C);
                                      m2[s] /= static_cast<T>(C);
                                  }
                                  for (std::size_t c = 0; c < C; ++c)
                                      for (std::size_t s = 0; s < S; ++s) {
                                          const std::size_t i = (n * C + c) * S + s;
                                          const T dxh = self.grad[i] * gamma[c];
                                          (*gx)[i] += rstd[n * S + s] * (dxh - m1[s] - xhat[i] * m2[s]);
                                      }
                              }
                          });
}

/// Group normalization over N x C x ... with optional per-channel affine.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t num_groups,
                  T eps = T(1e-5)) {
    if (x.rank() < 2 || num_groups == 0 || x.dim(1) % num_groups != 0) {
        throw InvalidConfig("group_norm: " + std::to_string(x.rank() >= 2 ? x.dim(1) : 0) +
                            " channels not divisible into " + std::to_string(num_groups) + " groups");
    }
    const std::size_t N = x.dim(0), C = x.dim(1), S = x.numel() / (N * C), cpg = C / num_groups;
    const std::size_t gsz = cpg * S;
    const bool affine = gamma.defined();
    if (affine) {
        detail::require(gamma.numel() == C && beta.defined() && beta.numel() == C,
                        "group_norm: affine parameters must have " + std::to_string(C) + " entries");
    }
    Tensor<T> y(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<T> rstd(N * num_groups);
    const auto& xv = x.value();
    for (std::size_t ng = 0; ng < N * num_groups; ++ng) {
        const T* xs = xv.ptr() + ng * gsz;
        T mu = 0;
        for (std::size_t i = 0; i < gsz; ++i) mu += xs[i];
        mu /= static_cast<T>(gsz);
        T var = 0;
        for (std::size_t i = 0; i < gsz; ++i) var += (xs[i] - mu) * (xs[i] - mu);
        rstd[ng] = T(1) / std::sqrt(var / static_cast<T>(gsz) + eps);
        const std::size_t c0 = (ng % num_groups) * cpg;
        for (std::size_t i = 0; i < gsz; ++i) {
            const std::size_t c = c0 + i / S;
            xhat[ng * gsz + i] = (xs[i] - mu) * rstd[ng];
            y[ng * gsz + i] = affine ? gamma.value()[c] * xhat[ng * gsz + i] + beta.value()[c] : xhat[ng * gsz + i];
        }
    }
    return make_result<T>(
        "group_norm", std::move(y), {x, gamma, beta},
        [N, S, cpg, gsz, num_groups, affine, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
            auto* gx = parent_grad(self, 0);
            auto* gg = affine ? parent_grad(self, 1) : nullptr;
            auto* gb = affine ? parent_grad(self, 2) : nullptr;
            for (std::size_t ng = 0; ng < N * num_groups; ++ng) {
                const std::size_t c0 = (ng % num_groups) * cpg;
                T m1 = 0, m2 = 0;
                for (std::size_t i = 0; i < gsz; ++i) {
                    const std::size_t c = c0 + i / S;
                    const T dy = self.grad[ng * gsz + i];
                    const T xh = xhat[ng * gsz + i];
                    if (gg) (*gg)[c] += dy * xh;
                    if (gb) (*gb)[c] += dy;
                    const T dxh = affine ? dy * parent_value(self, 1)[c] : dy;
                    m1 += dxh;
                    m2 += dxh * xh;
                }
                if (!gx) continue;
                m1 /= static_cast<T>(gsz);
                m2 /= static_cast<T>(gsz);
                for (std::size_t i = 0; i < gsz; ++i) {
                    const std::size_t c = c0 + i / S;
                    const T dy = self.grad[ng * gsz + i];
                    const T dxh = affine ? dy * parent_value(self, 1)[c] : dy;
                    (*gx)[ng * gsz + i] += rstd[ng] * (dxh - m1 - xhat[ng * gsz + i] * m2);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Windows

/// Gathers win x win patches (zero padded by `pad` before and `pad_after`
/// after, step `stride`) from an N x C x H x W map into
/// (N * nWin) x win^2 x C tokens. Windows are ordered batch-major then
/// row-major; tokens inside a window are row-major.
template <typename T>
Var<T> extract_windows(const Var<T>& x, std::size_t win, std::size_t stride, std::size_t pad,
                       std::optional<std::size_t> pad_after = std::nullopt) {
    detail::require(x.rank() == 4 && win >= 1 && stride >= 1, "extract_windows: bad input " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t padt = pad + pad_after.value_or(pad);
    detail::require(H + padt >= win && W + padt >= win && (H + padt - win) % stride == 0 &&
                        (W + padt - win) % stride == 0,
                    "extract_windows: " + shape_str(x.shape()) + " does not tile with window " + std::to_string(win) +
                        ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad) + "+" +
                        std::to_string(pad_after.value_or(pad)));
    const std::size_t nwy = (H + padt - win) / stride + 1, nwx = (W + padt - win) / stride + 1;
    const std::size_t T2 = win * win;
    constexpr std::size_t kNone = static_cast<std::size_t>(-1);
    // map[(window, token)] = spatial offset h*W+w, or kNone for padding.
    std::vector<std::size_t> map(N * nwy * nwx * T2);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t wy = 0; wy < nwy; ++wy)
            for (std::size_t wx = 0; wx < nwx; ++wx)
                for (std::size_t ty = 0; ty < win; ++ty)
                    for (std::size_t tx = 0; tx < win; ++tx) {
                        const long long h = static_cast<long long>(wy * stride + ty) - static_cast<long long>(pad);
                        const long long w = static_cast<long long>(wx * stride + tx) - static_cast<long long>(pad);
                        const std::size_t idx = ((n * nwy + wy) * nwx + wx) * T2 + ty * win + tx;
                        const bool inside = h >= 0 && w >= 0 && h < static_cast<long long>(H) &&
                                            w < static_cast<long long>(W);
                        map[idx] = inside ? static_cast<std::size_t>(h) * W + static_cast<std::size_t>(w) : kNone;
                    }
    const std::size_t HW = H * W;
    const std::size_t per_batch = nwy * nwx * T2;
    Tensor<T> y(Shape{N * nwy * nwx, T2, C});
    const auto& xv = x.value();
    for (std::size_t i = 0; i < map.size(); ++i) {
        if (map[i] == kNone) continue;
        const T* src = xv.ptr() + (i / per_batch) * C * HW + map[i];
        T* dst = y.ptr() + i * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] = src[c * HW];
    }
    return make_result<T>("extract_windows", std::move(y), {x}, [map = std::move(map), C, HW, per_batch](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        for (std::size_t i = 0; i < map.size(); ++i) {
            if (map[i] == kNone) continue;
            T* dst = gx->ptr() + (i / per_batch) * C * HW + map[i];
            const T* g = self.grad.ptr() + i * C;
            for (std::size_t c = 0; c < C; ++c) dst[c * HW] += g[c];
        }
    });
}

/// Inverse of extract_windows(x, G, G, 0): (N * nW) x G^2 x C -> N x C x H x W.
template <typename T>
Var<T> merge_windows(const Var<T>& windows, std::size_t N, std::size_t H, std::size_t W, std::size_t G) {
    detail::require(windows.rank() == 3 && G >= 1 && H % G == 0 && W % G == 0 && windows.dim(1) == G * G &&
                        windows.dim(0) == N * (H / G) * (W / G),
                    "merge_windows: " + shape_str(windows.shape()) + " does not tile a " + std::to_string(H) + "x" +
                        std::to_string(W) + " map with window " + std::to_string(G));
    const std::size_t C = windows.dim(2), nwx = W / G, nwy = H / G, HW = H * W;
    std::vector<std::size_t> map(N * nwy * nwx * G * G);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t wy = 0; wy < nwy; ++wy)
            for (std::size_t wx = 0; wx < nwx; ++wx)
                for (std::size_t ty = 0; ty < G; ++ty)
                    for (std::size_t tx = 0; tx < G; ++tx)
                        map[((n * nwy + wy) * nwx + wx) * G * G + ty * G + tx] = (wy * G + ty) * W + wx * G + tx;
    const std::size_t per_batch = nwy * nwx * G * G;
    Tensor<T> y(Shape{N, C, H, W});
    const auto& wv = windows.value();
    for (std::size_t i = 0; i < map.size(); ++i) {
        T* dst = y.ptr() + (i / per_batch) * C * HW + map[i];
        const T* src = wv.ptr() + i * C;
        for (std::size_t c = 0; c < C; ++c) dst[c * HW] = src[c];
    }
    return make_result<T>("merge_windows", std::move(y), {windows}, [map = std::move(map), C, HW, per_batch](Node<T>& self) {
        auto* gw = parent_grad(self, 0);
        for (std::size_t i = 0; i < map.size(); ++i) {
            const T* src = self.grad.ptr() + (i / per_batch) * C * HW + map[i];
            T* dst = gw->ptr() + i * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c * HW];
        }
    });
}

/// Expands a (entries x heads) bias table through an index table of
/// Nq * Nk entries into a 1 x heads x Nq x Nk tensor.
template <typename T>
Var<T> gather_bias(const Var<T>& table, const std::vector<std::uint32_t>& index, std::size_t Nq, std::size_t Nk) {
    detail::require(table.rank() == 2 && index.size() == Nq * Nk, "gather_bias: bad table or index");
    const std::size_t E = table.dim(0), heads = table.dim(1);
    for (auto i : index) detail::require(i < E, "gather_bias: index out of range");
    Tensor<T> y(Shape{1, heads, Nq, Nk});
    const auto& tv = table.value();
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < Nq * Nk; ++i) y[h * Nq * Nk + i] = tv[index[i] * heads + h];
    return make_result<T>("gather_bias", std::move(y), {table}, [index, heads, Nq, Nk](Node<T>& self) {
        auto* gt = parent_grad(self, 0);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < Nq * Nk; ++i) (*gt)[index[i] * heads + h] += self.grad[h * Nq * Nk + i];
    });
}

}  // namespace saat::ad
