#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "autograd.hpp"
#include "ops.hpp"
#include "random.hpp"

namespace saat {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t probes = 0;
    std::string worst;  // "<leaf>[<index>]: analytic=<a> numeric=<n>"

    bool passed(double tol) const { return probes > 0 && max_rel_error <= tol; }
};

struct GradCheckOptions {
    std::size_t probes = 20;
    double step = 1e-5;
    /// Denominator floor of the relative error, so gradients that are zero
    /// up to roundoff do not blow the ratio up.
    double floor = 1e-4;
    std::uint64_t seed = 7;
};

/// Compares reverse-mode gradients of `scalar_fn` against central finite
/// differences at randomly chosen coordinates of `leaves`. `scalar_fn` must
/// build its graph from the given leaves and return a one-element Var.
template <typename T>
GradCheckReport gradcheck_leaves(const std::function<ad::Var<T>()>& scalar_fn, std::vector<ad::Var<T>> leaves,
                                 const std::vector<std::string>& names, const GradCheckOptions& opt = {}) {
    for (auto& l : leaves) l.zero_grad();
    {
        auto loss = scalar_fn();
        ad::backward(loss);
    }
    Rng rng(opt.seed);
    GradCheckReport rep;
    std::size_t total = 0;
    for (const auto& l : leaves) total += l.numel();
    if (total == 0) return rep;
    for (std::size_t p = 0; p < opt.probes; ++p) {
        // Round-robin over leaves so every input is probed; random leaves
        // when there are more leaves than probes.
        const std::size_t li = opt.probes >= leaves.size() ? p % leaves.size() : rng.below(leaves.size());
        auto& leaf = leaves[li];
        const std::size_t idx = rng.below(leaf.numel());
        const T analytic = leaf.grad().empty() ? T(0) : leaf.grad()[idx];
        T& slot = leaf.mutable_value()[idx];
        const T orig = slot;
        T fp, fm;
        {
            ad::NoGradGuard ng;
            slot = orig + static_cast<T>(opt.step);
            fp = scalar_fn().value()[0];
            slot = orig - static_cast<T>(opt.step);
            fm = scalar_fn().value()[0];
            slot = orig;
        }
        const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * opt.step);
        const double a = static_cast<double>(analytic);
        const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
        const double rel = std::abs(a - numeric) / denom;
        ++rep.probes;
        if (rel >= rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst = (li < names.size() ? names[li] : "input" + std::to_string(li)) + "[" + std::to_string(idx) +
                        "]: analytic=" + std::to_string(a) + " numeric=" + std::to_string(numeric);
        }
    }
    for (auto& l : leaves) l.zero_grad();
    return rep;
}

/// Gradient check of a tensor-valued function of fresh leaf inputs. The
/// output is reduced with fixed random weights so every output element
/// contributes to the probed gradient.
template <typename T>
GradCheckReport gradcheck(const std::function<ad::Var<T>(const std::vector<ad::Var<T>>&)>& fn,
                          const std::vector<Tensor<T>>& inputs, const GradCheckOptions& opt = {}) {
    std::vector<ad::Var<T>> leaves;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        leaves.push_back(ad::Var<T>::leaf(inputs[i], true));
        names.push_back("input" + std::to_string(i));
    }
    Shape out_shape;
    {
        ad::NoGradGuard ng;
        out_shape = fn(leaves).shape();
    }
    Rng rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
    auto weights = ad::Var<T>::constant(random_normal<T>(out_shape, rng));
    std::function<ad::Var<T>()> scalar = [&] { return ad::sum(ad::mul(fn(leaves), weights)); };
    return gradcheck_leaves<T>(scalar, leaves, names, opt);
}

/// A differentiable scalar function together with the leaves to probe.
/// `keep` holds whatever the closure needs to stay alive (parameter stores).
template <typename T>
struct Probe {
    std::vector<ad::Var<T>> leaves;
    std::vector<std::string> names;
    std::function<ad::Var<T>()> fn;
    std::shared_ptr<void> keep;
};

/// sum(out * w) with fixed pseudo-random weights drawn in double precision,
/// so the float and double versions of a probe reduce identically.
template <typename T>
ad::Var<T> weighted_sum(const ad::Var<T>& out, std::uint64_t seed) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const auto w = random_normal<double>(out.shape(), rng);
    return ad::sum(ad::mul(out, ad::Var<T>::constant(w.template cast<T>())));
}

/// Runs a probe factory (`make(std::type_identity<T>{})` -> Probe<T>).
/// At 64 bits both gradients come from the same graph. At 32 bits the
/// analytic gradient of the float graph is compared with central differences
/// of the identically built double graph, which keeps the numeric side
/// free of float roundoff.
template <typename Make>
GradCheckReport gradcheck_probe(const Make& make, bool f64, const GradCheckOptions& opt = {}) {
    auto pd = make(std::type_identity<double>{});
    if (f64) return gradcheck_leaves<double>(pd.fn, pd.leaves, pd.names, opt);

    auto pf = make(std::type_identity<float>{});
    if (pf.leaves.size() != pd.leaves.size()) throw ContractViolation("gradcheck_probe: precision variants differ");
    for (auto& l : pf.leaves) l.zero_grad();
    ad::backward(pf.fn());
    Rng rng(opt.seed);
    GradCheckReport rep;
    for (std::size_t p = 0; p < opt.probes; ++p) {
        const std::size_t li = opt.probes >= pd.leaves.size() ? p % pd.leaves.size() : rng.below(pd.leaves.size());
        auto& leaf = pd.leaves[li];
        const std::size_t idx = rng.below(leaf.numel());
        const auto& g = pf.leaves[li].grad();
        const double a = g.empty() ? 0.0 : static_cast<double>(g[idx]);
        double& slot = leaf.mutable_value()[idx];
        const double orig = slot;
        double fp, fm;
        {
            ad::NoGradGuard ng;
            slot = orig + opt.step;
            fp = pd.fn().value()[0];
            slot = orig - opt.step;
            fm = pd.fn().value()[0];
            slot = orig;
        }
        const double numeric = (fp - fm) / (2.0 * opt.step);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
        ++rep.probes;
        if (rel >= rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst = (li < pd.names.size() ? pd.names[li] : "input" + std::to_string(li)) + "[" +
                        std::to_string(idx) + "]: analytic=" + std::to_string(a) +
                        " numeric=" + std::to_string(numeric);
        }
    }
    for (auto& l : pf.leaves) l.zero_grad();
    return rep;
}

}  // namespace saat
