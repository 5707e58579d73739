#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "blocks.hpp"

namespace saat {

/// Upsampling stages of the sub-pixel reconstruction: x3 is one r=3 stage,
/// x2 and x4 are one or two r=2 stages.
inline std::vector<std::size_t> upsample_stages(std::size_t scale) {
    switch (scale) {
        case 2: return {2};
        case 3: return {3};
        case 4: return {2, 2};
        default: throw InvalidConfig("unsupported scale " + std::to_string(scale));
    }
}

/// Shallow conv -> alternating SWSAG/CWSAG body -> conv + global residual
/// -> pixel-shuffle reconstruction.
template <typename T>
class SaatModel {
   public:
    struct UpStage {
        std::size_t factor;
        ad::Var<T> w, b;
    };

    explicit SaatModel(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        const std::size_t C = cfg_.channels;
        conv_first_w_ = params_.add("conv_first.weight", trunc_normal_init<T>({C, 3, 3, 3}, rng));
        conv_first_b_ = params_.add("conv_first.bias", Tensor<T>::zeros({C}));
        std::size_t ns = 0, nc = 0;
        for (std::size_t i = 0; i < cfg_.n_groups(); ++i) {
            // Alternate spatial/channel groups, starting with spatial.
            const bool spatial = (i % 2 == 0 && ns < cfg_.n_swsag) || nc >= cfg_.n_cwsag;
            (spatial ? ns : nc)++;
            groups_.push_back(GroupParams<T>::create(params_, "groups." + std::to_string(i), cfg_,
                                                     spatial ? GroupKind::Spatial : GroupKind::Channel, rng));
        }
        conv_body_w_ = params_.add("conv_after_body.weight", trunc_normal_init<T>({C, C, 3, 3}, rng));
        conv_body_b_ = params_.add("conv_after_body.bias", Tensor<T>::zeros({C}));
        const auto stages = upsample_stages(cfg_.scale);
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const std::size_t r = stages[i];
            const std::string p = "upsample." + std::to_string(i);
            up_.push_back({r, params_.add(p + ".weight", trunc_normal_init<T>({C * r * r, C, 3, 3}, rng)),
                           params_.add(p + ".bias", Tensor<T>::zeros({C * r * r}))});
        }
        conv_last_w_ = params_.add("conv_last.weight", trunc_normal_init<T>({3, C, 3, 3}, rng));
        conv_last_b_ = params_.add("conv_last.bias", Tensor<T>::zeros({3}));
    }

    SaatModel(const SaatModel&) = delete;
    SaatModel& operator=(const SaatModel&) = delete;
    SaatModel(SaatModel&&) = default;
    SaatModel& operator=(SaatModel&&) = default;

    const ModelConfig& config() const { return cfg_; }
    ad::ParamStore<T>& params() { return params_; }
    const ad::ParamStore<T>& params() const { return params_; }
    const std::vector<GroupParams<T>>& groups() const { return groups_; }
    std::vector<GroupParams<T>>& groups() { return groups_; }

    /// Shallow features F0 of the normalized, window-padded input.
    ad::Var<T> shallow(const ad::Var<T>& x) const {
        return ad::conv2d(x, conv_first_w_, conv_first_b_, 1, 1);
    }

    /// F_dp = conv(body(F0)) + F0
    ad::Var<T> deep(const ad::Var<T>& f0) const {
        ad::Var<T> h = f0;
        for (const auto& g : groups_) h = group_forward(h, g);
        return ad::add(ad::conv2d(h, conv_body_w_, conv_body_b_, 1, 1), f0);
    }

    ad::Var<T> reconstruct(const ad::Var<T>& f) const {
        ad::Var<T> h = f;
        for (const auto& s : up_) h = ad::pixel_shuffle(ad::conv2d(h, s.w, s.b, 1, 1), s.factor);
        return ad::conv2d(h, conv_last_w_, conv_last_b_, 1, 1);
    }

    /// I_LR: N x 3 x H x W in [0, 1] -> N x 3 x sH x sW.
    ad::Var<T> forward(const ad::Var<T>& lr) const {
        if (lr.rank() != 4 || lr.dim(1) != 3) {
            throw InvalidShape("model input must be N x 3 x H x W, got " + shape_str(lr.shape()));
        }
        const std::size_t H = lr.dim(2), W = lr.dim(3), G = cfg_.window, s = cfg_.scale;
        auto x = ad::add_scalar(lr, static_cast<T>(-cfg_.img_mean));
        const std::size_t Hp = round_up(H, G), Wp = round_up(W, G);
        if (Hp != H || Wp != W) x = ad::pad2d(x, 0, Hp - H, 0, Wp - W, ad::PadMode::Reflect);
        auto out = reconstruct(deep(shallow(x)));
        if (Hp != H || Wp != W) out = ad::crop2d(out, 0, 0, H * s, W * s);
        return ad::add_scalar(out, static_cast<T>(cfg_.img_mean));
    }

    Tensor<T> infer(const Tensor<T>& lr) const {
        ad::NoGradGuard ng;
        return forward(ad::Var<T>::constant(lr)).value();
    }

   private:
    ModelConfig cfg_;
    ad::ParamStore<T> params_;
    ad::Var<T> conv_first_w_, conv_first_b_;
    std::vector<GroupParams<T>> groups_;
    ad::Var<T> conv_body_w_, conv_body_b_;
    std::vector<UpStage> up_;
    ad::Var<T> conv_last_w_, conv_last_b_;
};

}  // namespace saat
