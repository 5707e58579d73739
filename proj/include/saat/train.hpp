#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "checkpoint.hpp"
#include "image.hpp"

namespace saat {

// ---------------------------------------------------------------------------
// Schedule

inline constexpr std::size_t kReferenceSteps = 500000;
inline const std::vector<std::size_t> kReferenceMilestones = {250000, 400000, 450000, 475000};

/// base_lr / 2^(number of milestones <= step)
inline double lr_at(std::size_t step, double base_lr, const std::vector<std::size_t>& milestones) {
    for (std::size_t i = 1; i < milestones.size(); ++i) {
        if (milestones[i] <= milestones[i - 1]) throw InvalidConfig("milestones must be strictly increasing");
    }
    std::size_t halvings = 0;
    for (auto m : milestones) halvings += m <= step ? 1 : 0;
    return std::ldexp(base_lr, -static_cast<int>(halvings));
}

/// The reference milestones moved to the same fractional positions of a
/// shorter run. Collisions are nudged forward to keep the list increasing.
inline std::vector<std::size_t> scaled_milestones(std::size_t total_steps) {
    if (total_steps >= kReferenceSteps) return kReferenceMilestones;
    std::vector<std::size_t> out;
    for (auto m : kReferenceMilestones) {
        auto s = static_cast<std::size_t>(std::llround(static_cast<double>(m) / kReferenceSteps * total_steps));
        if (!out.empty() && s <= out.back()) s = out.back() + 1;
        out.push_back(s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
struct AdamState {
    std::size_t step = 0;
    std::vector<Tensor<T>> m, v;
    double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;

    void init(const ad::ParamStore<T>& params) {
        step = 0;
        m.clear();
        v.clear();
        for (const auto& e : params.entries()) {
            m.push_back(Tensor<T>::zeros(e.var.shape()));
            v.push_back(Tensor<T>::zeros(e.var.shape()));
        }
    }
};

/// Bias-corrected Adam. Parameters with no gradient are treated as having a
/// zero gradient.
template <typename T>
void adam_step(ad::ParamStore<T>& params, AdamState<T>& st, double lr) {
    auto& entries = params.entries();
    if (st.m.size() != entries.size()) st.init(params);
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto& var = entries[i].var;
        auto& p = var.mutable_value();
        const Tensor<T>& g = var.grad();
        auto& m = st.m[i];
        auto& v = st.v[i];
        if (m.shape() != p.shape()) throw ContractViolation("adam: moment shape differs for '" + entries[i].name + "'");
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
            const double mj = st.beta1 * static_cast<double>(m[j]) + (1.0 - st.beta1) * gj;
            const double vj = st.beta2 * static_cast<double>(v[j]) + (1.0 - st.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double mhat = static_cast<double>(m[j]) / c1;
            const double vhat = static_cast<double>(v[j]) / c2;
            p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * mhat / (std::sqrt(vhat) + st.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation and patch sampling

inline ImageBuffer flip_horizontal(const ImageBuffer& img) {
    ImageBuffer out(img.width, img.height, img.channels);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c) out.at(img.width - 1 - x, y, c) = img.at(x, y, c);
    return out;
}

inline ImageBuffer flip_vertical(const ImageBuffer& img) {
    ImageBuffer out(img.width, img.height, img.channels);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c) out.at(x, img.height - 1 - y, c) = img.at(x, y, c);
    return out;
}

/// Counter-clockwise quarter turn.
inline ImageBuffer rotate90(const ImageBuffer& img) {
    ImageBuffer out(img.height, img.width, img.channels);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c) out.at(y, img.width - 1 - x, c) = img.at(x, y, c);
    return out;
}

inline ImageBuffer crop(const ImageBuffer& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
    if (x0 + w > img.width || y0 + h > img.height) throw InvalidShape("crop outside image");
    ImageBuffer out(w, h, img.channels);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
    return out;
}

struct Augment {
    bool hflip = false, vflip = false, rot90 = false;
};

inline ImageBuffer apply_augment(ImageBuffer img, const Augment& a) {
    if (a.hflip) img = flip_horizontal(img);
    if (a.vflip) img = flip_vertical(img);
    if (a.rot90) img = rotate90(img);
    return img;
}

template <typename T>
struct Batch {
    Tensor<T> lr, hr;
};

/// Draws aligned LR/HR patch pairs. Each HR image is mod-cropped to the scale
/// and its LR counterpart is the bicubic downscale of the whole image, so an
/// LR crop at (x, y) lines up with the HR crop at (s x, s y).
class PatchSampler {
   public:
    PatchSampler(const std::vector<ImageBuffer>& hr_images, std::size_t scale, std::size_t hr_patch, bool augment,
                 std::uint64_t seed, std::ostream* warn = &std::cerr)
        : scale_(scale), hr_patch_(hr_patch), augment_(augment), rng_(seed) {
        if (hr_patch == 0 || hr_patch % scale != 0) {
            throw InvalidConfig("patch size " + std::to_string(hr_patch) + " must be a positive multiple of scale " +
                                std::to_string(scale));
        }
        for (std::size_t i = 0; i < hr_images.size(); ++i) {
            if (hr_images[i].channels != 3) throw InvalidShape("training images must be RGB");
            auto hr = mod_crop(hr_images[i], scale);
            if (hr.width < hr_patch || hr.height < hr_patch) {
                if (warn) {
                    *warn << "warning: skipping training image " << i << " (" << hr_images[i].width << "x"
                          << hr_images[i].height << ") smaller than patch " << hr_patch << "\n";
                }
                continue;
            }
            lr_.push_back(bicubic_resize(hr, 1, scale));
            hr_.push_back(std::move(hr));
        }
        if (hr_.empty()) throw InvalidConfig("no training image is large enough for patch size " + std::to_string(hr_patch));
    }

    std::size_t size() const { return hr_.size(); }
    std::size_t scale() const { return scale_; }
    std::size_t hr_patch() const { return hr_patch_; }
    Rng& rng() { return rng_; }
    const Rng& rng() const { return rng_; }

    /// One aligned, identically augmented pair.
    std::pair<ImageBuffer, ImageBuffer> sample_pair() {
        const std::size_t idx = rng_.below(hr_.size());
        const auto& lr = lr_[idx];
        const std::size_t lp = hr_patch_ / scale_;
        const std::size_t x = rng_.below(lr.width - lp + 1), y = rng_.below(lr.height - lp + 1);
        auto lr_patch = crop(lr, x, y, lp, lp);
        auto hr_patch = crop(hr_[idx], x * scale_, y * scale_, hr_patch_, hr_patch_);
        if (augment_) {
            Augment a;
            a.hflip = rng_.coin();
            a.vflip = rng_.coin();
            a.rot90 = rng_.coin();
            lr_patch = apply_augment(std::move(lr_patch), a);
            hr_patch = apply_augment(std::move(hr_patch), a);
        }
        return {std::move(lr_patch), std::move(hr_patch)};
    }

    template <typename T>
    Batch<T> sample_batch(std::size_t batch) {
        const std::size_t lp = hr_patch_ / scale_;
        Batch<T> b{Tensor<T>(Shape{batch, 3, lp, lp}), Tensor<T>(Shape{batch, 3, hr_patch_, hr_patch_})};
        for (std::size_t n = 0; n < batch; ++n) {
            auto [lr, hr] = sample_pair();
            copy_into(image_to_tensor<T>(lr), b.lr, n);
            copy_into(image_to_tensor<T>(hr), b.hr, n);
        }
        return b;
    }

   private:
    template <typename T>
    static void copy_into(const Tensor<T>& one, Tensor<T>& batch, std::size_t n) {
        const std::size_t per = one.numel();
        std::copy(one.data().begin(), one.data().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(n * per));
    }

    std::size_t scale_, hr_patch_;
    bool augment_;
    Rng rng_;
    std::vector<ImageBuffer> hr_, lr_;
};

// ---------------------------------------------------------------------------
// Run configuration

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t batch = 1;
    std::uint64_t seed = 0;
    double lr = 2e-4;
    std::optional<std::vector<std::size_t>> milestones;  // absent: reference milestones scaled to `steps`
    std::size_t patch = 64;
    bool augment = true;
    std::size_t log_every = 1;
    std::size_t state_every = 0;
    double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;

    std::vector<std::size_t> effective_milestones() const { return milestones ? *milestones : scaled_milestones(steps); }
};

struct RunConfig {
    ModelConfig model = ModelConfig::toy(2);
    TrainConfig train;
    std::string train_root;
    std::string eval_root;
    std::string checkpoint;
    std::string out_dir = ".";

    void apply(const std::string& full_key, const std::string& v) {
        const auto dot = full_key.find('.');
        if (dot == std::string::npos) throw InvalidConfig("config key '" + full_key + "' needs a section prefix");
        const auto section = full_key.substr(0, dot), key = full_key.substr(dot + 1);
        if (section == "model") {
            try {
                model.apply(key, v);
            } catch (const InvalidConfig&) {
                throw InvalidConfig("unknown or invalid config key '" + full_key + "' = '" + v + "'");
            }
        } else if (section == "train") {
            auto& t = train;
            if (key == "steps") t.steps = text::parse_uint(full_key, v);
            else if (key == "batch") t.batch = text::parse_uint(full_key, v);
            else if (key == "seed") t.seed = text::parse_uint(full_key, v);
            else if (key == "lr") t.lr = text::parse_real(full_key, v);
            else if (key == "milestones") t.milestones = text::parse_uint_list(full_key, v);
            else if (key == "patch") t.patch = text::parse_uint(full_key, v);
            else if (key == "augment") t.augment = text::parse_bool(full_key, v);
            else if (key == "log_every") t.log_every = text::parse_uint(full_key, v);
            else if (key == "state_every") t.state_every = text::parse_uint(full_key, v);
            else if (key == "beta1") t.beta1 = text::parse_real(full_key, v);
            else if (key == "beta2") t.beta2 = text::parse_real(full_key, v);
            else if (key == "eps") t.eps = text::parse_real(full_key, v);
            else throw InvalidConfig("unknown config key '" + full_key + "'");
        } else if (section == "data") {
            if (key == "train_root") train_root = v;
            else if (key == "eval_root") eval_root = v;
            else throw InvalidConfig("unknown config key '" + full_key + "'");
        } else if (section == "io") {
            if (key == "checkpoint") checkpoint = v;
            else if (key == "out_dir") out_dir = v;
            else throw InvalidConfig("unknown config key '" + full_key + "'");
        } else {
            throw InvalidConfig("unknown config section '" + section + "' in key '" + full_key + "'");
        }
    }

    void validate() const {
        model.validate();
        if (train.batch == 0) throw InvalidConfig("train.batch must be >= 1");
        if (train.log_every == 0) throw InvalidConfig("train.log_every must be >= 1");
        if (train.lr <= 0) throw InvalidConfig("train.lr must be positive");
        if (train.patch % model.scale != 0) {
            throw InvalidConfig("train.patch must be a multiple of model.scale");
        }
        lr_at(0, train.lr, train.effective_milestones());
    }

    static RunConfig parse(std::string_view content) {
        RunConfig rc;
        for (const auto& [k, v] : text::parse_key_values(content)) rc.apply(k, v);
        rc.validate();
        return rc;
    }

    static RunConfig load(const std::string& path) { return parse(io::read_file(path)); }
};

// ---------------------------------------------------------------------------
// Training loop

struct TraceEntry {
    std::size_t step;
    double lr;
    double l1;
};

inline std::string format_trace_line(const TraceEntry& e) {
    return std::to_string(e.step) + "\t" + text::format_real(e.lr) + "\t" + text::format_real(e.l1) + "\n";
}

inline constexpr char kStateMagic[8] = {'S', 'A', 'A', 'T', 'S', 'T', 'A', 'T'};

/// Owns a model, its optimizer state and the patch sampler. Everything that
/// influences future steps is captured by save_state(), so a resumed run
/// continues bit-for-bit.
template <typename T>
class Trainer {
   public:
    Trainer(const ModelConfig& model_cfg, const TrainConfig& cfg, const std::vector<ImageBuffer>& images,
            std::ostream* warn = &std::cerr)
        : cfg_(cfg),
          milestones_(cfg.effective_milestones()),
          model_(model_cfg, cfg.seed),
          sampler_(images, model_cfg.scale, cfg.patch, cfg.augment, cfg.seed ^ 0x9e3779b97f4a7c15ULL, warn) {
        adam_.beta1 = cfg.beta1;
        adam_.beta2 = cfg.beta2;
        adam_.eps = cfg.eps;
        adam_.init(model_.params());
    }

    SaatModel<T>& model() { return model_; }
    const SaatModel<T>& model() const { return model_; }
    std::size_t step() const { return adam_.step; }
    const std::vector<std::size_t>& milestones() const { return milestones_; }
    const TrainConfig& config() const { return cfg_; }

    /// One update. Returns the loss measured before the update.
    TraceEntry train_step() {
        const std::size_t step = adam_.step;
        const double lr = lr_at(step, cfg_.lr, milestones_);
        auto batch = sampler_.template sample_batch<T>(cfg_.batch);
        model_.params().zero_grad();
        auto pred = model_.forward(ad::Var<T>::constant(batch.lr));
        auto loss = ad::l1_loss(pred, ad::Var<T>::constant(batch.hr));
        const double l1 = static_cast<double>(loss.value().item());
        if (!std::isfinite(l1)) throw NonFiniteLoss(diagnose(step, lr, l1));
        ad::backward(loss);
        adam_step(model_.params(), adam_, lr);
        return {step, lr, l1};
    }

    /// Runs until `cfg.steps` updates have been made, calling `on_entry` for
    /// every logged step and `on_state` whenever a state snapshot is due.
    template <typename OnEntry, typename OnState>
    void run(OnEntry&& on_entry, OnState&& on_state) {
        while (adam_.step < cfg_.steps) {
            const auto e = train_step();
            if (e.step % cfg_.log_every == 0 || adam_.step == cfg_.steps) on_entry(e);
            if (cfg_.state_every && adam_.step % cfg_.state_every == 0) on_state(adam_.step);
        }
    }

    std::vector<TraceEntry> run() {
        std::vector<TraceEntry> trace;
        run([&](const TraceEntry& e) { trace.push_back(e); }, [](std::size_t) {});
        return trace;
    }

    std::string serialize_state() const {
        io::ByteWriter w;
        w.bytes(kStateMagic, sizeof(kStateMagic));
        w.u32(static_cast<std::uint32_t>(sizeof(T)));
        w.str(model_.config().serialize());
        w.u64(adam_.step);
        w.str(sampler_.rng().state());
        const auto& entries = model_.params().entries();
        w.u32(static_cast<std::uint32_t>(entries.size()));
        auto put = [&](const Tensor<T>& t) {
            w.u64(t.numel());
            w.bytes(t.ptr(), t.numel() * sizeof(T));
        };
        for (std::size_t i = 0; i < entries.size(); ++i) {
            w.str(entries[i].name);
            put(entries[i].var.value());
            put(adam_.m[i]);
            put(adam_.v[i]);
        }
        return std::move(w.buffer());
    }

    void load_state(std::string_view bytes) {
        io::ByteReader r(bytes);
        const auto magic = r.bytes(sizeof(kStateMagic), "magic");
        if (std::memcmp(magic.data(), kStateMagic, sizeof(kStateMagic)) != 0) {
            throw CorruptCheckpoint("corrupt training state: bad magic");
        }
        if (r.u32("precision") != sizeof(T)) throw ShapeMismatch("training state was written at a different precision");
        const auto cfg = ModelConfig::deserialize(r.str("config"));
        if (!(cfg == model_.config())) throw ShapeMismatch("training state was written for a different model config");
        const auto step = r.u64("step");
        const auto rng_state = r.str("rng");
        auto& entries = model_.params().entries();
        if (r.u32("count") != entries.size()) throw ShapeMismatch("training state parameter count differs");
        auto get = [&](Tensor<T>& t, const std::string& name) {
            if (r.u64("numel") != t.numel()) throw ShapeMismatch("training state: size of '" + name + "' differs");
            const auto raw = r.bytes(t.numel() * sizeof(T), "tensor");
            std::memcpy(t.ptr(), raw.data(), raw.size());
        };
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto name = r.str("name");
            if (name != entries[i].name) {
                throw ShapeMismatch("training state: expected '" + entries[i].name + "', found '" + name + "'");
            }
            get(entries[i].var.mutable_value(), name);
            get(adam_.m[i], name);
            get(adam_.v[i], name);
        }
        if (r.remaining() != 0) throw CorruptCheckpoint("corrupt training state: trailing bytes");
        adam_.step = step;
        sampler_.rng().set_state(rng_state);
    }

    void save_state(const std::string& path) const { io::write_file(path, serialize_state()); }
    void load_state_file(const std::string& path) { load_state(io::read_file(path)); }

   private:
    std::string diagnose(std::size_t step, double lr, double l1) const {
        std::string s = "non-finite loss " + text::format_real(l1) + " at step " + std::to_string(step) +
                        " (lr " + text::format_real(lr) + ")";
        for (const auto& e : model_.params().entries()) {
            double mx = 0;
            bool finite = true;
            for (auto v : e.var.value().data()) {
                if (!std::isfinite(static_cast<double>(v))) finite = false;
                mx = std::max(mx, std::abs(static_cast<double>(v)));
            }
            s += "\n  " + e.name + (finite ? "" : " NON-FINITE") + " max|w|=" + text::format_real(mx);
        }
        return s;
    }

    TrainConfig cfg_;
    std::vector<std::size_t> milestones_;
    SaatModel<T> model_;
    PatchSampler sampler_;
    AdamState<T> adam_;
};

}  // namespace saat
