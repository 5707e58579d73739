#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace saat {

/// 8-bit raster, row-major, interleaved samples (RGB order when 3 channels).
struct ImageBuffer {
    std::size_t width = 0, height = 0, channels = 3;
    std::vector<std::uint8_t> samples;

    ImageBuffer() = default;
    ImageBuffer(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), samples(w * h * c, fill) {
        if (c != 1 && c != 3) throw InvalidShape("images have 1 or 3 channels, got " + std::to_string(c));
    }

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return samples[(y * width + x) * channels + c]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
        return samples[(y * width + x) * channels + c];
    }

    bool operator==(const ImageBuffer&) const = default;
};

// ---------------------------------------------------------------------------
// File I/O

inline void save_ppm(const ImageBuffer& img, const std::string& path) {
    if (img.channels != 3) throw InvalidShape("PPM output needs 3 channels");
    std::string bytes = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    bytes.append(reinterpret_cast<const char*>(img.samples.data()), img.samples.size());
    io::write_file(path, bytes);
}

inline ImageBuffer decode_ppm(const std::string& bytes, const std::string& path) {
    std::size_t pos = 2;
    auto next_token = [&]() -> std::size_t {
        for (;;) {
            while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        std::size_t v = 0, digits = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
            ++digits;
        }
        if (digits == 0) throw IoError("truncated or malformed PPM header in '" + path + "'");
        return v;
    };
    const auto w = next_token(), h = next_token(), maxval = next_token();
    if (maxval != 255) throw IoError("unsupported PPM maxval " + std::to_string(maxval) + " in '" + path + "'");
    if (w == 0 || h == 0) throw IoError("empty PPM image '" + path + "'");
    ++pos;  // single whitespace before the raster
    if (bytes.size() < pos || bytes.size() - pos < w * h * 3) throw IoError("truncated PPM raster in '" + path + "'");
    ImageBuffer img(w, h, 3);
    std::memcpy(img.samples.data(), bytes.data() + pos, w * h * 3);
    return img;
}

inline ImageBuffer decode_png(const std::string& bytes, const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        throw IoError("cannot decode PNG '" + path + "': " + image.message);
    }
    const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
    image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    ImageBuffer img(image.width, image.height, gray ? 1 : 3);
    if (!png_image_finish_read(&image, nullptr, img.samples.data(), 0, nullptr)) {
        png_image_free(&image);
        throw IoError("cannot decode PNG '" + path + "': " + image.message);
    }
    return img;
}

inline void save_png(const ImageBuffer& img, const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, img.samples.data(), 0, nullptr)) {
        throw IoError("cannot write PNG '" + path + "': " + image.message);
    }
}

/// PNG or binary PPM (P6), detected from the file signature.
inline ImageBuffer load_image(const std::string& path) {
    const std::string bytes = io::read_file(path);
    static constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) return decode_png(bytes, path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes, path);
    throw IoError("unsupported image format: '" + path + "'");
}

/// Format chosen by extension: .png or .ppm.
inline void save_image(const ImageBuffer& img, const std::string& path) {
    auto ext = std::filesystem::path(path).extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") return save_png(img, path);
    if (ext == ".ppm") return save_ppm(img, path);
    throw IoError("unsupported output format '" + ext + "' for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Tensor conversion

/// 3-channel image -> 1 x 3 x H x W in [0, 1].
template <typename T>
Tensor<T> image_to_tensor(const ImageBuffer& img) {
    if (img.channels != 3) throw InvalidShape("image_to_tensor needs an RGB image");
    Tensor<T> t(Shape{1, 3, img.height, img.width});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x) t.at(0, c, y, x) = static_cast<T>(img.at(x, y, c)) / T(255);
    return t;
}

/// Sample `n` of an N x 3 x H x W tensor, clamped to [0, 1] and rounded.
template <typename T>
ImageBuffer tensor_to_image(const Tensor<T>& t, std::size_t n = 0) {
    if (t.rank() != 4 || t.dim(1) != 3) throw InvalidShape("tensor_to_image needs N x 3 x H x W, got " + shape_str(t.shape()));
    ImageBuffer img(t.dim(3), t.dim(2), 3);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x) {
                const double v = std::clamp(static_cast<double>(t.at(n, c, y, x)), 0.0, 1.0) * 255.0;
                img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(v));
            }
    return img;
}

// ---------------------------------------------------------------------------
// Color and resampling

/// BT.601 luma in [16, 235] per pixel, unrounded.
inline std::vector<double> rgb_to_y(const ImageBuffer& img) {
    if (img.channels != 3) throw InvalidShape("rgb_to_y needs an RGB image");
    std::vector<double> y(img.width * img.height);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = img.samples[i * 3] / 255.0, g = img.samples[i * 3 + 1] / 255.0,
                     b = img.samples[i * 3 + 2] / 255.0;
        y[i] = 16.0 + 65.481 * r + 128.553 * g + 24.966 * b;
    }
    return y;
}

/// Cubic convolution kernel with a = -0.5.
inline double cubic_kernel(double x) {
    const double ax = std::abs(x), ax2 = ax * ax, ax3 = ax2 * ax;
    if (ax <= 1.0) return 1.5 * ax3 - 2.5 * ax2 + 1.0;
    if (ax < 2.0) return -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0;
    return 0.0;
}

/// Taps for one output sample of a 1-D resize.
struct ResampleTaps {
    std::vector<std::size_t> index;
    std::vector<double> weight;
};

/// Per-output taps for resizing `in_len` samples to `out_len` with scale
/// factor `scale` (> 1 enlarges). Shrinking widens the kernel by 1/scale;
/// out-of-range taps clamp to the edge. Weights are normalized to sum to 1.
inline std::vector<ResampleTaps> bicubic_taps(std::size_t in_len, std::size_t out_len, double scale) {
    const bool shrink = scale < 1.0;
    const double kscale = shrink ? scale : 1.0;
    const double width = 4.0 / kscale;
    std::vector<ResampleTaps> taps(out_len);
    for (std::size_t i = 0; i < out_len; ++i) {
        const double u = (static_cast<double>(i) + 0.5) / scale - 0.5;
        const auto left = static_cast<long long>(std::floor(u - width / 2.0));
        const auto count = static_cast<long long>(std::ceil(width)) + 2;
        auto& t = taps[i];
        double total = 0;
        for (long long j = 0; j < count; ++j) {
            const long long src = left + j;
            const double w = kscale * cubic_kernel(kscale * (u - static_cast<double>(src)));
            if (w == 0.0) continue;
            const auto clamped = static_cast<std::size_t>(std::clamp<long long>(src, 0, static_cast<long long>(in_len) - 1));
            t.index.push_back(clamped);
            t.weight.push_back(w);
            total += w;
        }
        for (auto& w : t.weight) w /= total;
    }
    return taps;
}

/// Resizes planes of doubles (height x width x channels interleaved).
inline std::vector<double> bicubic_resize_plane(const std::vector<double>& src, std::size_t w, std::size_t h,
                                                std::size_t ch, std::size_t ow, std::size_t oh, double scale) {
    const auto tx = bicubic_taps(w, ow, scale);
    const auto ty = bicubic_taps(h, oh, scale);
    std::vector<double> tmp(h * ow * ch, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < ow; ++x)
            for (std::size_t c = 0; c < ch; ++c) {
                double s = 0;
                for (std::size_t k = 0; k < tx[x].index.size(); ++k) s += tx[x].weight[k] * src[(y * w + tx[x].index[k]) * ch + c];
                tmp[(y * ow + x) * ch + c] = s;
            }
    std::vector<double> out(oh * ow * ch, 0.0);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x)
            for (std::size_t c = 0; c < ch; ++c) {
                double s = 0;
                for (std::size_t k = 0; k < ty[y].index.size(); ++k) s += ty[y].weight[k] * tmp[(ty[y].index[k] * ow + x) * ch + c];
                out[(y * ow + x) * ch + c] = s;
            }
    return out;
}

/// Resize by scale_num / scale_den; output extents are ceil(len * num / den).
inline ImageBuffer bicubic_resize(const ImageBuffer& img, std::size_t scale_num, std::size_t scale_den) {
    if (scale_num == 0 || scale_den == 0) throw InvalidConfig("bicubic_resize: scale must be positive");
    const std::size_t ow = (img.width * scale_num + scale_den - 1) / scale_den;
    const std::size_t oh = (img.height * scale_num + scale_den - 1) / scale_den;
    if (ow == 0 || oh == 0) throw InvalidShape("bicubic_resize: output would be empty");
    if (scale_num == scale_den) return img;
    std::vector<double> src(img.samples.begin(), img.samples.end());
    const auto out = bicubic_resize_plane(src, img.width, img.height, img.channels, ow, oh,
                                          static_cast<double>(scale_num) / static_cast<double>(scale_den));
    ImageBuffer res(ow, oh, img.channels);
    for (std::size_t i = 0; i < out.size(); ++i) {
        res.samples[i] = static_cast<std::uint8_t>(std::clamp(std::lround(out[i]), 0L, 255L));
    }
    return res;
}

/// Crops so both extents are multiples of `m`.
inline ImageBuffer mod_crop(const ImageBuffer& img, std::size_t m) {
    const std::size_t w = img.width / m * m, h = img.height / m * m;
    if (w == img.width && h == img.height) return img;
    ImageBuffer out(w, h, img.channels);
    for (std::size_t y = 0; y < h; ++y)
        std::memcpy(&out.samples[y * w * img.channels], &img.samples[y * img.width * img.channels], w * img.channels);
    return out;
}

/// Deterministic RGB test card: smooth gradients, a few sinusoids and hard
/// edges, so it has both low- and high-frequency content.
inline ImageBuffer test_pattern(std::size_t w, std::size_t h, std::uint64_t seed = 0) {
    Rng rng(seed);
    double fx[3], fy[3], ph[3];
    for (int c = 0; c < 3; ++c) {
        fx[c] = rng.uniform(0.05, 0.35);
        fy[c] = rng.uniform(0.05, 0.35);
        ph[c] = rng.uniform(0.0, 6.28);
    }
    const double cx = rng.uniform(0.3, 0.7) * static_cast<double>(w), cy = rng.uniform(0.3, 0.7) * static_cast<double>(h);
    const double radius = 0.25 * static_cast<double>(std::min(w, h));
    ImageBuffer img(w, h, 3);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            const bool disk = dx * dx + dy * dy < radius * radius;
            const bool stripe = ((x / 6) % 2) == 0 && y > h / 2;
            for (std::size_t c = 0; c < 3; ++c) {
                double v = 0.5 + 0.25 * std::sin(fx[c] * static_cast<double>(x) + fy[c] * static_cast<double>(y) + ph[c]);
                v += 0.2 * (static_cast<double>(x) / static_cast<double>(w) - 0.5);
                if (disk) v = 1.0 - v;
                if (stripe) v *= 0.6;
                img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
    return img;
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {

/// Planes compared by the metrics: the Y channel, or each RGB channel.
inline std::vector<std::vector<double>> metric_planes(const ImageBuffer& img, std::size_t shave, bool y_only) {
    if (img.width <= 2 * shave || img.height <= 2 * shave) throw InvalidShape("image too small for border shave");
    const std::size_t w = img.width - 2 * shave, h = img.height - 2 * shave;
    std::vector<std::vector<double>> planes;
    if (y_only && img.channels == 3) {
        const auto y = rgb_to_y(img);
        std::vector<double> p(w * h);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) p[r * w + c] = y[(r + shave) * img.width + c + shave];
        planes.push_back(std::move(p));
        return planes;
    }
    for (std::size_t ch = 0; ch < img.channels; ++ch) {
        std::vector<double> p(w * h);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) p[r * w + c] = img.at(c + shave, r + shave, ch);
        planes.push_back(std::move(p));
    }
    return planes;
}

inline void check_same_dims(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
        throw InvalidShape(std::string(what) + ": image dimensions differ (" + std::to_string(a.width) + "x" +
                           std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " +
                           std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
                           std::to_string(b.channels) + ")");
    }
}

}  // namespace detail

/// 10 log10(255^2 / MSE) over the shaved region; +inf when MSE is zero.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b, std::size_t shave, bool y_only) {
    detail::check_same_dims(a, b, "psnr");
    const auto pa = detail::metric_planes(a, shave, y_only);
    const auto pb = detail::metric_planes(b, shave, y_only);
    double se = 0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < pa.size(); ++p)
        for (std::size_t i = 0; i < pa[p].size(); ++i) {
            const double d = pa[p][i] - pb[p][i];
            se += d * d;
            ++n;
        }
    const double mse = se / static_cast<double>(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

inline std::vector<double> gaussian_window(std::size_t size = 11, double sigma = 1.5) {
    std::vector<double> g(size * size);
    const double c = static_cast<double>(size / 2);
    double total = 0;
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
            g[y * size + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            total += g[y * size + x];
        }
    for (auto& v : g) v /= total;
    return g;
}

/// Single-scale SSIM of two planes with an 11x11 Gaussian window, averaged
/// over the window positions that fit entirely inside the plane.
inline double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, std::size_t w, std::size_t h) {
    constexpr std::size_t K = 11;
    if (w < K || h < K) throw InvalidShape("ssim: image smaller than the 11x11 window");
    const auto g = gaussian_window(K, 1.5);
    const double C1 = (0.01 * 255) * (0.01 * 255), C2 = (0.03 * 255) * (0.03 * 255);
    double total = 0;
    for (std::size_t y = 0; y + K <= h; ++y)
        for (std::size_t x = 0; x + K <= w; ++x) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const double wt = g[ky * K + kx];
                    const double va = a[(y + ky) * w + x + kx], vb = b[(y + ky) * w + x + kx];
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    return total / static_cast<double>((w - K + 1) * (h - K + 1));
}

inline double ssim(const ImageBuffer& a, const ImageBuffer& b, std::size_t shave, bool y_only) {
    detail::check_same_dims(a, b, "ssim");
    const auto pa = detail::metric_planes(a, shave, y_only);
    const auto pb = detail::metric_planes(b, shave, y_only);
    const std::size_t w = a.width - 2 * shave, h = a.height - 2 * shave;
    double s = 0;
    for (std::size_t p = 0; p < pa.size(); ++p) s += ssim_plane(pa[p], pb[p], w, h);
    return s / static_cast<double>(pa.size());
}

// ---------------------------------------------------------------------------
// Evaluation report

struct EvalRow {
    std::string image;
    double psnr = 0;
    double ssim = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    bool y_only = true;
    std::size_t shave = 0;

    double mean_psnr() const {
        double s = 0;
        for (const auto& r : rows) s += r.psnr;
        return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
    }
    double mean_ssim() const {
        double s = 0;
        for (const auto& r : rows) s += r.ssim;
        return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
    }

    static std::string format_value(double v) {
        if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        return buf;
    }

    /// Tab-separated: fixed header, one row per image, then the mean.
    std::string to_tsv() const {
        std::ostringstream os;
        os << "image\tpsnr_db\tssim\n";
        for (const auto& r : rows) os << r.image << '\t' << format_value(r.psnr) << '\t' << format_value(r.ssim) << '\n';
        os << "mean\t" << format_value(mean_psnr()) << '\t' << format_value(mean_ssim()) << '\n';
        os << "# protocol: " << (y_only ? "y-channel" : "rgb") << ", shave=" << shave << '\n';
        return os.str();
    }
};

/// Sorted PNG files in <root>/HR.
inline std::vector<std::filesystem::path> list_hr_images(const std::string& root) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(root) / "HR";
    if (!fs::is_directory(dir)) throw IoError("dataset directory '" + dir.string() + "' does not exist");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (e.is_regular_file() && (ext == ".png" || ext == ".ppm")) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw IoError("no images found in '" + dir.string() + "'");
    return out;
}

/// LR counterpart of an HR image: <root>/LRx{s}/<name> if present, else a
/// bicubic downscale of the mod-cropped HR image.
inline ImageBuffer load_or_make_lr(const std::string& root, const std::filesystem::path& hr_path,
                                   const ImageBuffer& hr_cropped, std::size_t scale) {
    const auto lr_path = std::filesystem::path(root) / ("LRx" + std::to_string(scale)) / hr_path.filename();
    if (std::filesystem::exists(lr_path)) {
        auto lr = load_image(lr_path.string());
        if (lr.width * scale != hr_cropped.width || lr.height * scale != hr_cropped.height) {
            throw InvalidShape("LR image '" + lr_path.string() + "' does not match HR size at scale " +
                               std::to_string(scale));
        }
        return lr;
    }
    return bicubic_resize(hr_cropped, 1, scale);
}

}  // namespace saat
