#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"

namespace saat {

namespace text {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

/// Shortest representation that parses back to the same double.
inline std::string format_real(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

inline double parse_real(const std::string& key, const std::string& s) {
    double v = 0;
    const auto t = trim(s);
    auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || end != t.data() + t.size() || !std::isfinite(v)) {
        throw InvalidConfig("key '" + key + "': expected a real number, got '" + s + "'");
    }
    return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    const auto t = trim(s);
    auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || end != t.data() + t.size()) {
        throw InvalidConfig("key '" + key + "': expected a non-negative integer, got '" + s + "'");
    }
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    const auto t = trim(s);
    if (t == "true" || t == "1") return true;
    if (t == "false" || t == "0") return false;
    throw InvalidConfig("key '" + key + "': expected true/false, got '" + s + "'");
}

inline std::vector<std::size_t> parse_uint_list(const std::string& key, const std::string& s) {
    std::vector<std::size_t> out;
    const auto t = trim(s);
    if (t.empty()) return out;
    std::stringstream ss(t);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<std::size_t>(parse_uint(key, item)));
    return out;
}

template <typename Seq>
std::string join(const Seq& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(xs[i]);
    }
    return s;
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are errors.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view content) {
    std::vector<std::pair<std::string, std::string>> out;
    std::map<std::string, int> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= content.size()) {
        auto nl = content.find('\n', pos);
        if (nl == std::string_view::npos) nl = content.size();
        std::string line(content.substr(pos, nl - pos));
        pos = nl + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) {
            if (nl == content.size()) break;
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw InvalidConfig("line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
        }
        auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        if (key.empty()) throw InvalidConfig("line " + std::to_string(line_no) + ": empty key");
        if (seen[key]++) throw InvalidConfig("duplicate key '" + key + "'");
        out.emplace_back(std::move(key), std::move(value));
        if (nl == content.size()) break;
    }
    return out;
}

}  // namespace text

/// Architectural hyperparameters. Defaults are the full-size network.
struct ModelConfig {
    std::size_t scale = 4;
    std::size_t channels = 180;
    std::size_t heads = 6;
    std::size_t window = 16;
    std::size_t n_swsag = 3;
    std::size_t n_cwsag = 3;
    std::vector<std::size_t> shifts = {0, 8, 16, 24};
    double alpha = 0.01;
    double beta = 0.01;
    double mu = 0.5;
    std::size_t k_groups = 4;
    std::vector<std::size_t> smsa_kernels = {3, 5, 7, 9};
    double mlp_ratio = 2.0;
    bool conv_ffn = true;
    bool eca_additive = false;
    std::size_t eca_reduction = 4;
    double img_mean = 0.5;

    std::size_t blocks_per_group() const { return shifts.size(); }
    std::size_t n_groups() const { return n_swsag + n_cwsag; }
    std::size_t mlp_hidden() const {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(mlp_ratio * static_cast<double>(channels))));
    }

    /// Small network used for desk-scale training and verification.
    static ModelConfig toy(std::size_t scale = 2) {
        ModelConfig c;
        c.scale = scale;
        c.channels = 32;
        c.heads = 2;
        c.window = 8;
        c.n_swsag = 1;
        c.n_cwsag = 1;
        c.shifts = {0, 4};
        return c;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw InvalidConfig("model config: " + m); };
        if (scale < 2 || scale > 4) fail("scale must be 2, 3 or 4, got " + std::to_string(scale));
        if (channels == 0 || heads == 0 || channels % heads != 0) {
            fail("channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
        }
        if (k_groups == 0 || channels % k_groups != 0) {
            fail("channels " + std::to_string(channels) + " not divisible by k_groups " + std::to_string(k_groups));
        }
        if (window == 0) fail("window must be >= 1");
        if (shifts.empty() && n_groups() > 0) fail("shifts must list one entry per block");
        if (smsa_kernels.size() != k_groups) {
            fail("smsa_kernels needs " + std::to_string(k_groups) + " entries, got " +
                 std::to_string(smsa_kernels.size()));
        }
        for (auto k : smsa_kernels) {
            if (k % 2 == 0) fail("smsa kernel sizes must be odd, got " + std::to_string(k));
        }
        if (alpha < 0 || beta < 0) fail("alpha and beta must be non-negative");
        const double extra = mu * static_cast<double>(window);
        if (mu < 0 || std::abs(extra - std::round(extra)) > 1e-9) {
            fail("mu * window must be a non-negative integer, got " + text::format_real(extra));
        }
        if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
        if (eca_reduction == 0) fail("eca_reduction must be >= 1");
    }

    /// Ordered `key=value` lines; the inverse of apply().
    std::vector<std::pair<std::string, std::string>> to_pairs() const {
        return {
            {"scale", std::to_string(scale)},
            {"channels", std::to_string(channels)},
            {"heads", std::to_string(heads)},
            {"window", std::to_string(window)},
            {"n_swsag", std::to_string(n_swsag)},
            {"n_cwsag", std::to_string(n_cwsag)},
            {"shifts", text::join(shifts)},
            {"alpha", text::format_real(alpha)},
            {"beta", text::format_real(beta)},
            {"mu", text::format_real(mu)},
            {"k_groups", std::to_string(k_groups)},
            {"smsa_kernels", text::join(smsa_kernels)},
            {"mlp_ratio", text::format_real(mlp_ratio)},
            {"conv_ffn", conv_ffn ? "true" : "false"},
            {"eca_additive", eca_additive ? "true" : "false"},
            {"eca_reduction", std::to_string(eca_reduction)},
            {"img_mean", text::format_real(img_mean)},
        };
    }

    /// Sets one field by name; unknown keys are rejected.
    void apply(const std::string& key, const std::string& v) {
        if (key == "scale") scale = text::parse_uint(key, v);
        else if (key == "channels") channels = text::parse_uint(key, v);
        else if (key == "heads") heads = text::parse_uint(key, v);
        else if (key == "window") window = text::parse_uint(key, v);
        else if (key == "n_swsag") n_swsag = text::parse_uint(key, v);
        else if (key == "n_cwsag") n_cwsag = text::parse_uint(key, v);
        else if (key == "shifts") shifts = text::parse_uint_list(key, v);
        else if (key == "alpha") alpha = text::parse_real(key, v);
        else if (key == "beta") beta = text::parse_real(key, v);
        else if (key == "mu") mu = text::parse_real(key, v);
        else if (key == "k_groups") k_groups = text::parse_uint(key, v);
        else if (key == "smsa_kernels") smsa_kernels = text::parse_uint_list(key, v);
        else if (key == "mlp_ratio") mlp_ratio = text::parse_real(key, v);
        else if (key == "conv_ffn") conv_ffn = text::parse_bool(key, v);
        else if (key == "eca_additive") eca_additive = text::parse_bool(key, v);
        else if (key == "eca_reduction") eca_reduction = text::parse_uint(key, v);
        else if (key == "img_mean") img_mean = text::parse_real(key, v);
        else throw InvalidConfig("unknown model key '" + key + "'");
    }

    std::string serialize() const {
        std::string s;
        for (const auto& [k, v] : to_pairs()) s += k + "=" + v + "\n";
        return s;
    }

    static ModelConfig deserialize(std::string_view text_block) {
        ModelConfig c;
        for (const auto& [k, v] : text::parse_key_values(text_block)) c.apply(k, v);
        c.validate();
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

}  // namespace saat
