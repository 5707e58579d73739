#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include "model.hpp"

// Checkpoint layout (all integers little-endian):
//   "SAATCKPT" | u32 version | u32 config_len | config (key=value lines)
//   u32 count | count x { u32 name_len | name | u32 rank | u32 extents[rank] | u64 offset }
//   payload: float32 values, offset in bytes from the start of the payload

namespace saat {

inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'A', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {

class ByteWriter {
   public:
    void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::string& buffer() { return buf_; }

   private:
    template <typename U>
    void le(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    std::string buf_;
};

class ByteReader {
   public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n) {
            throw CorruptCheckpoint(std::string("corrupt checkpoint: truncated while reading ") + what);
        }
    }
    std::string_view bytes(std::size_t n, const char* what) {
        need(n, what);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint32_t u32(const char* what) { return le<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return le<std::uint64_t>(what); }
    float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
    std::string str(const char* what) {
        const auto n = u32(what);
        return std::string(bytes(n, what));
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

   private:
    template <typename U>
    U le(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return v;
    }
    std::string_view data_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace io

struct ManifestEntry {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
};

struct CheckpointData {
    ModelConfig config;
    std::vector<ManifestEntry> manifest;
    std::vector<float> payload;
};

template <typename T>
std::string serialize_checkpoint(const SaatModel<T>& model) {
    io::ByteWriter w;
    w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.u32(kCheckpointVersion);
    w.str(model.config().serialize());
    const auto& entries = model.params().entries();
    w.u32(static_cast<std::uint32_t>(entries.size()));
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        w.str(e.name);
        w.u32(static_cast<std::uint32_t>(e.var.rank()));
        for (auto d : e.var.shape()) w.u32(static_cast<std::uint32_t>(d));
        w.u64(offset);
        offset += e.var.numel() * 4;
    }
    for (const auto& e : entries)
        for (auto v : e.var.value().data()) w.f32(static_cast<float>(v));
    return std::move(w.buffer());
}

inline CheckpointData parse_checkpoint(std::string_view bytes) {
    io::ByteReader r(bytes);
    const auto magic = r.bytes(sizeof(kCheckpointMagic), "magic");
    if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw CorruptCheckpoint("corrupt checkpoint: bad magic");
    }
    const auto version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw CorruptCheckpoint("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                std::to_string(kCheckpointVersion) + ")");
    }
    CheckpointData ck;
    try {
        ck.config = ModelConfig::deserialize(r.str("config"));
    } catch (const InvalidConfig& e) {
        throw CorruptCheckpoint(std::string("corrupt checkpoint: bad config block: ") + e.what());
    }
    const auto count = r.u32("manifest count");
    std::uint64_t expected_offset = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        ManifestEntry e;
        e.name = r.str("manifest name");
        const auto rank = r.u32("manifest rank");
        if (rank == 0 || rank > 8) throw CorruptCheckpoint("corrupt checkpoint: bad rank for '" + e.name + "'");
        for (std::uint32_t d = 0; d < rank; ++d) {
            const auto ext = r.u32("manifest extent");
            if (ext == 0) throw CorruptCheckpoint("corrupt checkpoint: zero extent for '" + e.name + "'");
            e.shape.push_back(ext);
        }
        e.offset = r.u64("manifest offset");
        if (e.offset != expected_offset) {
            throw CorruptCheckpoint("corrupt checkpoint: offset of '" + e.name + "' is " + std::to_string(e.offset) +
                                    ", expected " + std::to_string(expected_offset));
        }
        expected_offset += shape_numel(e.shape) * 4;
        ck.manifest.push_back(std::move(e));
    }
    if (r.remaining() != expected_offset) {
        throw CorruptCheckpoint("corrupt checkpoint: payload holds " + std::to_string(r.remaining()) +
                                " bytes, manifest requires " + std::to_string(expected_offset));
    }
    ck.payload.resize(expected_offset / 4);
    for (auto& v : ck.payload) v = r.f32("payload");
    return ck;
}

/// Copies checkpoint values into an existing model after checking the
/// manifest against it, name by name and shape by shape.
template <typename T>
void load_parameters(SaatModel<T>& model, const CheckpointData& ck) {
    auto& entries = model.params().entries();
    std::string diff;
    std::size_t ndiff = 0;
    const std::size_t n = std::max(entries.size(), ck.manifest.size());
    for (std::size_t i = 0; i < n; ++i) {
        std::string line;
        if (i >= entries.size()) {
            line = "parameter '" + ck.manifest[i].name + "' present in checkpoint but not in model";
        } else if (i >= ck.manifest.size()) {
            line = "parameter '" + entries[i].name + "' missing from checkpoint";
        } else if (entries[i].name != ck.manifest[i].name) {
            line = "parameter #" + std::to_string(i) + ": checkpoint '" + ck.manifest[i].name + "' vs model '" +
                   entries[i].name + "'";
        } else if (entries[i].var.shape() != ck.manifest[i].shape) {
            line = "parameter '" + entries[i].name + "': checkpoint " + shape_str(ck.manifest[i].shape) +
                   " vs model " + shape_str(entries[i].var.shape());
        }
        if (line.empty()) continue;
        if (ndiff++ < 8) diff += (diff.empty() ? "" : "\n  ") + line;
    }
    if (ndiff) {
        throw ShapeMismatch("checkpoint does not match model (" + std::to_string(ndiff) + " differences):\n  " + diff);
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto& t = entries[i].var.mutable_value();
        const float* src = ck.payload.data() + ck.manifest[i].offset / 4;
        for (std::size_t j = 0; j < t.numel(); ++j) t[j] = static_cast<T>(src[j]);
    }
}

template <typename T>
void save_checkpoint(const SaatModel<T>& model, const std::string& path) {
    io::write_file(path, serialize_checkpoint(model));
}

/// Rebuilds the model from the checkpoint's own configuration.
template <typename T>
SaatModel<T> load_checkpoint(const std::string& path) {
    const auto ck = parse_checkpoint(io::read_file(path));
    SaatModel<T> model(ck.config);
    load_parameters(model, ck);
    return model;
}

template <typename T>
void load_checkpoint_into(SaatModel<T>& model, const std::string& path) {
    load_parameters(model, parse_checkpoint(io::read_file(path)));
}

}  // namespace saat
