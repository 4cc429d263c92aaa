// Copyright 2026 MATE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat binary checkpoint: a fixed header followed by named parameter
// blocks of little-endian 64-bit floats. Runs with equal seeds produce
// byte-identical files.
//
// Layout:
//   bytes 0..7    magic "MATECKPT"
//   u32           format version (1)
//   u32 x4        F, H, D, P
//   u64           seed
//   u32           block count
//   per block:    u32 name length, name bytes,
//                 u32 ndim, u64 extents..., f64 values...
// All integers and floats little-endian.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mate/encoders.hpp"
#include "mate/error.hpp"

namespace mate {

struct NamedBlock {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

struct Checkpoint {
    EncoderDims dims;
    std::uint64_t seed = 0;
    std::vector<NamedBlock> blocks;

    const NamedBlock* find(const std::string& name) const {
        for (const auto& b : blocks) {
            if (b.name == name) return &b;
        }
        return nullptr;
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    put_u64(out, bits);
}

class ByteReader {
public:
    ByteReader(const std::string& buf, const std::string& path)
        : buf_(buf), path_(path) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        return v;
    }

    double f64() {
        const std::uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, sizeof(d));
        return d;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool exhausted() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) {
        if (pos_ + n > buf_.size()) {
            throw ParameterError("checkpoint: truncated file " + path_);
        }
    }
    const std::string& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "MATECKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out;
    out.append(kCheckpointMagic, 8);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.dims.feat_dim));
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.dims.hidden_dim));
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.dims.embed_dim));
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.dims.phoneme_count));
    detail::put_u64(out, ckpt.seed);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.blocks.size()));
    for (const auto& b : ckpt.blocks) {
        detail::put_u32(out, static_cast<std::uint32_t>(b.name.size()));
        out.append(b.name);
        detail::put_u32(out, static_cast<std::uint32_t>(b.shape.size()));
        for (auto e : b.shape) detail::put_u64(out, e);
        for (double v : b.data) detail::put_f64(out, v);
    }
    return out;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ParameterError("checkpoint: cannot open " + path + " for writing");
    const std::string bytes = serialize_checkpoint(ckpt);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ParameterError("checkpoint: write failed for " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParameterError("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    detail::ByteReader r(buf, path);
    if (r.bytes(8) != std::string(kCheckpointMagic, 8)) {
        throw ParameterError("checkpoint: bad magic in " + path);
    }
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw ParameterError("checkpoint: unsupported version " +
                             std::to_string(version) + " in " + path);
    }
    Checkpoint ckpt;
    ckpt.dims.feat_dim = r.u32();
    ckpt.dims.hidden_dim = r.u32();
    ckpt.dims.embed_dim = r.u32();
    ckpt.dims.phoneme_count = r.u32();
    ckpt.seed = r.u64();
    const std::uint32_t n_blocks = r.u32();
    ckpt.blocks.reserve(n_blocks);
    for (std::uint32_t i = 0; i < n_blocks; ++i) {
        NamedBlock b;
        b.name = r.bytes(r.u32());
        const std::uint32_t ndim = r.u32();
        std::size_t numel = 1;
        for (std::uint32_t k = 0; k < ndim; ++k) {
            b.shape.push_back(static_cast<std::size_t>(r.u64()));
            numel *= b.shape.back();
        }
        b.data.resize(numel);
        for (auto& v : b.data) v = r.f64();
        ckpt.blocks.push_back(std::move(b));
    }
    if (!r.exhausted()) {
        throw ParameterError("checkpoint: trailing bytes in " + path);
    }
    return ckpt;
}

/// Parameter blocks in checkpoint order.
inline std::vector<NamedBlock> params_to_blocks(EncoderParams& params) {
    std::vector<NamedBlock> out;
    for (auto& [name, tensor] : params.blocks()) {
        out.push_back(NamedBlock{name, tensor->shape(), tensor->value()});
    }
    return out;
}

/// Rebuild encoder parameters from a checkpoint; every parameter block must
/// be present with the right shape.
inline EncoderParams params_from_checkpoint(const Checkpoint& ckpt) {
    EncoderParams params;
    params.dims = ckpt.dims;
    for (auto& [name, slot] : params.blocks()) {
        const NamedBlock* b = ckpt.find(name);
        if (b == nullptr) {
            throw ParameterError("checkpoint: missing parameter block '" + name + "'");
        }
        *slot = Tensor::leaf(b->shape, b->data, true);
    }
    return params;
}

}  // namespace mate
